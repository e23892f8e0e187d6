"""Experiment directories, config resolution and checkpoint loading for commands."""

import argparse
from datetime import datetime
from pathlib import Path
from typing import Optional

from density_adapt.config import ExperimentConfig, dump_config, load_config
from density_adapt.data import Sample, load_dataset, select_scenes
from density_adapt.errors import ConfigError, DataError
from density_adapt.networks import Counter, MapRefiner, load_checkpoint
from density_adapt.utils import resolve_device, setup_logger

logger = setup_logger("density_adapt.cli")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Load the config file and apply ``--set`` overrides, then ``--seed``."""
    overrides = list(args.overrides or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def prepare_output(path: Path, force: bool) -> Path:
    """Create ``path``; refuse a non-empty directory unless forced."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"Output directory {path} is not empty; pass --force to reuse it")
        logger.warning("Reusing non-empty output directory", extra={"path": str(path)})
    path.mkdir(parents=True, exist_ok=True)
    return path


def experiment_dir(config: ExperimentConfig, command: str, out: Optional[Path] = None, force: bool = False) -> Path:
    """
    Create the run directory and echo the resolved config into it.

    Without ``--out`` the directory is ``<output_dir>/<timestamp>-<command>-<config hash>``.
    """
    if out is None:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        out = Path(config.output_dir) / f"{stamp}-{command}-{config.config_hash()}"
    path = prepare_output(out, force)
    dump_config(config, path / "config.yaml")
    logger.info("Experiment directory ready", extra={"path": str(path), "command": command})
    return path


def load_samples(
    root: Optional[Path], config: ExperimentConfig, field_name: str, filter_scenes: bool = False
) -> list[Sample]:
    """
    Load a configured dataset, optionally applying the scene rule.

    Args:
        root: Dataset root from the config
        config: Experiment config
        field_name: Config field the root came from, for error messages
        filter_scenes: Apply ``data.scene_rule`` when one is set
    """
    if root is None:
        raise ConfigError(f"data.{field_name} is not set")
    samples = list(load_dataset(root))
    rule = config.resolved_scene_rule() if filter_scenes else None
    if rule is not None:
        samples = select_scenes(samples, rule, keep_unlabeled=config.data.keep_unlabeled_meta)
    if not samples:
        raise DataError(f"No usable samples under data.{field_name} ({root})")
    return samples


def load_counter(path: Path, config: ExperimentConfig) -> Counter:
    """Counter parameters from archive entry ``G``."""
    counter = Counter(config.network.counter)
    load_checkpoint(path, {"G": counter}, config.network)
    return counter.to(resolve_device(config.train.device)).eval()


def load_refiner(path: Path, config: ExperimentConfig) -> MapRefiner:
    """Refiner parameters from archive entry ``R``."""
    refiner = MapRefiner(config.network.refiner)
    load_checkpoint(path, {"R": refiner}, config.network)
    return refiner.to(resolve_device(config.train.device)).eval()
