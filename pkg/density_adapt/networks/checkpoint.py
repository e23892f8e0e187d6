"""Checkpoint archives: named parameter sets plus a JSON manifest."""

import json
import pickle
from pathlib import Path
from typing import Any, Optional

import torch
from torch import nn

from density_adapt.config import NetworkConfig
from density_adapt.errors import CheckpointError
from density_adapt.utils import setup_logger

logger = setup_logger("density_adapt.checkpoint")

FORMAT_VERSION = 1
MANIFEST_KEY = "manifest.json"


def save_checkpoint(
    path: Path,
    modules: dict[str, nn.Module],
    network: NetworkConfig,
    step: int,
    extra: Optional[dict[str, Any]] = None,
) -> Path:
    """
    Write one archive holding every named network and a manifest.

    Args:
        path: Destination file
        modules: Networks by archive name (``G``, ``D1``, ``D2``, ``D3``, ``R``...)
        network: Architecture config, echoed into the manifest
        step: Training step the parameters belong to
        extra: Optional tensors/containers for exact resume (optimizers, RNG)

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "networks": sorted(modules),
        "network_config": network.model_dump(mode="json"),
    }
    archive = {
        MANIFEST_KEY: json.dumps(manifest, sort_keys=True),
        "tensors": {name: module.state_dict() for name, module in modules.items()},
        "extra": extra or {},
    }
    torch.save(archive, path)
    logger.info("Checkpoint saved", extra={"path": str(path), "step": step, "networks": sorted(modules)})
    return path


def read_checkpoint(path: Path, network: Optional[NetworkConfig] = None) -> tuple[dict, dict, dict]:
    """
    Read an archive and verify its architecture.

    Args:
        path: Archive written by :func:`save_checkpoint`
        network: Expected architecture; mismatch raises CheckpointError

    Returns:
        (manifest, tensors by network name, extra)
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
        manifest = json.loads(archive[MANIFEST_KEY])
    except (EOFError, KeyError, RuntimeError, ValueError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}") from e

    if network is not None and manifest["network_config"] != network.model_dump(mode="json"):
        raise CheckpointError(f"Checkpoint {path} was built for a different network config")
    return manifest, archive["tensors"], archive.get("extra", {})


def load_checkpoint(
    path: Path, modules: dict[str, nn.Module], network: NetworkConfig
) -> dict[str, Any]:
    """
    Load named parameter sets into existing networks.

    Args:
        path: Archive path
        modules: Networks to fill, by archive name
        network: Expected architecture

    Returns:
        Manifest merged with the ``extra`` payload under key ``extra``
    """
    manifest, tensors, extra = read_checkpoint(path, network)
    missing = sorted(set(modules) - set(tensors))
    if missing:
        raise CheckpointError(f"Checkpoint {path} lacks networks {missing}")
    for name, module in modules.items():
        module.load_state_dict(tensors[name])
    logger.info("Checkpoint loaded", extra={"path": str(path), "step": manifest["step"]})
    return {**manifest, "extra": extra}
