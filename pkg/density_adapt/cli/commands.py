"""Command handlers. Each takes parsed arguments and returns an exit code."""

import argparse
import json
import shutil
from pathlib import Path

import numpy as np
import torch

from density_adapt.cli.experiment import (
    experiment_dir,
    load_counter,
    load_refiner,
    load_samples,
    prepare_output,
    resolve_config,
)
from density_adapt.cli.plots import plot_density_grid, plot_loss_curves
from density_adapt.config import ExperimentConfig, dump_config
from density_adapt.data import CrowdDataset, Sample, density_from_points, gen_toy_domains, save_dataset
from density_adapt.data.dataset import to_channels
from density_adapt.metrics import EvalReport
from density_adapt.services import (
    EvaluationService,
    TrainState,
    adapt_train,
    coarse_maps,
    refiner_pipeline,
    spr_supervised_train,
    supervised_train,
    write_report,
)
from density_adapt.services.evaluation import predict_maps
from density_adapt.services.refinement import MIN_SOURCE_TEST
from density_adapt.utils import resolve_device, setup_logger

logger = setup_logger("density_adapt.cli")

TOY_SPLITS = ("source", "source_test", "target", "target_test")


def cmd_gen_toy(args: argparse.Namespace) -> int:
    """Write source, target and held-out toy datasets plus a config pointing at them."""
    config = resolve_config(args)
    toy = config.data.toy
    n = args.n if args.n is not None else toy.n_images
    n_test = max(MIN_SOURCE_TEST, n // 4)
    out = Path(args.out) if args.out else Path(config.output_dir) / "toy"

    prepare_output(out, args.force)
    for split in TOY_SPLITS:
        shutil.rmtree(out / split, ignore_errors=True)

    seed = config.train.seed
    source, target = gen_toy_domains(seed, n, toy.size, toy.gap, toy)
    source_test, target_test = gen_toy_domains(seed, n_test, toy.size, toy.gap, toy, start=n)
    for split, samples in zip(TOY_SPLITS, (source, source_test, target, target_test)):
        save_dataset(samples, out / split)

    resolved = config.model_copy(deep=True)
    resolved.data.source_root = out / "source"
    resolved.data.source_test_root = out / "source_test"
    resolved.data.target_root = out / "target"
    resolved.data.eval_root = out / "target_test"
    dump_config(resolved, out / "config.yaml")

    logger.info("Toy datasets written", extra={"path": str(out), "n_images": n, "n_test": n_test, "seed": seed})
    print(out)
    return 0


def _write_training_outputs(state: TrainState, config: ExperimentConfig, exp: Path) -> None:
    summary = {
        "mode": state.mode,
        "steps": state.step,
        "best_step": state.best_step,
        "best_val_loss": state.best_val_loss,
        "best_val_mae": state.best_val_mae,
        "best_val_mse": state.best_val_mse,
        "stopped_early": state.stopped_early,
        "seed": config.train.seed,
    }
    (exp / "summary.json").write_text(json.dumps(summary, indent=2))
    plot_loss_curves(state.history, exp / "loss_curves.png")

    if config.data.eval_root is not None:
        samples = load_samples(config.data.eval_root, config, "eval_root")
        service = EvaluationService(sigma=config.data.sigma, device=resolve_device(config.train.device))
        report = service.evaluate(state.counter, samples)
        write_report(report, exp / "report.json")
        _plot_samples(state.counter, samples, config, exp / "density_grid.png")


def _train_command(args: argparse.Namespace, mode: str) -> int:
    config = resolve_config(args)
    exp = experiment_dir(config, args.command, args.out, args.force)
    source = load_samples(config.data.source_root, config, "source_root", filter_scenes=True)

    if mode == "adapt":
        target = load_samples(config.data.target_root, config, "target_root")
        state = adapt_train(source, target, config, out_dir=exp, resume_from=args.resume)
    elif mode == "spr":
        state = spr_supervised_train(source, config, out_dir=exp, resume_from=args.resume)
    else:
        state = supervised_train(source, config, out_dir=exp, resume_from=args.resume)

    _write_training_outputs(state, config, exp)
    print(exp)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    """Supervised source-only counter (no adaptation)."""
    return _train_command(args, "supervised")


def cmd_spr_train(args: argparse.Namespace) -> int:
    """Supervised counter with the pyramid-consistency term on the labeled set."""
    return _train_command(args, "spr")


def cmd_adapt(args: argparse.Namespace) -> int:
    """Adversarial adaptation from the source set to the target set."""
    return _train_command(args, "adapt")


def _plot_samples(counter, samples: list[Sample], config: ExperimentConfig, path: Path, refiner=None) -> None:
    shown = samples[: min(4, len(samples))]
    device = resolve_device(config.train.device)
    coarse = [m.numpy() for m in coarse_maps(counter, shown, device)]
    refined = None
    if refiner is not None:
        with torch.no_grad():
            refined = [
                refiner(torch.from_numpy(m)[None, None].to(device)).clamp_min(0.0)[0, 0].cpu().numpy()
                for m in coarse
            ]
    gts = [density_from_points(s.annotation, s.size, sigma=config.data.sigma, out_scale=1.0).grid for s in shown]
    images = [to_channels(s.image, 1) for s in shown]
    plot_density_grid(images, gts, coarse, path, refined=refined, names=[s.name for s in shown])


def cmd_refine_train(args: argparse.Namespace) -> int:
    """
    Train the map refiner on held-out source predictions and refine target maps.

    ``--source-counter`` (usually the source-only counter) produces the
    training maps; ``--counter`` produces the target maps that get refined.
    """
    config = resolve_config(args)
    exp = experiment_dir(config, args.command, args.out, args.force)
    device = resolve_device(config.train.device)

    counter = load_counter(args.counter, config)
    source_counter = load_counter(args.source_counter, config) if args.source_counter else counter
    source_test = load_samples(config.data.source_test_root, config, "source_test_root", filter_scenes=True)
    target = load_samples(config.data.target_root, config, "target_root")

    target_coarse = coarse_maps(counter, target, device)
    result = refiner_pipeline([], source_test, source_counter, target_coarse, config, out_dir=exp)

    np.savez_compressed(exp / "refined_maps.npz", **{s.name: m.numpy() for s, m in zip(target, result.refined_maps)})
    summary = {
        "best_step": result.best_step,
        "best_val_loss": result.best_val_loss,
        "test_psnr_coarse": result.test_psnr_coarse,
        "test_psnr_refined": result.test_psnr_refined,
        "split": result.split,
    }
    (exp / "refinement.json").write_text(json.dumps(summary, indent=2))
    _plot_samples(counter, target, config, exp / "density_grid.png", refiner=result.refiner)
    print(exp)
    return 0


def _evaluate_command(args: argparse.Namespace, use_refiner: bool) -> EvalReport:
    config = resolve_config(args)
    exp = experiment_dir(config, args.command, args.out, args.force)
    root = config.data.eval_root or config.data.target_root
    samples = load_samples(root, config, "eval_root")

    counter = load_counter(args.counter, config)
    refiner = load_refiner(args.refiner, config) if use_refiner else None

    service = EvaluationService(sigma=config.data.sigma, device=resolve_device(config.train.device))
    report = service.evaluate(counter, samples, refiner)
    write_report(report, exp / "report.json", exp / "per_sample.csv" if args.per_sample_csv else None)
    if refiner is not None:
        device = resolve_device(config.train.device)
        images = CrowdDataset(samples, channels=config.network.counter.in_channels, labeled=False).images
        refined = {s.name: predict_maps(counter, x.to(device), refiner)[2].cpu().numpy() for s, x in zip(samples, images)}
        np.savez_compressed(exp / "refined_maps.npz", **refined)
    _plot_samples(counter, samples, config, exp / "density_grid.png", refiner=refiner)
    print(exp)
    return report


def cmd_refine(args: argparse.Namespace) -> int:
    """Evaluate a counter followed by a trained refiner."""
    _evaluate_command(args, use_refiner=True)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Evaluate a counter, with a refiner when ``--refiner`` is given."""
    _evaluate_command(args, use_refiner=args.refiner is not None)
    return 0
