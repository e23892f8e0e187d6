"""Counter training: supervised, pyramid-regularized and adversarially adapted.

One iteration draws a labeled source batch (and, when adapting, an
unlabeled target batch of the same size), runs the discriminator update
with the counter frozen, then the counter update with the discriminators
frozen. Early stopping watches the counting loss on a held-out source
split.
"""

import csv
import math
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass, field
from itertools import chain
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from density_adapt.config import ExperimentConfig
from density_adapt.data import CrowdDataset, Sample, SamplePair, split_indices
from density_adapt.errors import CheckpointError, DataError, NumericalError, ShapeError
from density_adapt.losses import (
    M_BAND,
    N_BAND,
    LossComponents,
    PyramidScales,
    loss_count,
    loss_feature_adv,
    loss_feature_disc,
    loss_map_adv,
    loss_map_disc,
    loss_spr,
    loss_total,
    rescale_images,
    sample_pyramid_scales,
)
from density_adapt.metrics import mae, mse
from density_adapt.networks import (
    TAP_ARCHIVE_NAMES,
    Counter,
    FeatureDiscriminator,
    MapDiscriminator,
    load_checkpoint,
    save_checkpoint,
)
from density_adapt.utils import (
    deterministic_mode_requested,
    enable_determinism,
    fork_seed,
    resolve_device,
    setup_logger,
    torch_generator,
)

logger = setup_logger("density_adapt.training")

TrainMode = Literal["supervised", "spr", "adapt"]
DatasetLike = Union[CrowdDataset, Sequence[Sample]]

SPR_MULTIPLE = 8

METRIC_COLUMNS = [
    "step",
    "loss_total",
    "loss_count",
    "loss_feature_adv",
    "loss_map_adv",
    "loss_spr",
    "loss_d_feature",
    "loss_d_map",
    "lr_g",
    "lr_d",
    "val_loss",
    "val_mae",
    "val_mse",
]


class BatchSampler:
    """Endless reshuffled mini-batches of dataset indices with checkpointable state."""

    def __init__(self, n: int, batch_size: int, generator: torch.Generator):
        self.n = n
        self.batch_size = batch_size
        self.generator = generator
        self.order: list[int] = []
        self.cursor = 0

    def next_indices(self) -> list[int]:
        batch: list[int] = []
        while len(batch) < self.batch_size:
            if self.cursor >= len(self.order):
                self.order = torch.randperm(self.n, generator=self.generator).tolist()
                self.cursor = 0
            take = min(self.batch_size - len(batch), len(self.order) - self.cursor)
            batch += self.order[self.cursor : self.cursor + take]
            self.cursor += take
        return batch

    def state_dict(self) -> dict:
        return {
            "generator": self.generator.get_state(),
            "order": torch.tensor(self.order, dtype=torch.long),
            "cursor": self.cursor,
        }

    def load_state_dict(self, state: dict) -> None:
        self.generator.set_state(state["generator"])
        self.order = state["order"].tolist()
        self.cursor = int(state["cursor"])


class OscillationMonitor:
    """
    Rolling coefficient of variation of the discriminator loss.

    Logs a warning when the window's std / |mean| exceeds the threshold,
    then starts a fresh window. Nothing else reacts to it.
    """

    def __init__(self, window: int, threshold: float):
        self.values: deque[float] = deque(maxlen=window)
        self.threshold = threshold

    def update(self, value: float, step: int) -> bool:
        self.values.append(value)
        if len(self.values) < self.values.maxlen:
            return False
        mean = float(np.mean(self.values))
        spread = float(np.std(self.values))
        variation = spread / abs(mean) if mean else math.inf
        if variation <= self.threshold:
            return False
        logger.warning(
            "Discriminator loss oscillating",
            extra={"step": step, "coefficient_of_variation": variation, "window": len(self.values)},
        )
        self.values.clear()
        return True


class MetricsLog:
    """Per-step scalars, kept in memory and mirrored to a CSV file."""

    def __init__(self, path: Optional[Path] = None, append: bool = False):
        self.rows: list[dict] = []
        self.path = Path(path) if path is not None else None
        self._handle = None
        self._writer = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            resume = append and self.path.exists()
            self._handle = open(self.path, "a" if resume else "w", newline="")
            self._writer = csv.DictWriter(self._handle, fieldnames=METRIC_COLUMNS)
            if not resume:
                self._writer.writeheader()

    def write(self, row: dict) -> None:
        full = {column: row.get(column, "") for column in METRIC_COLUMNS}
        self.rows.append(full)
        if self._writer is not None:
            self._writer.writerow(full)
            self._handle.flush()

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None


@dataclass
class TrainState:
    """Result of a training run; ``counter`` holds the best-validation parameters."""

    mode: str
    step: int
    counter: Counter
    feature_discriminators: nn.ModuleDict
    map_discriminator: Optional[MapDiscriminator]
    best_step: int = 0
    best_val_loss: float = math.inf
    best_val_mae: float = math.nan
    best_val_mse: float = math.nan
    stopped_early: bool = False
    history: list[dict] = field(default_factory=list)


class CounterTrainer:
    """
    Trainer for the counter network in one of three modes.

    ``supervised`` minimizes the counting loss on the source set,
    ``spr`` adds the pyramid-consistency term on the same labeled images,
    ``adapt`` runs the alternating discriminator/counter game against an
    unlabeled target set.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        mode: TrainMode = "supervised",
        out_dir: Optional[Path] = None,
    ):
        self.config = config
        self.mode = mode
        self.train_config = config.train
        self.weights = config.train.weights
        self.out_dir = Path(out_dir) if out_dir is not None else None

        cfg = self.train_config
        enable_determinism(cfg.deterministic or deterministic_mode_requested())
        self.device = resolve_device(cfg.device)

        torch.manual_seed(fork_seed(cfg.seed, "counter_init"))
        self.counter = Counter(config.network.counter).to(self.device)

        self.feature_discriminators = nn.ModuleDict()
        self.map_discriminator: Optional[MapDiscriminator] = None
        self.optimizers: dict[str, torch.optim.Optimizer] = {
            "G": torch.optim.Adam(self.counter.parameters(), lr=cfg.lr_g, betas=cfg.betas, eps=cfg.eps)
        }
        if mode == "adapt":
            torch.manual_seed(fork_seed(cfg.seed, "discriminator_init"))
            for tap in config.network.feature_taps:
                self.feature_discriminators[tap] = FeatureDiscriminator(
                    self.counter.tap_channels[tap], config.network.discriminator
                )
            self.map_discriminator = MapDiscriminator(config.network.discriminator)
            self.feature_discriminators.to(self.device)
            self.map_discriminator.to(self.device)
            self.optimizers["D"] = torch.optim.Adam(
                chain(self.feature_discriminators.parameters(), self.map_discriminator.parameters()),
                lr=cfg.lr_d,
                betas=cfg.betas,
                eps=cfg.eps,
            )

        self.source_sampler: Optional[BatchSampler] = None
        self.target_sampler: Optional[BatchSampler] = None
        self.scale_generator = torch_generator(cfg.seed, "pyramid_scales")
        self.monitor = OscillationMonitor(cfg.oscillation_window, cfg.oscillation_threshold)

        self.step = 0
        self.best_step = 0
        self.best_val_loss = math.inf
        self.best_val_mae = math.nan
        self.best_val_mse = math.nan
        self.bad_evals = 0
        self.best_counter_state: Optional[dict] = None

    # ------------------------------------------------------------------
    # data plumbing

    def _as_dataset(self, data: DatasetLike, labeled: bool) -> CrowdDataset:
        if isinstance(data, CrowdDataset):
            return data
        return CrowdDataset(
            list(data),
            channels=self.config.network.counter.in_channels,
            sigma=self.config.data.sigma,
            out_scale=self.counter.out_scale,
            labeled=labeled,
        )

    def _split(self, source: CrowdDataset) -> tuple[CrowdDataset, CrowdDataset]:
        n = len(source)
        if n < 2:
            logger.warning("Source set too small to hold out validation; validating on training data", extra={"n": n})
            return source, source
        n_val = max(1, round(self.train_config.val_fraction * n))
        fraction = n_val / n
        train_idx, val_idx = split_indices(
            n, (1.0 - fraction, fraction), fork_seed(self.train_config.seed, "source_split")
        )
        return source.subset(train_idx), source.subset(val_idx)

    def _stack(self, tensors: list[torch.Tensor]) -> torch.Tensor:
        if len({tuple(t.shape) for t in tensors}) > 1:
            raise ShapeError("Images in one batch differ in size; use batch_size 1 for mixed-size data")
        return torch.stack(tensors).to(self.device)

    # ------------------------------------------------------------------
    # updates

    def _modules(self) -> dict[str, nn.Module]:
        modules: dict[str, nn.Module] = {"G": self.counter}
        for tap, disc in self.feature_discriminators.items():
            modules[TAP_ARCHIVE_NAMES[tap]] = disc
        if self.map_discriminator is not None:
            modules["D3"] = self.map_discriminator
        return modules

    def _set_discriminators_trainable(self, trainable: bool) -> None:
        for param in self.feature_discriminators.parameters():
            param.requires_grad_(trainable)
        if self.map_discriminator is not None:
            for param in self.map_discriminator.parameters():
                param.requires_grad_(trainable)

    def _check_finite(self, loss: torch.Tensor, stage: str) -> None:
        if torch.isfinite(loss):
            return
        snapshot = None
        if self.out_dir is not None:
            snapshot = save_checkpoint(
                self.out_dir / "nan_snapshot.pt",
                self._modules(),
                self.config.network,
                self.step,
                extra={"stage": stage},
            )
        logger.error(
            "Non-finite loss, aborting",
            extra={"step": self.step, "stage": stage, "snapshot": str(snapshot)},
        )
        raise NumericalError(f"Non-finite {stage} loss at step {self.step}", step=self.step, snapshot=snapshot)

    def _pyramid_loss(self, images: torch.Tensor, a_1x: torch.Tensor) -> torch.Tensor:
        scales = sample_pyramid_scales(self.scale_generator)
        multiple = math.lcm(SPR_MULTIPLE, self.counter.downsample)
        images_m, m = rescale_images(images, scales.m, multiple, band=M_BAND)
        images_n, n = rescale_images(images, scales.n, multiple, band=N_BAND)
        realized = PyramidScales(m=m, n=n)
        # off-multiple sizes are padded by the counter; predict crops the padding back off
        return loss_spr(a_1x, self.counter.predict(images_m), self.counter.predict(images_n), realized)

    def discriminator_update(self, source_images: torch.Tensor, target_images: torch.Tensor) -> dict:
        """One optimizer step on every discriminator with the counter frozen."""
        reduction = self.train_config.loss_reduction
        with torch.no_grad():
            source = self.counter(source_images)
            target = self.counter(target_images)

        loss_feature = sum(
            loss_feature_disc(disc(source.tap(tap)), disc(target.tap(tap)), reduction)
            for tap, disc in self.feature_discriminators.items()
        )
        loss_map = loss_map_disc(self.map_discriminator(source.density), self.map_discriminator(target.density))
        loss = loss_feature + loss_map
        self._check_finite(loss, "discriminator")

        optimizer = self.optimizers["D"]
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        return {"loss_d_feature": float(loss_feature), "loss_d_map": float(loss_map)}

    def counter_update(
        self,
        source_images: torch.Tensor,
        source_densities: torch.Tensor,
        target_images: Optional[torch.Tensor] = None,
    ) -> dict:
        """One optimizer step on the counter with every discriminator frozen."""
        w = self.weights
        reduction = self.train_config.loss_reduction
        self._set_discriminators_trainable(False)
        try:
            source = self.counter(source_images)
            components = LossComponents(count=loss_count(source.density, source_densities))

            if self.mode == "adapt":
                # zero-weight terms are skipped, so a fully zeroed game leaves supervised training untouched
                if w.lambda_ > 0 or w.beta > 0 or w.gamma > 0:
                    target = self.counter(target_images)
                if w.lambda_ > 0:
                    components.feature_adv = loss_feature_adv(
                        *(disc(target.tap(tap)) for tap, disc in self.feature_discriminators.items()),
                        reduction=reduction,
                    )
                if w.beta > 0:
                    components.map_adv = loss_map_adv(self.map_discriminator(target.density))
                if w.gamma > 0:
                    components.spr = self._pyramid_loss(target_images, target.density)
            elif self.mode == "spr" and w.gamma > 0:
                components.spr = self._pyramid_loss(source_images, source.density)

            loss = loss_total(components, w)
            self._check_finite(loss, "counter")

            optimizer = self.optimizers["G"]
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        finally:
            self._set_discriminators_trainable(True)

        return {
            "loss_total": float(loss),
            "loss_count": float(components.count),
            "loss_feature_adv": float(components.feature_adv),
            "loss_map_adv": float(components.map_adv),
            "loss_spr": float(components.spr),
        }

    def next_pair(self, train_set: CrowdDataset, target: Optional[CrowdDataset] = None) -> SamplePair:
        """Draw the next source batch and, when adapting, the next target batch."""
        indices = self.source_sampler.next_indices()
        target_images = None
        if self.mode == "adapt":
            target_images = self._stack([target.images[i] for i in self.target_sampler.next_indices()])
        return SamplePair(
            source_images=self._stack([train_set.images[i] for i in indices]),
            source_densities=self._stack([train_set.densities[i] for i in indices]),
            target_images=target_images,
        )

    def train_step(self, train_set: CrowdDataset, target: Optional[CrowdDataset] = None) -> dict:
        """Run one iteration: discriminator updates (when adapting), then counter updates."""
        cfg = self.train_config
        pair = self.next_pair(train_set, target)

        row: dict = {"step": self.step, "lr_g": self.optimizers["G"].param_groups[0]["lr"]}
        if self.mode == "adapt":
            row["lr_d"] = self.optimizers["D"].param_groups[0]["lr"]
            for _ in range(cfg.d_updates_per_iter):
                row.update(self.discriminator_update(pair.source_images, pair.target_images))
            self.monitor.update(row["loss_d_feature"] + row["loss_d_map"], self.step)
        else:
            row.update({"loss_d_feature": 0.0, "loss_d_map": 0.0, "lr_d": 0.0})

        for _ in range(cfg.g_updates_per_iter):
            row.update(self.counter_update(pair.source_images, pair.source_densities, pair.target_images))

        logger.debug("Training step", extra=row)
        return row

    # ------------------------------------------------------------------
    # validation and checkpoints

    @torch.no_grad()
    def validate(self, val_set: CrowdDataset) -> dict:
        """Counting loss and count errors of the current counter on labeled data."""
        self.counter.eval()
        losses, predicted = [], []
        try:
            for image, density in zip(val_set.images, val_set.densities):
                pred = self.counter.predict(image[None].to(self.device))
                losses.append(float(loss_count(pred, density[None].to(self.device))))
                predicted.append(float(pred.clamp_min(0.0).sum()))
        finally:
            self.counter.train()
        counts = val_set.counts()
        return {"val_loss": float(np.mean(losses)), "val_mae": mae(counts, predicted), "val_mse": mse(counts, predicted)}

    def _record_validation(self, result: dict) -> None:
        if result["val_loss"] < self.best_val_loss:
            self.best_val_loss = result["val_loss"]
            self.best_val_mae = result["val_mae"]
            self.best_val_mse = result["val_mse"]
            self.best_step = self.step
            self.bad_evals = 0
            self.best_counter_state = {k: v.detach().clone() for k, v in self.counter.state_dict().items()}
            if self.out_dir is not None:
                save_checkpoint(
                    self.out_dir / "best.pt",
                    self._modules(),
                    self.config.network,
                    self.step,
                    extra={"mode": self.mode, **result},
                )
        else:
            self.bad_evals += 1
        logger.info(
            "Validation",
            extra={"step": self.step, "best_step": self.best_step, "bad_evals": self.bad_evals, **result},
        )

    def _resume_payload(self) -> dict:
        return {
            "mode": self.mode,
            "optimizers": {name: opt.state_dict() for name, opt in self.optimizers.items()},
            "samplers": {
                name: sampler.state_dict()
                for name, sampler in (("source", self.source_sampler), ("target", self.target_sampler))
                if sampler is not None
            },
            "scale_generator": self.scale_generator.get_state(),
            "best_step": self.best_step,
            "best_val_loss": self.best_val_loss,
            "best_val_mae": self.best_val_mae,
            "best_val_mse": self.best_val_mse,
            "bad_evals": self.bad_evals,
            "best_counter": self.best_counter_state or {},
            "oscillation_values": list(self.monitor.values),
        }

    def save(self, path: Path) -> Path:
        """Write the full training state for exact resumption."""
        return save_checkpoint(path, self._modules(), self.config.network, self.step, extra=self._resume_payload())

    def restore(self, path: Path) -> None:
        """Load a state written by :meth:`save`; samplers must already exist."""
        info = load_checkpoint(path, self._modules(), self.config.network)
        extra = info["extra"]
        if extra.get("mode") != self.mode:
            raise CheckpointError(f"Checkpoint {path} holds a {extra.get('mode')!r} run, not {self.mode!r}")

        for name, optimizer in self.optimizers.items():
            optimizer.load_state_dict(extra["optimizers"][name])
        self.source_sampler.load_state_dict(extra["samplers"]["source"])
        if self.target_sampler is not None:
            self.target_sampler.load_state_dict(extra["samplers"]["target"])
        self.scale_generator.set_state(extra["scale_generator"])

        self.step = int(info["step"])
        self.best_step = int(extra["best_step"])
        self.best_val_loss = float(extra["best_val_loss"])
        self.best_val_mae = float(extra["best_val_mae"])
        self.best_val_mse = float(extra["best_val_mse"])
        self.bad_evals = int(extra["bad_evals"])
        self.best_counter_state = extra["best_counter"] or None
        self.monitor.values.extend(extra["oscillation_values"])
        logger.info("Training resumed", extra={"path": str(path), "step": self.step, "mode": self.mode})

    # ------------------------------------------------------------------

    def fit(
        self,
        source: DatasetLike,
        target: Optional[DatasetLike] = None,
        val: Optional[DatasetLike] = None,
        resume_from: Optional[Path] = None,
    ) -> TrainState:
        """
        Train until ``max_steps`` or until validation stops improving.

        Args:
            source: Labeled source samples
            target: Unlabeled target samples (``adapt`` mode only)
            val: Labeled validation samples; defaults to a held-out source split
            resume_from: Checkpoint written by :meth:`save` to continue from

        Returns:
            TrainState whose counter carries the best-validation parameters
        """
        cfg = self.train_config
        source_set = self._as_dataset(source, labeled=True)
        if len(source_set) == 0:
            raise DataError("Source set is empty")
        target_set = None
        if self.mode == "adapt":
            if target is None or len(target) == 0:
                raise DataError("Adaptation needs a non-empty target set")
            target_set = self._as_dataset(target, labeled=False)

        if val is None:
            train_set, val_set = self._split(source_set)
        else:
            train_set, val_set = source_set, self._as_dataset(val, labeled=True)

        self.source_sampler = BatchSampler(
            len(train_set), cfg.batch_size, torch_generator(cfg.seed, "source_sampler")
        )
        if target_set is not None:
            self.target_sampler = BatchSampler(
                len(target_set), cfg.batch_size, torch_generator(cfg.seed, "target_sampler")
            )
        if resume_from is not None:
            self.restore(resume_from)

        metrics = MetricsLog(
            self.out_dir / "metrics.csv" if self.out_dir is not None else None,
            append=resume_from is not None,
        )
        logger.info(
            "Training started",
            extra={
                "mode": self.mode,
                "n_train": len(train_set),
                "n_val": len(val_set),
                "n_target": len(target_set) if target_set is not None else 0,
                "start_step": self.step,
                "max_steps": cfg.max_steps,
                "seed": cfg.seed,
            },
        )

        stopped_early = False
        self.counter.train()
        try:
            for step in tqdm(
                range(self.step + 1, cfg.max_steps + 1),
                desc=self.mode,
                disable=not cfg.show_progress,
            ):
                self.step = step
                row = self.train_step(train_set, target_set)
                if step % cfg.eval_every == 0 or step == cfg.max_steps:
                    result = self.validate(val_set)
                    row.update(result)
                    self._record_validation(result)
                metrics.write(row)
                if self.bad_evals >= cfg.patience:
                    stopped_early = True
                    logger.info("Early stopping", extra={"step": step, "best_step": self.best_step})
                    break
        finally:
            metrics.close()

        if self.out_dir is not None:
            self.save(self.out_dir / "last.pt")
        if self.best_counter_state is not None:
            self.counter.load_state_dict(self.best_counter_state)

        logger.info(
            "Training finished",
            extra={
                "mode": self.mode,
                "steps": self.step,
                "best_step": self.best_step,
                "best_val_loss": self.best_val_loss,
                "best_val_mae": self.best_val_mae,
                "stopped_early": stopped_early,
            },
        )
        return TrainState(
            mode=self.mode,
            step=self.step,
            counter=self.counter,
            feature_discriminators=self.feature_discriminators,
            map_discriminator=self.map_discriminator,
            best_step=self.best_step,
            best_val_loss=self.best_val_loss,
            best_val_mae=self.best_val_mae,
            best_val_mse=self.best_val_mse,
            stopped_early=stopped_early,
            history=metrics.rows,
        )


def supervised_train(
    source: DatasetLike,
    config: ExperimentConfig,
    out_dir: Optional[Path] = None,
    resume_from: Optional[Path] = None,
    val: Optional[DatasetLike] = None,
) -> TrainState:
    """Train a counter on labeled source data with the counting loss only."""
    return CounterTrainer(config, "supervised", out_dir).fit(source, val=val, resume_from=resume_from)


def spr_supervised_train(
    labeled: DatasetLike,
    config: ExperimentConfig,
    out_dir: Optional[Path] = None,
    resume_from: Optional[Path] = None,
    val: Optional[DatasetLike] = None,
) -> TrainState:
    """Supervised training plus the gamma-weighted pyramid term on the same labeled images."""
    return CounterTrainer(config, "spr", out_dir).fit(labeled, val=val, resume_from=resume_from)


def adapt_train(
    source: DatasetLike,
    target: DatasetLike,
    config: ExperimentConfig,
    out_dir: Optional[Path] = None,
    resume_from: Optional[Path] = None,
    val: Optional[DatasetLike] = None,
) -> TrainState:
    """
    Adapt a counter from labeled source data to unlabeled target data.

    Args:
        source: Labeled source samples
        target: Target samples; their annotations, if any, are never read
        config: Experiment config (network, weights, schedule)
        out_dir: Where metrics.csv, best.pt and last.pt go
        resume_from: Checkpoint to continue from
        val: Explicit labeled validation set

    Returns:
        TrainState at the best validation step
    """
    return CounterTrainer(config, "adapt", out_dir).fit(source, target, val=val, resume_from=resume_from)
