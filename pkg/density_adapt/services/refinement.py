"""Map refinement pipeline.

A counter trained on the source training set predicts coarse maps for a
held-out source set. That set is split 70/10/20, a residual refiner learns
coarse -> GT on the first part with early stopping on the second, the
third measures the gain, and the refiner is finally applied to target
coarse maps. The refiner never sees target data while training.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from density_adapt.config import ExperimentConfig
from density_adapt.data import CrowdDataset, Sample, density_from_points, split_indices
from density_adapt.errors import DataError, NumericalError
from density_adapt.metrics import mean_psnr, psnr
from density_adapt.networks import MapRefiner, save_checkpoint
from density_adapt.services.evaluation import predict_maps
from density_adapt.services.training import BatchSampler, supervised_train
from density_adapt.utils import fork_seed, resolve_device, setup_logger, torch_generator

logger = setup_logger("density_adapt.refinement")

MIN_SOURCE_TEST = 10
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

MapPair = tuple[torch.Tensor, torch.Tensor]  # (coarse, gt), each 1 x H x W


@dataclass
class RefinementResult:
    """Trained refiner, refined target maps and the held-out comparison."""

    refiner: MapRefiner
    refined_maps: list[torch.Tensor]
    split: dict[str, list[int]]
    best_step: int
    best_val_loss: float
    test_psnr_coarse: float
    test_psnr_refined: float
    history: list[dict] = field(default_factory=list)


def coarse_maps(counter: nn.Module, samples: Sequence[Sample], device: torch.device = torch.device("cpu")) -> list[torch.Tensor]:
    """Clamped counter predictions brought to image resolution, one H x W map per sample."""
    channels = counter.config.in_channels
    images = CrowdDataset(samples, channels=channels, labeled=False).images
    counter.eval()
    return [predict_maps(counter, image.to(device))[1].cpu() for image in images]


class RefinerTrainer:
    """Trains a :class:`MapRefiner` on (coarse, GT) map pairs with MSE."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.train_config = config.train
        self.device = resolve_device(config.train.device)

        torch.manual_seed(fork_seed(config.train.seed, "refiner_init"))
        self.refiner = MapRefiner(config.network.refiner).to(self.device)
        self.optimizer = torch.optim.Adam(
            self.refiner.parameters(),
            lr=config.train.lr_r,
            betas=config.train.betas,
            eps=config.train.eps,
        )

    @torch.no_grad()
    def validate(self, pairs: Sequence[MapPair]) -> float:
        self.refiner.eval()
        losses = [
            float(F.mse_loss(self.refiner(coarse[None].to(self.device)), gt[None].to(self.device)))
            for coarse, gt in pairs
        ]
        self.refiner.train()
        return float(np.mean(losses))

    def fit(self, train_pairs: Sequence[MapPair], val_pairs: Sequence[MapPair]) -> tuple[int, float, list[dict]]:
        """
        Train with early stopping on validation MSE.

        Step 0 (the untrained refiner) is evaluated too, so a refiner that
        cannot beat its starting point is returned unchanged.

        Returns:
            (best step, best validation MSE, history rows)
        """
        cfg = self.train_config
        sampler = BatchSampler(
            len(train_pairs), cfg.refiner_batch_size, torch_generator(cfg.seed, "refiner_sampler")
        )

        best_loss = self.validate(val_pairs)
        best_step = 0
        best_state = {k: v.detach().clone() for k, v in self.refiner.state_dict().items()}
        bad_evals = 0
        history = [{"step": 0, "loss": math.nan, "val_loss": best_loss}]

        self.refiner.train()
        for step in range(1, cfg.refiner_max_steps + 1):
            indices = sampler.next_indices()
            coarse = torch.stack([train_pairs[i][0] for i in indices]).to(self.device)
            gt = torch.stack([train_pairs[i][1] for i in indices]).to(self.device)

            loss = F.mse_loss(self.refiner(coarse), gt)
            if not torch.isfinite(loss):
                logger.error("Non-finite refiner loss", extra={"step": step})
                raise NumericalError(f"Non-finite refiner loss at step {step}", step=step)
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer.step()

            row = {"step": step, "loss": float(loss), "val_loss": math.nan}
            if step % cfg.refiner_eval_every == 0 or step == cfg.refiner_max_steps:
                row["val_loss"] = self.validate(val_pairs)
                if row["val_loss"] < best_loss:
                    best_loss, best_step, bad_evals = row["val_loss"], step, 0
                    best_state = {k: v.detach().clone() for k, v in self.refiner.state_dict().items()}
                else:
                    bad_evals += 1
                logger.info("Refiner validation", extra={"step": step, "val_loss": row["val_loss"], "best_step": best_step})
            history.append(row)
            if bad_evals >= cfg.refiner_patience:
                logger.info("Refiner early stopping", extra={"step": step, "best_step": best_step})
                break

        self.refiner.load_state_dict(best_state)
        self.refiner.eval()
        return best_step, best_loss, history

    @torch.no_grad()
    def refine(self, maps: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        """Apply the refiner to H x W maps."""
        self.refiner.eval()
        return [self.refiner(m.reshape(1, 1, *m.shape[-2:]).to(self.device))[0, 0].cpu() for m in maps]


def _mean_psnr(maps: Sequence[torch.Tensor], gts: Sequence[torch.Tensor]) -> float:
    values = [psnr(m.clamp_min(0.0).numpy().astype(np.float64), g.numpy().astype(np.float64)) for m, g in zip(maps, gts)]
    return mean_psnr(values)[0]


def refiner_pipeline(
    source_train: Sequence[Sample],
    source_test: Sequence[Sample],
    counter: Optional[nn.Module],
    target_coarse_maps: Sequence[torch.Tensor],
    config: ExperimentConfig,
    out_dir: Optional[Path] = None,
) -> RefinementResult:
    """
    Train a refiner on source predictions and apply it to target maps.

    Args:
        source_train: Labeled samples the counter was trained on; used to
            train one when ``counter`` is None
        source_test: Labeled held-out source samples (at least 10)
        counter: Counter trained on ``source_train``, or None
        target_coarse_maps: Target coarse maps at image resolution (H x W)
        config: Experiment config
        out_dir: Where ``refiner.pt`` goes

    Returns:
        RefinementResult with the refined target maps in input order
    """
    source_test = list(source_test)
    if len(source_test) < MIN_SOURCE_TEST:
        raise DataError(
            f"Refinement needs at least {MIN_SOURCE_TEST} held-out source samples, got {len(source_test)}"
        )
    if counter is None:
        logger.info("No counter given; training one on the source training set")
        counter = supervised_train(source_train, config).counter

    device = resolve_device(config.train.device)
    coarse = [m[None] for m in coarse_maps(counter, source_test, device)]
    gts = [
        torch.from_numpy(density_from_points(s.annotation, s.size, sigma=config.data.sigma, out_scale=1.0).grid)[None]
        for s in source_test
    ]

    train_idx, val_idx, test_idx = split_indices(
        len(source_test), SPLIT_FRACTIONS, fork_seed(config.train.seed, "refiner_split")
    )
    pairs = list(zip(coarse, gts))
    trainer = RefinerTrainer(config)
    best_step, best_val_loss, history = trainer.fit(
        [pairs[i] for i in train_idx], [pairs[i] for i in val_idx]
    )

    test_coarse = [coarse[i][0] for i in test_idx]
    test_gts = [gts[i][0] for i in test_idx]
    psnr_coarse = _mean_psnr(test_coarse, test_gts)
    psnr_refined = _mean_psnr(trainer.refine(test_coarse), test_gts)

    refined = trainer.refine(target_coarse_maps)
    split = {"train": train_idx, "val": val_idx, "test": test_idx}
    if out_dir is not None:
        save_checkpoint(
            Path(out_dir) / "refiner.pt",
            {"R": trainer.refiner},
            config.network,
            best_step,
            extra={"split": split, "best_val_loss": best_val_loss},
        )

    logger.info(
        "Refinement complete",
        extra={
            "n_source_test": len(source_test),
            "n_target": len(refined),
            "best_step": best_step,
            "test_psnr_coarse": psnr_coarse,
            "test_psnr_refined": psnr_refined,
        },
    )
    return RefinementResult(
        refiner=trainer.refiner,
        refined_maps=refined,
        split=split,
        best_step=best_step,
        best_val_loss=best_val_loss,
        test_psnr_coarse=psnr_coarse,
        test_psnr_refined=psnr_refined,
        history=history,
    )
