"""Evaluation service: counts and map quality of a counter (optionally refined)."""

import csv
import json
from collections.abc import Sequence
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from density_adapt.data import CrowdDataset, Sample, density_from_points
from density_adapt.errors import DataError
from density_adapt.losses import semantic_reshape
from density_adapt.metrics import EvalReport, SampleRecord, psnr, ssim
from density_adapt.utils import setup_logger

logger = setup_logger("density_adapt.evaluation")


@torch.no_grad()
def predict_maps(
    counter: nn.Module,
    image: torch.Tensor,
    refiner: Optional[nn.Module] = None,
) -> tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    """
    Run the counter (and refiner) on one C x H x W image.

    Predictions are clamped at 0 here and nowhere in training.

    Returns:
        (native map h x w, coarse map H x W, refined map H x W or None)
    """
    height, width = image.shape[-2:]
    native = counter.predict(image[None]).clamp_min(0.0)
    coarse = semantic_reshape(native, counter.out_scale, 1.0, size=(height, width))
    refined = refiner(coarse).clamp_min(0.0) if refiner is not None else None
    return native[0, 0], coarse[0, 0], None if refined is None else refined[0, 0]


class EvaluationService:
    """Service scoring counters on labeled datasets."""

    def __init__(self, sigma: float = 4.0, device: Union[str, torch.device] = "cpu"):
        self.sigma = sigma
        self.device = torch.device(device)

    def evaluate(
        self,
        counter: nn.Module,
        dataset: Union[CrowdDataset, Sequence[Sample]],
        refiner: Optional[nn.Module] = None,
    ) -> EvalReport:
        """
        Evaluate a counter on a labeled dataset.

        Counts come from the clamped native map, or from the clamped refined
        map when a refiner is given. PSNR and SSIM compare full-resolution
        maps against GT rendered at image resolution.

        Args:
            counter: Trained counter
            dataset: Labeled samples
            refiner: Optional map refiner

        Returns:
            EvalReport with per-sample records in dataset order
        """
        samples = dataset.samples if isinstance(dataset, CrowdDataset) else list(dataset)
        if not samples:
            raise DataError("Cannot evaluate on an empty dataset")

        channels = counter.config.in_channels if hasattr(counter, "config") else samples[0].image.shape[2]
        tensors = (
            dataset.images
            if isinstance(dataset, CrowdDataset)
            else CrowdDataset(samples, channels=channels, labeled=False).images
        )

        was_training = counter.training
        counter.eval()
        if refiner is not None:
            refiner.eval()

        records = []
        try:
            for sample, image in zip(samples, tensors):
                native, coarse, refined = predict_maps(counter, image.to(self.device), refiner)
                full = refined if refined is not None else coarse
                pred_count = float(full.sum()) if refined is not None else float(native.sum())

                gt_map = density_from_points(sample.annotation, sample.size, sigma=self.sigma, out_scale=1.0).grid
                pred_map = full.cpu().numpy().astype(np.float64)
                gt_count = float(sample.annotation.count)
                records.append(
                    SampleRecord(
                        name=sample.name,
                        gt_count=gt_count,
                        pred_count=pred_count,
                        abs_error=abs(gt_count - pred_count),
                        psnr_db=psnr(pred_map, gt_map),
                        ssim=ssim(pred_map, gt_map),
                    )
                )
                logger.debug(
                    "Sample evaluated",
                    extra={"sample": sample.name, "gt_count": gt_count, "pred_count": pred_count},
                )
        finally:
            counter.train(was_training)

        report = EvalReport.from_records(records)
        logger.info(
            "Evaluation complete",
            extra={
                "mae": report.mae,
                "mse": report.mse,
                "psnr_db": report.psnr_db,
                "ssim": report.ssim,
                "n_samples": report.n_samples,
                "n_perfect_psnr": report.n_perfect_psnr,
                "refined": refiner is not None,
            },
        )
        return report


def evaluate(
    counter: nn.Module,
    dataset: Union[CrowdDataset, Sequence[Sample]],
    refiner: Optional[nn.Module] = None,
    sigma: float = 4.0,
) -> EvalReport:
    """Evaluate with a default :class:`EvaluationService`."""
    return EvaluationService(sigma=sigma).evaluate(counter, dataset, refiner)


def write_report(report: EvalReport, path: Path, per_sample_csv: Optional[Path] = None) -> None:
    """
    Write an EvalReport as JSON and optionally its samples as CSV.

    Non-finite PSNR values are written as the JSON constant ``Infinity``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.model_dump(), indent=2))

    if per_sample_csv is not None:
        fields = list(SampleRecord.model_fields)
        with open(per_sample_csv, "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=fields)
            writer.writeheader()
            for record in report.samples:
                writer.writerow(record.model_dump())
    logger.info("Report written", extra={"path": str(path), "per_sample_csv": str(per_sample_csv)})


def read_report(path: Path) -> EvalReport:
    """Read a report written by :func:`write_report`."""
    return EvalReport.model_validate(json.loads(Path(path).read_text()))
