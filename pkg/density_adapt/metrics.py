"""Counting and density-map quality metrics."""

import math
from collections.abc import Sequence
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

MAX_FLOOR = 1e-6
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11 x 11 window at sigma 1.5


def _paired(gt_counts: Sequence[float], pred_counts: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt_counts, dtype=np.float64)
    pred = np.asarray(pred_counts, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"Count lists differ in length: {gt.size} vs {pred.size}")
    if gt.size == 0:
        raise ValueError("Count lists are empty")
    return gt, pred


def mae(gt_counts: Sequence[float], pred_counts: Sequence[float]) -> float:
    """Mean absolute counting error."""
    gt, pred = _paired(gt_counts, pred_counts)
    return float(np.mean(np.abs(gt - pred)))


def mse(gt_counts: Sequence[float], pred_counts: Sequence[float]) -> float:
    """Root of the mean squared counting error (reported as "MSE" in counting work)."""
    gt, pred = _paired(gt_counts, pred_counts)
    return float(np.sqrt(np.mean((gt - pred) ** 2)))


def _normalized(pred: np.ndarray, gt: np.ndarray, max_value: Optional[float]) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"Maps differ in shape: {pred.shape} vs {gt.shape}")
    scale = max_value if max_value is not None else max(float(gt.max(initial=0.0)), MAX_FLOOR)
    return pred / scale, gt / scale


def psnr(pred: np.ndarray, gt: np.ndarray, max_value: Optional[float] = None) -> float:
    """
    Peak signal-to-noise ratio in dB.

    Both maps are divided by ``max_value`` (default: the GT maximum, floored
    at 1e-6) and compared on a unit dynamic range.

    Returns:
        PSNR, or +inf for identical maps
    """
    pred_n, gt_n = _normalized(pred, gt, max_value)
    with np.errstate(divide="ignore"):
        return float(peak_signal_noise_ratio(gt_n, pred_n, data_range=1.0))


def ssim(pred: np.ndarray, gt: np.ndarray, max_value: Optional[float] = None) -> float:
    """
    Structural similarity with an 11 x 11 Gaussian window (sigma 1.5).

    Maps are normalized as in :func:`psnr`, so the stabilizers are
    C1 = (0.01 * MAX)^2 and C2 = (0.03 * MAX)^2 in the original units.
    """
    pred_n, gt_n = _normalized(pred, gt, max_value)
    return float(
        structural_similarity(
            gt_n,
            pred_n,
            data_range=1.0,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            truncate=SSIM_TRUNCATE,
            use_sample_covariance=False,
        )
    )


def mean_psnr(values: Sequence[float]) -> tuple[float, int]:
    """
    Mean PSNR over the finite values, plus the number of perfect (+inf) ones.

    A perfect prediction has no finite PSNR, so it is counted instead of
    averaged. When every value is perfect the mean is +inf.
    """
    values = np.asarray(values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    n_perfect = int(np.sum(np.isposinf(values)))
    if finite.size == 0:
        return (math.inf if n_perfect else math.nan), n_perfect
    return float(finite.mean()), n_perfect


class SampleRecord(BaseModel):
    """Per-image evaluation result."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    name: str
    gt_count: float
    pred_count: float
    abs_error: float
    psnr_db: float
    ssim: float


class EvalReport(BaseModel):
    """Aggregate evaluation result."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    mae: float = Field(ge=0.0)
    mse: float = Field(ge=0.0)
    psnr_db: float
    ssim: float = Field(ge=-1.0, le=1.0 + 1e-9)
    n_samples: int = Field(ge=1)
    n_perfect_psnr: int = Field(default=0, ge=0)
    samples: list[SampleRecord] = []

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord]) -> "EvalReport":
        """Aggregate per-sample records; the aggregate ignores record order."""
        if not records:
            raise ValueError("Cannot build a report from zero samples")
        gt = [r.gt_count for r in records]
        pred = [r.pred_count for r in records]
        psnr_db, n_perfect = mean_psnr([r.psnr_db for r in records])
        return cls(
            mae=mae(gt, pred),
            mse=mse(gt, pred),
            # mean over finite samples; identical maps are counted in n_perfect_psnr
            psnr_db=psnr_db,
            ssim=float(np.mean([r.ssim for r in records])),
            n_samples=len(records),
            n_perfect_psnr=n_perfect,
            samples=list(records),
        )
