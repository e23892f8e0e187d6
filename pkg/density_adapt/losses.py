"""Training objectives: counting, adversarial, pyramid-consistency and their combination.

Score maps and score vectors put the source logit in channel 0 and the
target logit in channel 1. Log-probabilities come from a joint
log-softmax floored at log(1e-12).
"""

import math
from dataclasses import dataclass
from typing import Literal, Optional, Union

import torch
import torch.nn.functional as F
from pydantic import BaseModel, model_validator

from density_adapt.config import LossWeights
from density_adapt.errors import ShapeError

Reduction = Literal["mean", "sum"]

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)
SOURCE, TARGET = 0, 1
M_BAND = (0.8, 1.0)
N_BAND = (1.0, 1.2)


class PyramidScales(BaseModel):
    """Down- and up-scaling factors of one pyramid-consistency step."""

    m: float
    n: float

    @model_validator(mode="after")
    def _check_order(self):
        if not M_BAND[0] < self.m < M_BAND[1] <= N_BAND[0] < self.n < N_BAND[1]:
            raise ValueError(f"need 0.8 < m < 1.0 < n < 1.2, got m={self.m}, n={self.n}")
        return self


def sample_pyramid_scales(generator: torch.Generator) -> PyramidScales:
    """Draw m ~ U(0.8, 1.0) and n ~ U(1.0, 1.2)."""
    u = torch.rand(2, generator=generator, dtype=torch.float64).clamp(1e-6, 1.0 - 1e-6)
    return PyramidScales(
        m=M_BAND[0] + (M_BAND[1] - M_BAND[0]) * float(u[0]),
        n=N_BAND[0] + (N_BAND[1] - N_BAND[0]) * float(u[1]),
    )


@dataclass
class LossComponents:
    """Per-step values of the terms of the combined objective."""

    count: Union[torch.Tensor, float]
    feature_adv: Union[torch.Tensor, float] = 0.0
    map_adv: Union[torch.Tensor, float] = 0.0
    spr: Union[torch.Tensor, float] = 0.0


def _log_probs(logits: torch.Tensor) -> torch.Tensor:
    return F.log_softmax(logits, dim=1).clamp_min(LOG_FLOOR)


def _reduce_pixels(nll: torch.Tensor, reduction: Reduction) -> torch.Tensor:
    """Reduce an N x h x w negative log-likelihood: pixels by ``reduction``, batch by mean."""
    if reduction == "sum":
        return nll.flatten(1).sum(dim=1).mean()
    return nll.mean()


def loss_count(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and ground-truth density maps."""
    if pred.shape != gt.shape:
        raise ShapeError(f"Prediction {tuple(pred.shape)} and GT {tuple(gt.shape)} differ in shape")
    return F.mse_loss(pred, gt)


def loss_feature_disc(
    score_src: torch.Tensor, score_tgt: torch.Tensor, reduction: Reduction = "mean"
) -> torch.Tensor:
    """
    Pixel-wise cross-entropy of a feature discriminator.

    Source pixels should score high on the source channel, target pixels on
    the target channel (log(1 - p_source) == log p_target for two classes).

    Args:
        score_src: N x 2 x h x w logits for source features
        score_tgt: N x 2 x h x w logits for target features
        reduction: "sum" or "mean" over pixels; batch is always averaged

    Returns:
        Scalar loss
    """
    return _reduce_pixels(-_log_probs(score_src)[:, SOURCE], reduction) + _reduce_pixels(
        -_log_probs(score_tgt)[:, TARGET], reduction
    )


def loss_feature_adv(*scores_tgt: torch.Tensor, reduction: Reduction = "mean") -> torch.Tensor:
    """
    Inverted-label loss pushing target features to look like source features.

    One term per feature tap, summed.

    Args:
        scores_tgt: Target-domain score maps, one per discriminator
        reduction: "sum" or "mean" over pixels; batch is always averaged

    Returns:
        Scalar loss
    """
    if not scores_tgt:
        raise ValueError("loss_feature_adv needs at least one score map")
    return sum(_reduce_pixels(-_log_probs(s)[:, SOURCE], reduction) for s in scores_tgt)


def loss_map_disc(v_src: torch.Tensor, v_tgt: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the map discriminator on N x 2 score vectors, averaged over the batch."""
    return (-_log_probs(v_src)[:, SOURCE]).mean() + (-_log_probs(v_tgt)[:, TARGET]).mean()


def loss_map_adv(v_tgt: torch.Tensor) -> torch.Tensor:
    """Inverted-label loss pushing target density maps to look like source maps."""
    return (-_log_probs(v_tgt)[:, SOURCE]).mean()


def semantic_reshape(
    density: torch.Tensor,
    from_scale: float,
    to_scale: float,
    size: Optional[tuple[int, int]] = None,
) -> torch.Tensor:
    """
    Resize a density map between scales while keeping its total mass.

    The map is bilinearly resized (corners not aligned) and multiplied by
    the quadratic area factor, (from_scale / to_scale)^2 at exact sizes and
    the realized cell-count ratio when sizes round.

    Args:
        density: h x w, 1 x h x w or N x 1 x h x w map
        from_scale: Scale p the map was produced at
        to_scale: Scale q to bring it to
        size: Explicit output size, overriding round(h * q / p)

    Returns:
        The reshaped map with the same number of dimensions
    """
    if from_scale <= 0 or to_scale <= 0:
        raise ValueError(f"scales must be positive, got {from_scale} -> {to_scale}")

    ndim = density.dim()
    x = density.reshape(-1, 1, *density.shape[-2:])
    height, width = x.shape[-2:]
    if size is None:
        size = (round(height * to_scale / from_scale), round(width * to_scale / from_scale))
    if min(size) < 1:
        raise ShapeError(f"Reshaping {height}x{width} from {from_scale} to {to_scale} gives an empty map")

    if tuple(size) != (height, width):
        x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
    x = x * (height * width) / (size[0] * size[1])

    if ndim == 2:
        return x[0, 0]
    if ndim == 3:
        return x[:, 0]
    return x


def _in_band_side(length: int, scale: float, multiple: int, band: tuple[float, float]) -> int:
    """Side length in the open band (lo, hi) x length nearest length * scale, preferring multiples."""
    lo, hi = band
    target = length * scale
    limit = math.ceil(hi * length)
    aligned = [s for s in range(multiple, limit + 1, multiple) if lo < s / length < hi]
    sides = aligned or [s for s in range(1, limit + 1) if lo < s / length < hi]
    if not sides:
        raise ShapeError(f"No side length of a {length}-pixel image gives a scale in ({lo}, {hi})")
    return min(sides, key=lambda s: (abs(s - target), s))


def rescale_images(
    images: torch.Tensor,
    scale: float,
    multiple: int,
    band: Optional[tuple[float, float]] = None,
) -> tuple[torch.Tensor, float]:
    """
    Resize images by ``scale``, rounding each side to a multiple of ``multiple``.

    With ``band`` the height is chosen so the realized scale stays strictly
    inside it: the nearest in-band multiple when one exists, otherwise the
    nearest in-band exact size. The width follows the realized scale.

    Returns:
        (resized images, realized scale measured on the height)
    """
    height, width = images.shape[-2:]
    if band is None:
        new_h = max(multiple, round(height * scale / multiple) * multiple)
        new_w = max(multiple, round(width * scale / multiple) * multiple)
    else:
        new_h = _in_band_side(height, scale, multiple, band)
        realized = new_h / height
        step = multiple if new_h % multiple == 0 else 1
        new_w = max(step, round(width * realized / step) * step)
    resized = F.interpolate(images, size=(new_h, new_w), mode="bilinear", align_corners=False)
    return resized, new_h / height


def loss_spr(
    a_1x: torch.Tensor,
    a_mx: torch.Tensor,
    a_nx: torch.Tensor,
    scales: Union[PyramidScales, tuple[float, float]],
) -> torch.Tensor:
    """
    Pyramid-consistency loss between predictions on rescaled copies of one image.

    Each rescaled prediction is semantically reshaped to the 1.0x grid
    (which applies the y^2 area factor) and compared by MSE.

    Args:
        a_1x: Prediction on the original image, N x 1 x h x w
        a_mx: Prediction on the m-scaled copy
        a_nx: Prediction on the n-scaled copy
        scales: The scales (m, n) the copies were produced at

    Returns:
        Scalar loss
    """
    m, n = (scales.m, scales.n) if isinstance(scales, PyramidScales) else scales
    size = tuple(a_1x.shape[-2:])
    total = a_1x.new_zeros(())
    for a_yx, y in ((a_mx, m), (a_nx, n)):
        reshaped = semantic_reshape(a_yx, y, 1.0, size=size)
        if reshaped.shape != a_1x.shape:
            raise ShapeError(f"Reshaped map {tuple(reshaped.shape)} does not match {tuple(a_1x.shape)}")
        total = total + F.mse_loss(a_1x, reshaped)
    return total


def loss_total(components: LossComponents, weights: LossWeights) -> torch.Tensor:
    """Counting loss plus the weighted feature-adversarial, map-adversarial and pyramid terms."""
    return (
        components.count
        + weights.lambda_ * components.feature_adv
        + weights.beta * components.map_adv
        + weights.gamma * components.spr
    )
