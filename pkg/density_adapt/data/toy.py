"""Procedural two-domain crowd images for desk-scale experiments.

Both domains draw crowd layouts from the same distribution (head count,
head positions, blob width); they differ only in appearance, as set by a
GapConfig. Every image is generated from its own seed sequence keyed by
(domain, index), so any index range can be produced independently.
"""

import math
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from density_adapt.config import GapConfig, ToyConfig
from density_adapt.data.dataset import Sample
from density_adapt.data.density import PointAnnotation, density_from_points
from density_adapt.data.scene import LEVEL_COUNT_CEILINGS, SceneMeta
from density_adapt.errors import ConfigError
from density_adapt.utils import setup_logger

logger = setup_logger("density_adapt.toy")

MIN_SIZE = 32
SOURCE, TARGET = 0, 1
TEXTURE_SMOOTHING = 3.0


def _level_for(count: int) -> int:
    return next(level for level, ceiling in LEVEL_COUNT_CEILINGS.items() if count <= ceiling or level == 8)


def _texture(rng: np.random.Generator, size: tuple[int, int]) -> np.ndarray:
    """Smooth zero-mean unit-variance background texture."""
    field = gaussian_filter(rng.standard_normal(size), sigma=TEXTURE_SMOOTHING, mode="wrap")
    return field / (field.std() + 1e-8)


def toy_sample(seed: int, domain: int, index: int, toy: ToyConfig) -> Sample:
    """
    Generate one toy image with its annotation and scene metadata.

    Args:
        seed: Root seed of the dataset
        domain: SOURCE or TARGET
        index: Image index within the domain
        toy: Generator settings (the gap applies to TARGET only)

    Returns:
        Sample with an H x W x C float32 image in [0, 1]
    """
    height, width = toy.size
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(domain, index)))

    # layout: shared by both domains
    lo, hi = toy.count_range
    count = int(rng.integers(lo, hi + 1))
    margin = 2.0
    xs = rng.uniform(margin, width - margin, size=count)
    ys = rng.uniform(margin, height - margin, size=count)
    annotation = PointAnnotation(np.stack([xs, ys], axis=1))

    meta = SceneMeta(
        level=_level_for(count),
        time=int(rng.integers(0, 1440)),
        weather=int(rng.integers(0, 7)),
        count=count,
        ratio=float(rng.uniform(0.0, 1.0)),
    )

    # appearance
    blobs = density_from_points(annotation, (height, width), sigma=toy.blob_sigma, out_scale=1.0).grid
    blobs = blobs.astype(np.float64) * toy.blob_amplitude * 2.0 * math.pi * toy.blob_sigma**2
    texture = _texture(rng, (height, width))
    noise = rng.standard_normal((height, width))

    gap = toy.gap if domain == TARGET else GapConfig.zero()
    amplitude = toy.source_texture_amplitude + gap.texture_amplitude
    image = toy.background_level + amplitude * texture + blobs
    if gap.invert_contrast:
        image = 1.0 - image
    image = image + gap.brightness_offset + gap.noise_sigma * noise
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    image = np.repeat(image[:, :, None], toy.channels, axis=2)

    name = f"{'src' if domain == SOURCE else 'tgt'}_{index:05d}"
    return Sample(name=name, image=image, annotation=annotation, meta=meta)


def gen_toy_domains(
    seed: int,
    n_images: int,
    size: tuple[int, int],
    gap_config: GapConfig,
    toy: Optional[ToyConfig] = None,
    start: int = 0,
) -> tuple[list[Sample], list[Sample]]:
    """
    Generate paired source and target toy datasets.

    Args:
        seed: Root seed; identical seeds give identical datasets
        n_images: Images per domain
        size: (H, W), both at least 32
        gap_config: Appearance shift of the target domain
        toy: Remaining generator settings (defaults to ToyConfig())
        start: Index of the first image; disjoint ranges give disjoint images

    Returns:
        (source samples, target samples); target samples keep their
        annotations so they can serve as labeled evaluation data
    """
    if n_images < 1:
        raise ConfigError(f"n_images must be at least 1, got {n_images}")
    if min(size) < MIN_SIZE:
        raise ConfigError(f"Toy images need at least {MIN_SIZE} px per side, got {size}")

    toy = (toy or ToyConfig()).model_copy(update={"size": tuple(size), "gap": gap_config})
    source = [toy_sample(seed, SOURCE, i, toy) for i in range(start, start + n_images)]
    target = [toy_sample(seed, TARGET, i, toy) for i in range(start, start + n_images)]

    logger.info(
        "Toy domains generated",
        extra={
            "seed": seed,
            "n_images": n_images,
            "size": list(size),
            "invert_contrast": gap_config.invert_contrast,
            "noise_sigma": gap_config.noise_sigma,
        },
    )
    return source, target
