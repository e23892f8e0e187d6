"""On-disk datasets, in-memory tensor datasets and deterministic splits.

On-disk layout::

    <root>/images/<name>.png
    <root>/ann/<name>.json   {"points": [[x, y], ...], "meta": {...}}
"""

import json
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, ValidationError
from sklearn.model_selection import train_test_split
from torch.utils.data import Dataset

from density_adapt.data.density import PointAnnotation, density_from_points
from density_adapt.data.scene import SceneMeta
from density_adapt.errors import (
    AnnotationError,
    DataError,
    DatasetLoadError,
    DatasetParseError,
)
from density_adapt.utils import setup_logger

logger = setup_logger("density_adapt.dataset")


@dataclass
class Sample:
    """One image with its head annotation and optional scene metadata."""

    name: str
    image: np.ndarray  # H x W x C, float32 in [0, 1]
    annotation: PointAnnotation
    meta: Optional[SceneMeta] = None

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass
class SamplePair:
    """One training iteration's data: labeled source batch and, when adapting, an unlabeled target batch."""

    source_images: torch.Tensor
    source_densities: torch.Tensor
    target_images: Optional[torch.Tensor] = None


class AnnotationFile(BaseModel):
    """Schema of ``ann/<name>.json``."""

    points: list[tuple[float, float]] = []
    meta: Optional[SceneMeta] = None


class DiskDataset(Dataset):
    """
    Index-addressable view of an on-disk dataset.

    Names are sorted lexicographically; workers that own disjoint index
    ranges can read concurrently.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetLoadError(f"Dataset root does not exist: {self.root}", path=self.root)
        image_dir = self.root / "images"
        self.names = sorted(p.stem for p in image_dir.glob("*.png")) if image_dir.is_dir() else []

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, index: int) -> Sample:
        name = self.names[index]
        ann_path = self.root / "ann" / f"{name}.json"
        if not ann_path.exists():
            raise DatasetLoadError(f"Missing annotation file {ann_path}", path=ann_path)

        text = ann_path.read_text()
        try:
            annotation = AnnotationFile.model_validate(json.loads(text))
        except json.JSONDecodeError as e:
            raise DatasetParseError(
                f"Malformed JSON in {ann_path} at line {e.lineno}: {e.msg}",
                path=ann_path,
                lineno=e.lineno,
            ) from e
        except ValidationError as e:
            raise DatasetParseError(f"Invalid annotation {ann_path}: {e}", path=ann_path) from e

        image = read_image(self.root / "images" / f"{name}.png")
        points = PointAnnotation(np.array(annotation.points, dtype=np.float64))
        try:
            points.validate(image.shape[:2])
        except AnnotationError as e:
            raise AnnotationError(f"{ann_path}: {e}", index=e.index) from e

        return Sample(name=name, image=image, annotation=points, meta=annotation.meta)


def read_image(path: Path) -> np.ndarray:
    """Decode a PNG into an H x W x C float32 array in [0, 1]."""
    with Image.open(path) as img:
        mode = "L" if img.mode in ("L", "I", "I;16", "1") else "RGB"
        array = np.asarray(img.convert(mode), dtype=np.float32) / 255.0
    return array[:, :, None] if array.ndim == 2 else array


def load_dataset(root: Path) -> Iterator[Sample]:
    """
    Iterate over an on-disk dataset in lexicographic order.

    Args:
        root: Dataset root containing images/ and ann/

    Yields:
        Samples with decoded images and validated annotations
    """
    dataset = DiskDataset(root)
    logger.info("Loading dataset", extra={"root": str(root), "n_samples": len(dataset)})
    for index in range(len(dataset)):
        yield dataset[index]


def save_dataset(samples: Sequence[Sample], root: Path) -> None:
    """
    Write samples in the on-disk layout read by :func:`load_dataset`.

    Args:
        samples: Samples to write
        root: Destination root (created if needed)
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "ann").mkdir(parents=True, exist_ok=True)

    for sample in samples:
        pixels = np.round(np.clip(sample.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        if pixels.shape[2] == 1:
            Image.fromarray(pixels[:, :, 0]).save(root / "images" / f"{sample.name}.png")
        else:
            Image.fromarray(pixels).save(root / "images" / f"{sample.name}.png")

        payload = {"points": sample.annotation.points.tolist()}
        if sample.meta is not None:
            payload["meta"] = sample.meta.to_json_dict()
        (root / "ann" / f"{sample.name}.json").write_text(json.dumps(payload, indent=2))

    logger.info("Dataset written", extra={"root": str(root), "n_samples": len(samples)})


def to_channels(image: np.ndarray, channels: int) -> np.ndarray:
    """Convert an H x W x C image to the requested channel count."""
    if image.shape[2] == channels:
        return image
    if channels == 1:
        return image.mean(axis=2, keepdims=True)
    return np.repeat(image[:, :, :1], channels, axis=2)


class CrowdDataset(Dataset):
    """
    Tensor view over samples for training and evaluation.

    Items are ``(image, density)`` for labeled datasets and ``image`` for
    unlabeled ones; images are C x H x W, densities 1 x h x w at
    ``out_scale``.
    """

    def __init__(
        self,
        samples: Sequence[Sample],
        channels: int,
        sigma: float = 4.0,
        out_scale: float = 0.125,
        labeled: bool = True,
    ):
        self.samples = list(samples)
        self.labeled = labeled
        self.sigma = sigma
        self.out_scale = out_scale
        self.images = [
            torch.from_numpy(np.ascontiguousarray(to_channels(s.image, channels).transpose(2, 0, 1)))
            for s in self.samples
        ]
        self.densities = (
            [
                torch.from_numpy(
                    density_from_points(s.annotation, s.size, sigma=sigma, out_scale=out_scale).grid
                )[None]
                for s in self.samples
            ]
            if labeled
            else []
        )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int):
        if self.labeled:
            return self.images[index], self.densities[index]
        return self.images[index]

    def subset(self, indices: Sequence[int]) -> "CrowdDataset":
        """A new dataset over the selected samples, sharing tensors."""
        subset = CrowdDataset.__new__(CrowdDataset)
        subset.samples = [self.samples[i] for i in indices]
        subset.labeled = self.labeled
        subset.sigma = self.sigma
        subset.out_scale = self.out_scale
        subset.images = [self.images[i] for i in indices]
        subset.densities = [self.densities[i] for i in indices] if self.labeled else []
        return subset

    def counts(self) -> list[float]:
        """Ground-truth head counts."""
        return [float(s.annotation.count) for s in self.samples]


def split_indices(n: int, fractions: Sequence[float], seed: int) -> list[list[int]]:
    """
    Deterministically partition ``range(n)`` by fractions.

    Part sizes are rounded, with the remainder going to the last part.

    Args:
        n: Number of items
        fractions: Two or three fractions summing to 1
        seed: Random state for the shuffle

    Returns:
        One sorted index list per fraction
    """
    if not 2 <= len(fractions) <= 3 or not np.isclose(sum(fractions), 1.0):
        raise ValueError(f"fractions must be 2 or 3 values summing to 1, got {fractions}")
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    if min(sizes) < 1 or sum(sizes) >= n:
        raise DataError(f"Cannot split {n} samples into parts of {list(fractions)}")

    random_state = seed % (2**32)
    remaining = list(range(n))
    parts = []
    for size in sizes:
        part, remaining = train_test_split(remaining, train_size=size, random_state=random_state)
        parts.append(sorted(part))
    parts.append(sorted(remaining))
    return parts
