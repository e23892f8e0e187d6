"""Point annotations and ground-truth density maps."""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from density_adapt.errors import AnnotationError

ALLOWED_SCALES = (1.0, 0.5, 0.25, 0.125)
TRUNCATE = 4.0  # kernel support radius, in sigmas


@dataclass
class PointAnnotation:
    """Head positions in image pixel space, one (x, y) row per person."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.float64))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def validate(self, image_size: tuple[int, int]) -> None:
        """Raise AnnotationError for the first point outside [0, W) x [0, H)."""
        height, width = image_size
        for index, (x, y) in enumerate(self.points):
            if not (0.0 <= x < width and 0.0 <= y < height):
                raise AnnotationError(
                    f"Point {index} at ({x:.2f}, {y:.2f}) lies outside the "
                    f"{width}x{height} image",
                    index=index,
                )


@dataclass
class DensityMap:
    """A non-negative density grid and its resolution relative to the image."""

    grid: np.ndarray
    scale: float = 1.0

    @property
    def count(self) -> float:
        return float(self.grid.sum(dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def map_size(image_size: tuple[int, int], scale: float) -> tuple[int, int]:
    """Grid size for an image at ``scale``; partial cells round up."""
    height, width = image_size
    return math.ceil(height * scale - 1e-9), math.ceil(width * scale - 1e-9)


def cell_centers(n_cells: int, scale: float) -> np.ndarray:
    """Image-space coordinates of cell centers along one axis."""
    cell = 1.0 / scale
    return np.arange(n_cells) * cell + (cell - 1.0) / 2.0


def density_from_points(
    points: PointAnnotation | Sequence,
    image_size: tuple[int, int],
    sigma: float = 4.0,
    out_scale: float = 0.125,
) -> DensityMap:
    """
    Render a ground-truth density map from head annotations.

    Every head contributes an isotropic Gaussian evaluated at the output
    cell centers, truncated at 4 sigma and renormalized to unit mass, so
    the map sums to the head count. A kernel with no support inside the
    grid falls back to a unit spike in the head's own cell.

    Args:
        points: Head positions
        image_size: (H, W) of the source image
        sigma: Kernel width in image pixels
        out_scale: Grid resolution relative to the image (1, 1/2, 1/4 or 1/8)

    Returns:
        DensityMap of size (ceil(H * out_scale), ceil(W * out_scale))
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not any(math.isclose(out_scale, s) for s in ALLOWED_SCALES):
        raise ValueError(f"out_scale must be one of {ALLOWED_SCALES}, got {out_scale}")

    annotation = points if isinstance(points, PointAnnotation) else PointAnnotation(points)
    annotation.validate(image_size)

    height, width = map_size(image_size, out_scale)
    grid = np.zeros((height, width), dtype=np.float64)
    cell = 1.0 / out_scale
    radius = TRUNCATE * sigma
    rows, cols = cell_centers(height, out_scale), cell_centers(width, out_scale)

    for x, y in annotation.points:
        c0 = max(0, math.floor((x - radius) / cell))
        c1 = min(width - 1, math.floor((x + radius) / cell) + 1)
        r0 = max(0, math.floor((y - radius) / cell))
        r1 = min(height - 1, math.floor((y + radius) / cell) + 1)

        d2 = (cols[None, c0 : c1 + 1] - x) ** 2 + (rows[r0 : r1 + 1, None] - y) ** 2
        kernel = np.exp(-d2 / (2.0 * sigma**2))
        kernel[d2 > radius**2] = 0.0
        total = kernel.sum()

        if total > 0:
            grid[r0 : r1 + 1, c0 : c1 + 1] += kernel / total
        else:
            grid[min(int(y // cell), height - 1), min(int(x // cell), width - 1)] += 1.0

    return DensityMap(grid=grid.astype(np.float32), scale=out_scale)
