"""Static PNG plots for experiment directories."""

from collections.abc import Sequence
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_COLUMNS = ("loss_total", "loss_count", "loss_feature_adv", "loss_map_adv", "loss_spr", "loss_d_feature", "loss_d_map")
MAX_GRID_SAMPLES = 4


def _numeric(rows: Sequence[dict], column: str) -> tuple[list[float], list[float]]:
    steps, values = [], []
    for row in rows:
        value = row.get(column, "")
        if value == "" or value is None:
            continue
        steps.append(float(row["step"]))
        values.append(float(value))
    return steps, values


def plot_loss_curves(rows: Sequence[dict], path: Path) -> Path:
    """
    Loss components per step (left) and validation count errors (right).

    Args:
        rows: Metrics rows as written to metrics.csv
        path: Output PNG

    Returns:
        The written path
    """
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(11, 4))
    for column in LOSS_COLUMNS:
        steps, values = _numeric(rows, column)
        if values and any(v != 0.0 for v in values):
            ax_loss.plot(steps, values, label=column, linewidth=1)
    ax_loss.set_xlabel("step")
    ax_loss.set_title("training losses")
    if ax_loss.lines:
        ax_loss.legend(fontsize=7)

    for column, label in (("val_mae", "val MAE"), ("val_mse", "val MSE")):
        steps, values = _numeric(rows, column)
        if values:
            ax_val.plot(steps, values, marker="o", label=label)
    ax_val.set_xlabel("step")
    ax_val.set_title("validation")
    if ax_val.lines:
        ax_val.legend(fontsize=7)

    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_density_grid(
    images: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    coarse: Sequence[np.ndarray],
    path: Path,
    refined: Optional[Sequence[np.ndarray]] = None,
    names: Optional[Sequence[str]] = None,
) -> Path:
    """
    One column per sample; rows are image, GT, coarse and (optionally) refined maps.

    Each map panel is titled with its sum.
    """
    n = min(len(images), MAX_GRID_SAMPLES)
    kinds = [("image", images), ("GT", gts), ("coarse", coarse)]
    if refined is not None:
        kinds.append(("refined", refined))

    fig, axes = plt.subplots(len(kinds), n, figsize=(2.6 * n, 2.6 * len(kinds)), squeeze=False)
    for col in range(n):
        for row, (kind, arrays) in enumerate(kinds):
            ax = axes[row][col]
            array = np.asarray(arrays[col])
            if kind == "image":
                ax.imshow(array.squeeze(), cmap="gray", vmin=0.0, vmax=1.0)
                ax.set_title(names[col] if names else f"sample {col}", fontsize=8)
            else:
                ax.imshow(array, cmap="jet")
                ax.set_title(f"{kind}: {array.sum():.1f}", fontsize=8)
            ax.axis("off")

    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
