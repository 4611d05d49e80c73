"""Figures: success/precision curves, training losses and difference maps."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from diffdf.data import depreprocess  # noqa: E402
from diffdf.errors import DataError  # noqa: E402
from diffdf.reporting import report  # noqa: E402

logger = logging.getLogger(__name__)

_CURVE_AXES = {
    "success": ("Overlap threshold", "Success rate"),
    "precision": ("Location error threshold (px)", "Precision"),
    "norm_precision": ("Normalized location error threshold", "Normalized precision"),
}


def _read_csv(path: Path) -> list[dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _save(fig: plt.Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    report.attach_file(path, path.name)
    logger.info("Wrote %s", path)
    return path


def plot_curves(curves_csv: Path, out_dir: Path) -> list[Path]:
    """One PNG per curve kind, one line per condition; AUC in the legend."""
    rows = _read_csv(curves_csv)
    if not rows:
        raise DataError(f"{curves_csv} has no curve rows")
    series: dict[str, dict[str, tuple[list[float], list[float]]]] = defaultdict(dict)
    for row in rows:
        xs, ys = series[row["curve"]].setdefault(row["condition"], ([], []))
        xs.append(float(row["threshold"]))
        ys.append(float(row["value"]))

    written = []
    for curve, by_condition in series.items():
        xlabel, ylabel = _CURVE_AXES.get(curve, ("threshold", curve))
        fig, ax = plt.subplots(figsize=(5, 4))
        for condition, (xs, ys) in by_condition.items():
            ax.plot(xs, ys, label=f"{condition} [{np.mean(ys):.3f}]")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_ylim(0.0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(loc="best", fontsize="small")
        written.append(_save(fig, Path(out_dir) / f"{curve}.png"))
    return written


def plot_losses(losses_csv: Path, out_path: Path) -> Path:
    """Per-epoch mean of each loss term; SSIM is drawn as ``1 - L_ssim``."""
    rows = _read_csv(losses_csv)
    if not rows:
        raise DataError(f"{losses_csv} has no loss rows")
    by_epoch: dict[int, list[dict[str, str]]] = defaultdict(list)
    for row in rows:
        by_epoch[int(row["epoch"])].append(row)
    epochs = sorted(by_epoch)

    def mean(column: str) -> list[float]:
        return [float(np.mean([float(r[column]) for r in by_epoch[e]])) for e in epochs]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, mean("total"), label="total")
    ax.plot(epochs, mean("pixel"), label="pixel")
    ax.plot(epochs, mean("semantic"), label="semantic")
    ax.plot(epochs, [1.0 - v for v in mean("ssim")], label="1 - ssim")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(loc="best", fontsize="small")
    return _save(fig, Path(out_path))


def plot_difference_maps(
    clean: torch.Tensor,
    adversarial: torch.Tensor,
    defended: Sequence[tuple[str, torch.Tensor]],
    out_path: Path,
    magnify: float = 10.0,
) -> Path:
    """Images on the top row, ``magnify * |x - clean|`` maps below them."""
    panels = [("clean", clean), ("adversarial", adversarial), *defended]
    fig, axes = plt.subplots(2, len(panels), figsize=(2.2 * len(panels), 4.4))
    clean_np = depreprocess(clean).astype(np.float32)
    for col, (title, image) in enumerate(panels):
        pixels = depreprocess(image)
        diff = np.abs(pixels.astype(np.float32) - clean_np) * magnify
        axes[0, col].imshow(pixels)
        axes[0, col].set_title(title, fontsize="small")
        axes[1, col].imshow(np.clip(diff, 0, 255).astype(np.uint8))
        axes[1, col].set_title(f"|diff| x{magnify:g}", fontsize="small")
        for ax in axes[:, col]:
            ax.axis("off")
    return _save(fig, Path(out_path))
