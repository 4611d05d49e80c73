from __future__ import annotations

from pathlib import Path

import pytest
import torch

from diffdf.errors import DataError
from diffdf.evalkit import curves_to_csv
from diffdf.plotting import plot_curves, plot_difference_maps, plot_losses
from diffdf.trainer import LOSS_COLUMNS


def _curves_csv(tmp_path: Path) -> Path:
    curves = {
        "original": {
            "success": [1.0] * 51,
            "precision": [1.0] * 51,
            "norm_precision": [1.0] * 51,
        },
        "attacked": {
            "success": [0.5] * 51,
            "precision": [0.25] * 51,
            "norm_precision": [0.25] * 51,
        },
    }
    path = tmp_path / "curves.csv"
    path.write_text(curves_to_csv(curves))
    return path


def _losses_csv(tmp_path: Path) -> Path:
    lines = [",".join(LOSS_COLUMNS)]
    for step in range(1, 7):
        epoch = (step - 1) // 3
        lines.append(f"{step},{epoch},0.0001,0.9,0.5,0.2,0.3,{0.9 + step / 10}")
    path = tmp_path / "losses.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


class TestPlotCurves:
    def test_one_figure_per_curve(self, tmp_path: Path) -> None:
        """Each curve kind gets its own PNG."""
        written = plot_curves(_curves_csv(tmp_path), tmp_path / "fig")
        assert sorted(p.name for p in written) == [
            "norm_precision.png",
            "precision.png",
            "success.png",
        ]
        assert all(p.stat().st_size > 0 for p in written)

    def test_missing_csv(self, tmp_path: Path) -> None:
        """A missing curves file is a data error."""
        with pytest.raises(DataError, match=r"no such file"):
            plot_curves(tmp_path / "curves.csv", tmp_path)

    def test_empty_csv(self, tmp_path: Path) -> None:
        """A header-only file has nothing to draw."""
        path = tmp_path / "curves.csv"
        path.write_text("condition,curve,threshold,value\n")
        with pytest.raises(DataError, match=r"no curve rows"):
            plot_curves(path, tmp_path)


class TestPlotLosses:
    def test_writes_png(self, tmp_path: Path) -> None:
        """A losses.csv from training renders to one PNG."""
        out = plot_losses(_losses_csv(tmp_path), tmp_path / "losses.png")
        assert out.is_file()
        assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_missing_csv(self, tmp_path: Path) -> None:
        """A missing losses file is a data error."""
        with pytest.raises(DataError):
            plot_losses(tmp_path / "losses.csv", tmp_path / "losses.png")


class TestDifferenceMaps:
    def test_writes_png(self, tmp_path: Path) -> None:
        """Clean, adversarial and defended panels render together."""
        gen = torch.Generator().manual_seed(0)
        clean = torch.rand(3, 16, 16, generator=gen) * 2 - 1
        adversarial = (clean + 0.05).clamp(-1, 1)
        out = plot_difference_maps(
            clean,
            adversarial,
            [("purified", clean.clone())],
            tmp_path / "maps" / "difference_maps.png",
        )
        assert out.is_file()
