"""Tracking metrics, a correlation tracker and the attack x defense evaluation matrix.

Conventions:

* success counts frames whose overlap is strictly greater than the
  threshold, over 51 thresholds ``0, 0.02, ..., 1``; the AUC is the mean.
* precision counts frames whose centre error is strictly below the
  threshold in pixels (20 by default).
* normalized precision divides the centre error by the ground-truth box
  diagonal and thresholds it at 0.2.
* ``eao_lite`` averages, over run lengths ``L``, the mean overlap of the
  first ``L`` frames of every tracking segment; segments that ended in a
  failure are padded with zeros, unfinished segments shorter than ``L``
  are left out. It is a simplified stand-in, not the benchmark EAO.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from diffdf.attacks import AttackConfig, AttackTarget, tracker_attack
from diffdf.boxes import Box
from diffdf.data import SequenceAnnotation, to_frame_tensor
from diffdf.errors import ConfigError
from diffdf.losses import SsimConfig, ssim
from diffdf.ncc import ncc_response, response_peak
from diffdf.purifier import Defense, filter_defense
from diffdf.reporting import report
from diffdf.utils import atomic_write_text
from diffdf.validation import (
    read_float,
    read_int,
    reject_unknown,
)

logger = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 51)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 51)
AGGREGATE = "ALL"


class Condition(str, Enum):
    ORIGINAL = "original"
    ATTACKED = "attacked"
    DEFENDED = "defended"
    GAUSSIAN = "gaussian"
    MEDIAN = "median"

    @property
    def attacked(self) -> bool:
        return self is not Condition.ORIGINAL


def parse_conditions(value: str | Sequence[str]) -> tuple[Condition, ...]:
    items = value.split(",") if isinstance(value, str) else list(value)
    conditions = []
    for item in items:
        try:
            conditions.append(Condition(str(item).strip()))
        except ValueError:
            choices = ", ".join(c.value for c in Condition)
            raise ConfigError(
                f"unknown condition {item!r}; expected one of: {choices}"
            ) from None
    if not conditions:
        raise ConfigError("at least one evaluation condition is required")
    return tuple(dict.fromkeys(conditions))


@dataclass(frozen=True)
class EvalConfig:
    conditions: tuple[Condition, ...] = (
        Condition.ORIGINAL,
        Condition.ATTACKED,
        Condition.DEFENDED,
    )
    reinit_gap: int = 5
    search_factor: float = 2.0
    precision_threshold: float = 20.0
    norm_precision_threshold: float = 0.2
    gaussian_sigma: float = 1.0
    median_size: int = 3
    workers: int = 4

    @classmethod
    def from_dict(cls, data: dict) -> EvalConfig:
        prefix = "eval"
        reject_unknown(
            data,
            (
                "conditions",
                "reinit_gap",
                "search_factor",
                "precision_threshold",
                "norm_precision_threshold",
                "gaussian_sigma",
                "median_size",
                "workers",
            ),
            prefix,
        )
        conditions = data.get("conditions", [c.value for c in cls.conditions])
        median_size = read_int(data, "median_size", prefix, 3, minimum=1)
        if median_size % 2 == 0:
            raise ConfigError("eval.median_size must be odd")
        return cls(
            conditions=parse_conditions(conditions),
            reinit_gap=read_int(data, "reinit_gap", prefix, 5, minimum=1),
            search_factor=read_float(data, "search_factor", prefix, 2.0, minimum=1.0),
            precision_threshold=read_float(
                data, "precision_threshold", prefix, 20.0, positive=True
            ),
            norm_precision_threshold=read_float(
                data, "norm_precision_threshold", prefix, 0.2, positive=True
            ),
            gaussian_sigma=read_float(
                data, "gaussian_sigma", prefix, 1.0, positive=True
            ),
            median_size=median_size,
            workers=read_int(data, "workers", prefix, 4, minimum=1),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "conditions": [c.value for c in self.conditions],
            "reinit_gap": self.reinit_gap,
            "search_factor": self.search_factor,
            "precision_threshold": self.precision_threshold,
            "norm_precision_threshold": self.norm_precision_threshold,
            "gaussian_sigma": self.gaussian_sigma,
            "median_size": self.median_size,
            "workers": self.workers,
        }


# ---------------------------------------------------------------------------
# Box metrics
# ---------------------------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def center_error(a: Box, b: Box) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


@dataclass(frozen=True)
class TrackRecord:
    pred: Box
    gt: Box
    overlap: float
    center_error: float
    normalized_center_error: float

    @classmethod
    def of(cls, pred: Box, gt: Box) -> TrackRecord:
        err = center_error(pred, gt)
        diag = gt.diagonal
        return cls(
            pred=pred,
            gt=gt,
            overlap=iou(pred, gt),
            center_error=err,
            normalized_center_error=err / diag if diag > 0 else math.inf,
        )


def _values(records: Sequence[TrackRecord], attr: str) -> np.ndarray:
    if not records:
        raise ValueError("no track records")
    return np.array([getattr(r, attr) for r in records], dtype=np.float64)


def success_curve(
    records: Sequence[TrackRecord], thresholds: np.ndarray = SUCCESS_THRESHOLDS
) -> np.ndarray:
    overlaps = _values(records, "overlap")
    return np.array([(overlaps > t).mean() for t in thresholds])


def success_auc(records: Sequence[TrackRecord]) -> float:
    return float(success_curve(records).mean())


def precision_curve(
    records: Sequence[TrackRecord], thresholds: np.ndarray = PRECISION_THRESHOLDS
) -> np.ndarray:
    errors = _values(records, "center_error")
    return np.array([(errors < t).mean() for t in thresholds])


def precision_at(records: Sequence[TrackRecord], threshold_px: float = 20.0) -> float:
    return float((_values(records, "center_error") < threshold_px).mean())


def normalized_precision_curve(
    records: Sequence[TrackRecord],
    thresholds: np.ndarray = NORM_PRECISION_THRESHOLDS,
) -> np.ndarray:
    errors = _values(records, "normalized_center_error")
    return np.array([(errors < t).mean() for t in thresholds])


def normalized_precision(
    records: Sequence[TrackRecord], threshold: float = 0.2
) -> float:
    return float((_values(records, "normalized_center_error") < threshold).mean())


def normalized_precision_auc(records: Sequence[TrackRecord]) -> float:
    return float(normalized_precision_curve(records).mean())


# ---------------------------------------------------------------------------
# Tracker
# ---------------------------------------------------------------------------


def toy_tracker_step(
    template: torch.Tensor,
    search: torch.Tensor,
    prev_box: Box,
    origin: tuple[float, float] | None = None,
) -> Box:
    """Move *prev_box* to the NCC peak of *template* inside *search*.

    *origin* is the frame position of the search region's top-left pixel;
    by default the search region is assumed centred on *prev_box*.
    """
    with torch.no_grad():
        response = ncc_response(template, search)
    row, col = response_peak(response)
    if origin is None:
        cx, cy = prev_box.center
        origin = (cx - search.shape[-1] / 2, cy - search.shape[-2] / 2)
    th, tw = template.shape[-2:]
    cx = origin[0] + col + tw / 2
    cy = origin[1] + row + th / 2
    return Box.from_center(cx, cy, prev_box.w, prev_box.h)


def crop_pixels(
    frame: torch.Tensor, left: int, top: int, width: int, height: int
) -> torch.Tensor:
    """Integer-aligned crop; pixels outside the frame replicate the border."""
    _, h, w = frame.shape
    pad_l, pad_t = max(0, -left), max(0, -top)
    pad_r, pad_b = max(0, left + width - w), max(0, top + height - h)
    if pad_l or pad_t or pad_r or pad_b:
        frame = F.pad(
            frame.unsqueeze(0), (pad_l, pad_r, pad_t, pad_b), mode="replicate"
        )[0]
        left, top = left + pad_l, top + pad_t
    return frame[:, top : top + height, left : left + width]


class Tracker(Protocol):
    def init(self, frame: torch.Tensor, box: Box, index: int = 0) -> None: ...

    def update(self, frame: torch.Tensor, index: int) -> Box: ...


Hook = Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor]


class NCCTracker:
    """Template matcher: the first-frame template is correlated with a search
    region around the previous box on every later frame.

    ``template_hook`` and ``search_hook`` receive ``(template, search, frame)``
    and return the (possibly attacked) template or search region.
    """

    def __init__(
        self,
        search_factor: float = 2.0,
        template_hook: Hook | None = None,
        search_hook: Hook | None = None,
    ) -> None:
        self.search_factor = search_factor
        self.template_hook = template_hook
        self.search_hook = search_hook
        self.template: torch.Tensor | None = None
        self.box: Box | None = None

    def _template_size(self, box: Box) -> tuple[int, int]:
        return max(1, round(box.w)), max(1, round(box.h))

    def _search_window(self, box: Box) -> tuple[int, int, int, int]:
        tw, th = self._template_size(box)
        sw = max(tw, round(box.w * self.search_factor))
        sh = max(th, round(box.h * self.search_factor))
        cx, cy = box.center
        return round(cx - sw / 2), round(cy - sh / 2), sw, sh

    def prepare_template(
        self, template: torch.Tensor, search: torch.Tensor, index: int
    ) -> torch.Tensor:
        if self.template_hook is None:
            return template
        return self.template_hook(template, search, index)

    def prepare_search(
        self, template: torch.Tensor, search: torch.Tensor, index: int
    ) -> torch.Tensor:
        if self.search_hook is None:
            return search
        return self.search_hook(template, search, index)

    def init(self, frame: torch.Tensor, box: Box, index: int = 0) -> None:
        tw, th = self._template_size(box)
        cx, cy = box.center
        template = crop_pixels(frame, round(cx - tw / 2), round(cy - th / 2), tw, th)
        search = crop_pixels(frame, *self._search_window(box))
        self.template = self.prepare_template(template, search, index)
        self.box = box

    def update(self, frame: torch.Tensor, index: int) -> Box:
        if self.template is None or self.box is None:
            raise RuntimeError("tracker used before init")
        left, top, sw, sh = self._search_window(self.box)
        search = crop_pixels(frame, left, top, sw, sh)
        search = self.prepare_search(self.template, search, index)
        self.box = toy_tracker_step(self.template, search, self.box, (left, top))
        return self.box


class DefendedTracker(NCCTracker):
    """NCC tracker whose inputs pass through a defense after any attack hook."""

    def __init__(
        self,
        defense: Defense,
        apply_to: AttackTarget = AttackTarget.SEARCH,
        seed: int = 0,
        **kwargs: Any,
    ) -> None:
        super().__init__(**kwargs)
        self.defense = defense
        self.apply_to = AttackTarget(apply_to)
        self.seed = seed

    def prepare_template(
        self, template: torch.Tensor, search: torch.Tensor, index: int
    ) -> torch.Tensor:
        template = super().prepare_template(template, search, index)
        if self.apply_to in (AttackTarget.TEMPLATE, AttackTarget.BOTH):
            template = self.defense(template, _frame_seed(self.seed, index, 1))
        return template

    def prepare_search(
        self, template: torch.Tensor, search: torch.Tensor, index: int
    ) -> torch.Tensor:
        search = super().prepare_search(template, search, index)
        if self.apply_to in (AttackTarget.SEARCH, AttackTarget.BOTH):
            search = self.defense(search, _frame_seed(self.seed, index, 0))
        return search


def _frame_seed(base: int, index: int, salt: int) -> int:
    return int(np.random.SeedSequence([base, index, salt]).generate_state(1)[0] >> 1)


def _frames(sequence: SequenceAnnotation) -> list[torch.Tensor]:
    return [to_frame_tensor(sequence.load_frame(i)) for i in range(len(sequence))]


def run_ope(tracker: Tracker, sequence: SequenceAnnotation) -> list[TrackRecord]:
    """One-pass evaluation: initialise on frame 0, record frames 1..N-1."""
    frames = _frames(sequence)
    tracker.init(frames[0], sequence.boxes[0], 0)
    records = []
    for index in range(1, len(frames)):
        pred = tracker.update(frames[index], index)
        records.append(TrackRecord.of(pred, sequence.boxes[index]))
    return records


# ---------------------------------------------------------------------------
# Reset-based evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VotRunResult:
    """Per-frame overlaps of a reset-based run.

    ``overlaps[f]`` is ``None`` on (re)initialisation and skipped frames,
    ``0.0`` on failures and the IoU otherwise; every summary value is
    recomputable from it.
    """

    overlaps: tuple[float | None, ...]
    failures: tuple[int, ...]
    reinits: tuple[int, ...]
    accuracy: float
    robustness: float
    lost_number: int
    eao_lite: float

    @classmethod
    def from_overlaps(
        cls, overlaps: Sequence[float | None], reinits: Sequence[int]
    ) -> VotRunResult:
        accuracy, robustness, lost, eao = summarize_overlaps(overlaps)
        failures = tuple(
            f for f, o in enumerate(overlaps) if o is not None and o <= 0.0
        )
        return cls(
            overlaps=tuple(overlaps),
            failures=failures,
            reinits=tuple(reinits),
            accuracy=accuracy,
            robustness=robustness,
            lost_number=lost,
            eao_lite=eao,
        )


def _segments(overlaps: Sequence[float | None]) -> list[list[float]]:
    segments: list[list[float]] = []
    current: list[float] = []
    for o in overlaps:
        if o is None:
            if current:
                segments.append(current)
            current = []
        else:
            current.append(o)
    if current:
        segments.append(current)
    return segments


def eao_lite(overlaps: Sequence[float | None]) -> float:
    segments = _segments(overlaps)
    if not segments:
        return 0.0
    longest = max(len(s) for s in segments)
    per_length = []
    for length in range(1, longest + 1):
        scores = []
        for seg in segments:
            failed = seg[-1] <= 0.0
            if len(seg) >= length:
                scores.append(sum(seg[:length]) / length)
            elif failed:
                scores.append(sum(seg) / length)
        if scores:
            per_length.append(sum(scores) / len(scores))
    return sum(per_length) / len(per_length)


def summarize_overlaps(
    overlaps: Sequence[float | None],
) -> tuple[float, float, int, float]:
    """(accuracy, robustness, lost number, eao_lite) from per-frame overlaps."""
    tracked = [o for o in overlaps if o is not None and o > 0.0]
    lost = sum(1 for o in overlaps if o is not None and o <= 0.0)
    accuracy = sum(tracked) / len(tracked) if tracked else 0.0
    robustness = lost / len(overlaps) if overlaps else 0.0
    return accuracy, robustness, lost, eao_lite(overlaps)


def vot_evaluate(
    tracker: Tracker, sequence: SequenceAnnotation, reinit_gap: int = 5
) -> VotRunResult:
    """Reset-based run: a zero overlap is a failure and the tracker is
    re-initialised on the ground truth ``reinit_gap`` frames later."""
    if reinit_gap < 1:
        raise ValueError("reinit_gap must be >= 1")
    frames = _frames(sequence)
    overlaps: list[float | None] = [None] * len(frames)
    reinits = []
    next_init = 0
    for index, frame in enumerate(frames):
        if index < next_init:
            continue
        if index == next_init:
            tracker.init(frame, sequence.boxes[index], index)
            reinits.append(index)
            continue
        overlap = iou(tracker.update(frame, index), sequence.boxes[index])
        if overlap <= 0.0:
            overlaps[index] = 0.0
            next_init = index + reinit_gap
        else:
            overlaps[index] = overlap
    return VotRunResult.from_overlaps(overlaps, reinits)


# ---------------------------------------------------------------------------
# Image quality
# ---------------------------------------------------------------------------


def psnr(x: torch.Tensor, y: torch.Tensor, data_range: float = 2.0) -> float:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float(((x.to(torch.float64) - y.to(torch.float64)) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def image_quality(
    clean: torch.Tensor,
    adversarial: torch.Tensor,
    purified: torch.Tensor,
    ssim_cfg: SsimConfig | None = None,
) -> dict[str, float]:
    """Mean per-image PSNR and SSIM of the adversarial and purified batches."""
    cfg = ssim_cfg or SsimConfig()
    if clean.ndim == 3:
        clean, adversarial, purified = (
            t.unsqueeze(0) for t in (clean, adversarial, purified)
        )

    def mean(fn: Callable[[torch.Tensor, torch.Tensor], float], other: torch.Tensor):
        n = clean.shape[0]
        return sum(fn(other[i], clean[i]) for i in range(n)) / n

    def ssim_value(a: torch.Tensor, b: torch.Tensor) -> float:
        return float(ssim(a.to(torch.float64), b.to(torch.float64), cfg))

    return {
        "psnr_adversarial": mean(psnr, adversarial),
        "psnr_purified": mean(psnr, purified),
        "ssim_adversarial": mean(ssim_value, adversarial),
        "ssim_purified": mean(ssim_value, purified),
        "images": float(clean.shape[0]),
    }


# ---------------------------------------------------------------------------
# Evaluation matrix
# ---------------------------------------------------------------------------


REPORT_COLUMNS = (
    "condition",
    "sequence",
    "frames",
    "success_auc",
    "precision",
    "norm_precision",
    "accuracy",
    "robustness",
    "lost_number",
    "eao_lite",
)


@dataclass(frozen=True)
class MatrixRow:
    condition: str
    sequence: str
    frames: int
    success_auc: float
    precision: float
    norm_precision: float
    accuracy: float
    robustness: float
    lost_number: int
    eao_lite: float

    def to_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in REPORT_COLUMNS}


@dataclass
class MatrixReport:
    rows: list[MatrixRow]
    curves: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def aggregate(self, condition: Condition | str) -> MatrixRow:
        name = Condition(condition).value
        for row in self.rows:
            if row.condition == name and row.sequence == AGGREGATE:
                return row
        raise KeyError(f"no aggregate row for condition {name}")

    def to_dict(self) -> dict[str, Any]:
        return {"rows": [r.to_dict() for r in self.rows], "curves": self.curves}

    def write(self, out_dir: Path) -> dict[str, Path]:
        """Write ``report.csv``, ``report.json`` and ``curves.csv`` under *out_dir*."""
        out_dir = Path(out_dir)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows:
            writer.writerow([_fmt(getattr(row, c)) for c in REPORT_COLUMNS])
        paths = {
            "report.csv": out_dir / "report.csv",
            "report.json": out_dir / "report.json",
            "curves.csv": out_dir / "curves.csv",
        }
        atomic_write_text(paths["report.csv"], buf.getvalue())
        atomic_write_text(
            paths["report.json"],
            json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n",
        )
        atomic_write_text(paths["curves.csv"], curves_to_csv(self.curves))
        for name, path in paths.items():
            report.attach_file(path, name)
        return paths


def _fmt(value: Any) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def curves_to_csv(curves: dict[str, dict[str, list[float]]]) -> str:
    """Long-format curve table: ``condition,curve,threshold,value``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("condition", "curve", "threshold", "value"))
    grids = {
        "success": SUCCESS_THRESHOLDS,
        "precision": PRECISION_THRESHOLDS,
        "norm_precision": NORM_PRECISION_THRESHOLDS,
    }
    for condition, named in curves.items():
        for curve, values in named.items():
            for threshold, value in zip(grids[curve], values):
                writer.writerow((condition, curve, repr(float(threshold)), repr(value)))
    return buf.getvalue()


def build_tracker(
    condition: Condition,
    cfg: EvalConfig,
    attack: AttackConfig,
    seq_seed: int,
    purifier: Defense | None = None,
    apply_to: AttackTarget = AttackTarget.SEARCH,
) -> NCCTracker:
    """Tracker for one condition; attacks are seeded per sequence and frame."""
    template_hook = search_hook = None
    if condition.attacked:
        target = attack.target

        def attack_search(tpl: torch.Tensor, s: torch.Tensor, index: int):
            seed = _frame_seed(seq_seed, index, 2)
            return tracker_attack(
                tpl, s, attack.budget, seed, attack.temperature, AttackTarget.SEARCH
            ).adversarial

        def attack_template(tpl: torch.Tensor, s: torch.Tensor, index: int):
            seed = _frame_seed(seq_seed, index, 3)
            return tracker_attack(
                tpl, s, attack.budget, seed, attack.temperature, AttackTarget.TEMPLATE
            ).adversarial

        if target in (AttackTarget.SEARCH, AttackTarget.BOTH):
            search_hook = attack_search
        if target in (AttackTarget.TEMPLATE, AttackTarget.BOTH):
            template_hook = attack_template

    kwargs = {
        "search_factor": cfg.search_factor,
        "template_hook": template_hook,
        "search_hook": search_hook,
    }
    if condition is Condition.DEFENDED:
        if purifier is None:
            raise ConfigError("the defended condition needs a trained denoiser")
        return DefendedTracker(purifier, apply_to, seq_seed, **kwargs)
    if condition is Condition.GAUSSIAN:
        defense = filter_defense("gaussian", cfg.gaussian_sigma)
        return DefendedTracker(defense, apply_to, seq_seed, **kwargs)
    if condition is Condition.MEDIAN:
        defense = filter_defense("median", cfg.median_size)
        return DefendedTracker(defense, apply_to, seq_seed, **kwargs)
    return NCCTracker(**kwargs)


@dataclass
class _Run:
    records: list[TrackRecord]
    vot: VotRunResult


def _row(
    condition: Condition,
    sequence: str,
    records: list[TrackRecord],
    vots: list[VotRunResult],
    cfg: EvalConfig,
) -> MatrixRow:
    return MatrixRow(
        condition=condition.value,
        sequence=sequence,
        frames=len(records),
        success_auc=success_auc(records),
        precision=precision_at(records, cfg.precision_threshold),
        norm_precision=normalized_precision(records, cfg.norm_precision_threshold),
        accuracy=float(np.mean([v.accuracy for v in vots])),
        robustness=float(np.mean([v.robustness for v in vots])),
        lost_number=sum(v.lost_number for v in vots),
        eao_lite=float(np.mean([v.eao_lite for v in vots])),
    )


def run_matrix(
    sequences: Sequence[SequenceAnnotation],
    conditions: Sequence[Condition],
    attack: AttackConfig,
    purifier: Defense | None = None,
    cfg: EvalConfig | None = None,
    apply_to: AttackTarget = AttackTarget.SEARCH,
) -> MatrixReport:
    """Evaluate every condition on every sequence.

    The report has one row per (condition, sequence) plus one aggregate row
    per condition; rows are ordered by condition, then sequence.
    """
    cfg = cfg or EvalConfig()
    if not sequences:
        raise ValueError("no sequences to evaluate")
    conditions = [Condition(c) for c in conditions]

    def job(condition: Condition, seq_idx: int) -> _Run:
        seq = sequences[seq_idx]
        seq_seed = _frame_seed(attack.seed, seq_idx, 0)

        def make() -> NCCTracker:
            return build_tracker(condition, cfg, attack, seq_seed, purifier, apply_to)

        records = run_ope(make(), seq)
        vot = vot_evaluate(make(), seq, cfg.reinit_gap)
        return _Run(records, vot)

    jobs = [(c, i) for c in conditions for i in range(len(sequences))]
    results: dict[tuple[Condition, int], _Run] = {}
    title = f"evaluate {len(conditions)} conditions x {len(sequences)} sequences"
    with report.step(title):
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            futures = {executor.submit(job, *j): j for j in jobs}
            for future in as_completed(futures):
                condition, seq_idx = futures[future]
                results[(condition, seq_idx)] = future.result()
                logger.debug(
                    "evaluated %s on %s", condition.value, sequences[seq_idx].name
                )

    rows: list[MatrixRow] = []
    curves: dict[str, dict[str, list[float]]] = {}
    for condition in conditions:
        pooled: list[TrackRecord] = []
        vots = []
        for seq_idx, seq in enumerate(sequences):
            run = results[(condition, seq_idx)]
            rows.append(_row(condition, seq.name, run.records, [run.vot], cfg))
            pooled.extend(run.records)
            vots.append(run.vot)
        rows.append(_row(condition, AGGREGATE, pooled, vots, cfg))
        curves[condition.value] = {
            "success": success_curve(pooled).tolist(),
            "precision": precision_curve(pooled).tolist(),
            "norm_precision": normalized_precision_curve(pooled).tolist(),
        }
        agg = rows[-1]
        logger.info(
            "%s: success AUC %.3f, precision %.3f, lost %d",
            condition.value,
            agg.success_auc,
            agg.precision,
            agg.lost_number,
        )
    return MatrixReport(rows=rows, curves=curves)


def gap_recovery(report_: MatrixReport) -> float | None:
    """Fraction of the original-to-attacked success gap won back by the defense."""
    try:
        original = report_.aggregate(Condition.ORIGINAL).success_auc
        attacked = report_.aggregate(Condition.ATTACKED).success_auc
        defended = report_.aggregate(Condition.DEFENDED).success_auc
    except KeyError:
        return None
    gap = original - attacked
    if gap <= 0:
        return None
    return (defended - attacked) / gap
