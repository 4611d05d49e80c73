"""Datasets of clean/adversarial crop pairs and the synthetic tracking sequences.

On-disk layout of a pair dataset::

    <root>/clean/<sequence>_<frame>_<kind>.png
    <root>/adv/<sequence>_<frame>_<kind>.png
    <root>/manifest.json

Images are lossless 8-bit PNGs; tensors are ``C x H x W`` in ``[-1, 1]``.
"""

from __future__ import annotations

import json
import logging
import math
import re
import shutil
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import Dataset

from diffdf.attacks import (
    AdversarialPair,
    AttackConfig,
    AttackKind,
    AttackTarget,
    feature_distance_loss,
    gradient_attack,
    structured_perturbation,
    tracker_attack,
    verify_budget,
)
from diffdf.boxes import Box
from diffdf.errors import ConfigError, DataError
from diffdf.utils import atomic_write_text, sanitize
from diffdf.validation import read_float, read_int, reject_unknown

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
GROUNDTRUTH_NAME = "groundtruth.txt"

_PAIR_NAME = re.compile(r"^(?P<seq>.+)_(?P<frame>\d+)_(?P<kind>template|search)$")


class CropKind(str, Enum):
    TEMPLATE = "template"
    SEARCH = "search"


@dataclass(frozen=True)
class CropSpec:
    kind: CropKind
    context_factor: float
    output_size: int
    context_amount: float = 0.0

    def __post_init__(self) -> None:
        if not self.context_factor > 0:
            raise ValueError("context_factor must be positive")
        if self.output_size < 1:
            raise ValueError("output_size must be >= 1")
        if self.context_amount < 0:
            raise ValueError("context_amount must be >= 0")

    def side(self, box: Box) -> float:
        """Side of the square frame region covered by a crop around *box*."""
        pad = self.context_amount * (box.w + box.h)
        return math.sqrt((box.w + pad) * (box.h + pad)) * self.context_factor


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 32
    stride: int = 10
    template_context: float = 1.0
    search_context: float = 2.0
    context_amount: float = 0.0
    sequences: int = 4
    frames: int = 30
    canvas: int = 96
    max_velocity: float = 3.0
    object_min: int = 12
    object_max: int = 18
    workers: int = 4

    @classmethod
    def from_dict(cls, data: dict) -> DataConfig:
        prefix = "data"
        reject_unknown(
            data,
            (
                "image_size",
                "stride",
                "template_context",
                "search_context",
                "context_amount",
                "sequences",
                "frames",
                "canvas",
                "max_velocity",
                "object_min",
                "object_max",
                "workers",
            ),
            prefix,
        )
        cfg = cls(
            image_size=read_int(data, "image_size", prefix, 32, minimum=1),
            stride=read_int(data, "stride", prefix, 10, minimum=1),
            template_context=read_float(
                data, "template_context", prefix, 1.0, positive=True
            ),
            search_context=read_float(
                data, "search_context", prefix, 2.0, positive=True
            ),
            context_amount=read_float(data, "context_amount", prefix, 0.0, minimum=0.0),
            sequences=read_int(data, "sequences", prefix, 4, minimum=1),
            frames=read_int(data, "frames", prefix, 30, minimum=1),
            canvas=read_int(data, "canvas", prefix, 96, minimum=8),
            max_velocity=read_float(data, "max_velocity", prefix, 3.0, minimum=0.0),
            object_min=read_int(data, "object_min", prefix, 12, minimum=2),
            object_max=read_int(data, "object_max", prefix, 18, minimum=2),
            workers=read_int(data, "workers", prefix, 4, minimum=1),
        )
        if cfg.object_min > cfg.object_max:
            raise ConfigError("data.object_min must be <= data.object_max")
        if cfg.object_max >= cfg.canvas:
            raise ConfigError("data.object_max must be smaller than data.canvas")
        return cfg

    def crop_specs(self) -> tuple[CropSpec, CropSpec]:
        return (
            CropSpec(
                CropKind.TEMPLATE,
                self.template_context,
                self.image_size,
                self.context_amount,
            ),
            CropSpec(
                CropKind.SEARCH,
                self.search_context,
                self.image_size,
                self.context_amount,
            ),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_size": self.image_size,
            "stride": self.stride,
            "template_context": self.template_context,
            "search_context": self.search_context,
            "context_amount": self.context_amount,
            "sequences": self.sequences,
            "frames": self.frames,
            "canvas": self.canvas,
            "max_velocity": self.max_velocity,
            "object_min": self.object_min,
            "object_max": self.object_max,
            "workers": self.workers,
        }


# ---------------------------------------------------------------------------
# Image conversion
# ---------------------------------------------------------------------------


def _as_array(img: np.ndarray | Image.Image) -> np.ndarray:
    if isinstance(img, Image.Image):
        img = np.asarray(img.convert("RGB"))
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise DataError(f"expected an 8-bit image, got dtype {arr.dtype}")
    return arr


def to_frame_tensor(img: np.ndarray | Image.Image) -> torch.Tensor:
    """8-bit image -> ``3 x H x W`` float tensor in [-1, 1], no resizing."""
    arr = _as_array(img)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).to(torch.float32) / 127.5 - 1.0


def preprocess(img: np.ndarray | Image.Image, size: int | None = None) -> torch.Tensor:
    """Bilinear resize to ``size x size`` and map [0, 255] -> [-1, 1]."""
    x = to_frame_tensor(img)
    if size is not None and tuple(x.shape[-2:]) != (size, size):
        x = F.interpolate(
            x.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
        )[0].clamp(-1.0, 1.0)
    return x


def depreprocess(x: torch.Tensor) -> np.ndarray:
    """``3 x H x W`` tensor in [-1, 1] -> 8-bit ``H x W x 3`` array."""
    if x.ndim != 3:
        raise ValueError(f"expected a C x H x W tensor, got {tuple(x.shape)}")
    scaled = ((x.detach().to(torch.float64).cpu() + 1.0) * 127.5).round()
    return scaled.clamp(0, 255).to(torch.uint8).permute(1, 2, 0).numpy()


def save_png(path: Path, x: torch.Tensor | np.ndarray) -> Path:
    arr = depreprocess(x) if isinstance(x, torch.Tensor) else _as_array(x)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")
    return path


def load_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB")).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


@dataclass
class SequenceAnnotation:
    name: str
    frames: list[Path | np.ndarray]
    boxes: list[Box]

    def __post_init__(self) -> None:
        if len(self.frames) != len(self.boxes):
            raise DataError(
                f"sequence {self.name}: {len(self.frames)} frames but "
                f"{len(self.boxes)} annotations"
            )
        for index, box in enumerate(self.boxes):
            if box.is_degenerate():
                raise DataError(
                    f"sequence {self.name}: degenerate box at frame {index}"
                )

    def __len__(self) -> int:
        return len(self.frames)

    def load_frame(self, index: int) -> np.ndarray:
        frame = self.frames[index]
        if isinstance(frame, np.ndarray):
            return frame
        return load_png(Path(frame))


def sample_frames(seq: SequenceAnnotation, stride: int = 10) -> list[int]:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return list(range(0, len(seq), stride))


def _velocity(rng: np.random.Generator, max_velocity: float) -> tuple[int, int]:
    if max_velocity < 1:
        return 0, 0
    angle = rng.uniform(0, 2 * math.pi)
    speed = rng.uniform(0.5 * max_velocity, max_velocity)
    dx, dy = round(speed * math.cos(angle)), round(speed * math.sin(angle))
    while math.hypot(dx, dy) > max_velocity:
        if abs(dx) >= abs(dy):
            dx -= int(math.copysign(1, dx))
        else:
            dy -= int(math.copysign(1, dy))
    return dx, dy


def _background(rng: np.random.Generator, canvas: int) -> np.ndarray:
    coarse = torch.from_numpy(rng.uniform(40, 215, size=(1, 3, 6, 6)))
    smooth = F.interpolate(
        coarse, size=(canvas, canvas), mode="bicubic", align_corners=False
    )[0].permute(1, 2, 0).numpy()
    grain = rng.normal(0.0, 12.0, size=(canvas, canvas, 3))
    return np.clip(np.rint(smooth + grain), 0, 255).astype(np.uint8)


def _object_texture(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    cell = 3
    cells = rng.integers(0, 256, size=(-(-h // cell), -(-w // cell), 3))
    texture = np.repeat(np.repeat(cells, cell, axis=0), cell, axis=1)[:h, :w]
    texture[0, :] = texture[-1, :] = 0
    texture[:, 0] = texture[:, -1] = 0
    return texture.astype(np.uint8)


def _step(pos: int, d: int, limit: int) -> tuple[int, int]:
    nxt = pos + d
    if nxt < 0 or nxt > limit:
        d = -d
        nxt = pos + d
    return min(max(nxt, 0), limit), d


def make_synthetic_sequences(
    n_seq: int,
    n_frames: int,
    canvas: int = 96,
    seed: int = 0,
    *,
    max_velocity: float = 3.0,
    object_size: tuple[int, int] = (12, 18),
) -> list[SequenceAnnotation]:
    """Textured objects moving over textured backgrounds, with exact boxes."""
    lo, hi = object_size
    if not 2 <= lo <= hi < canvas:
        raise ValueError(
            f"object size range {object_size} does not fit canvas {canvas}"
        )
    sequences = []
    for index, child in enumerate(np.random.SeedSequence(seed).spawn(n_seq)):
        rng = np.random.default_rng(child)
        background = _background(rng, canvas)
        w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        texture = _object_texture(rng, w, h)
        x = int(rng.integers(0, canvas - w + 1))
        y = int(rng.integers(0, canvas - h + 1))
        dx, dy = _velocity(rng, max_velocity)
        frames: list[Path | np.ndarray] = []
        boxes = []
        for f in range(n_frames):
            if f > 0:
                if rng.uniform() < 0.1:
                    dx, dy = _velocity(rng, max_velocity)
                x, dx = _step(x, dx, canvas - w)
                y, dy = _step(y, dy, canvas - h)
            frame = background.copy()
            frame[y : y + h, x : x + w] = texture
            frames.append(frame)
            boxes.append(Box(float(x), float(y), float(w), float(h)))
        sequences.append(
            SequenceAnnotation(
                name=f"synthetic-{index:03d}", frames=frames, boxes=boxes
            )
        )
    logger.info(
        "Generated %d synthetic sequences of %d frames (%dx%d, seed %d)",
        n_seq,
        n_frames,
        canvas,
        canvas,
        seed,
    )
    return sequences


def write_sequences(sequences: Iterable[SequenceAnnotation], root: Path) -> list[Path]:
    """Persist sequences as ``<root>/<name>/NNNNN.png`` plus ``groundtruth.txt``."""
    written = []
    for seq in sequences:
        seq_dir = Path(root) / sanitize(seq.name)
        seq_dir.mkdir(parents=True, exist_ok=True)
        for index in range(len(seq)):
            save_png(seq_dir / f"{index:05d}.png", seq.load_frame(index))
        lines = [",".join(f"{v:g}" for v in box.to_list()) for box in seq.boxes]
        atomic_write_text(seq_dir / GROUNDTRUTH_NAME, "\n".join(lines) + "\n")
        written.append(seq_dir)
    return written


def load_sequences(root: Path) -> list[SequenceAnnotation]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"sequence directory {root} does not exist")
    sequences = []
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        gt = seq_dir / GROUNDTRUTH_NAME
        if not gt.is_file():
            raise DataError(f"sequence {seq_dir.name} has no {GROUNDTRUTH_NAME}")
        try:
            boxes = [
                Box.from_list([float(v) for v in line.split(",")])
                for line in gt.read_text(encoding="utf-8").splitlines()
                if line.strip()
            ]
        except ValueError as exc:
            raise DataError(f"bad annotation in {gt}: {exc}") from exc
        frames: list[Path | np.ndarray] = sorted(seq_dir.glob("*.png"))
        sequences.append(SequenceAnnotation(seq_dir.name, frames, boxes))
    if not sequences:
        raise DataError(f"no sequences found under {root}")
    return sequences


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------


def crop_region(frame: torch.Tensor, box: Box, spec: CropSpec) -> torch.Tensor:
    """Square crop around *box*, bilinearly resampled to ``spec.output_size``.

    Pixels outside the frame replicate the nearest border pixel.
    """
    if box.is_degenerate():
        raise ValueError(f"degenerate box {box}")
    if frame.ndim != 3:
        raise ValueError(f"expected a C x H x W frame, got {tuple(frame.shape)}")
    _, height, width = frame.shape
    side = spec.side(box)
    cx, cy = box.center
    size = spec.output_size
    offsets = (torch.arange(size, dtype=torch.float64) + 0.5) * side / size - side / 2
    gx = 2 * (cx + offsets) / width - 1
    gy = 2 * (cy + offsets) / height - 1
    grid_y, grid_x = torch.meshgrid(gy, gx, indexing="ij")
    grid = torch.stack([grid_x, grid_y], dim=-1).unsqueeze(0).to(frame.dtype)
    out = F.grid_sample(
        frame.unsqueeze(0),
        grid.to(frame.device),
        mode="bilinear",
        padding_mode="border",
        align_corners=False,
    )
    return out[0]


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairEntry:
    clean_path: str
    adv_path: str
    crop_kind: CropKind
    source_sequence: str
    frame_index: int
    generator_meta: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> PairEntry:
        try:
            return cls(
                clean_path=str(data["clean_path"]),
                adv_path=str(data["adv_path"]),
                crop_kind=CropKind(data["crop_kind"]),
                source_sequence=str(data["source_sequence"]),
                frame_index=int(data["frame_index"]),
                generator_meta=dict(data.get("generator_meta") or {}),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed manifest entry {data!r}: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "clean_path": self.clean_path,
            "adv_path": self.adv_path,
            "crop_kind": self.crop_kind.value,
            "source_sequence": self.source_sequence,
            "frame_index": self.frame_index,
            "generator_meta": self.generator_meta,
        }


@dataclass
class PairManifest:
    entries: list[PairEntry]
    root: Path | None = None
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def __len__(self) -> int:
        return len(self.entries)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "entries": [e.to_dict() for e in self.entries],
        }

    def write(self, root: Path) -> Path:
        root = Path(root)
        path = root / MANIFEST_NAME
        text = json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"
        atomic_write_text(path, text)
        self.root = root
        return path

    @classmethod
    def load(cls, root: Path, validate: bool = True) -> PairManifest:
        """Load ``<root>/manifest.json``; *root* may also be the manifest file."""
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() else root
        root = path.parent
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"manifest {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise DataError(f"manifest {path} must be a JSON object")
        version = data.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise DataError(
                f"manifest {path} has schema_version {version!r}, "
                f"expected {MANIFEST_SCHEMA_VERSION}"
            )
        entries = [PairEntry.from_dict(e) for e in data.get("entries") or []]
        manifest = cls(entries=entries, root=root, schema_version=version)
        if validate:
            manifest.validate()
        return manifest

    def resolve(self, relative: str) -> Path:
        if self.root is None:
            raise DataError("manifest has no root directory")
        return self.root / relative

    def validate(self) -> None:
        """Every referenced file exists and each clean/adv pair has one shape."""
        for entry in self.entries:
            sizes = []
            for rel in (entry.clean_path, entry.adv_path):
                path = self.resolve(rel)
                if not path.is_file():
                    raise DataError(f"manifest references missing file {path}")
                try:
                    with Image.open(path) as img:
                        sizes.append(img.size)
                except OSError as exc:
                    raise DataError(f"cannot read image {path}: {exc}") from exc
            if sizes[0] != sizes[1]:
                raise DataError(
                    f"pair {entry.clean_path} / {entry.adv_path} sizes differ: "
                    f"{sizes[0]} vs {sizes[1]}"
                )


class PairDataset(Dataset):
    """(clean, adversarial) tensor pairs from a manifest."""

    def __init__(self, manifest: PairManifest, image_size: int | None = None) -> None:
        self.manifest = manifest
        self.image_size = image_size

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        entry = self.manifest.entries[index]
        clean_png = load_png(self.manifest.resolve(entry.clean_path))
        adv_png = load_png(self.manifest.resolve(entry.adv_path))
        clean = preprocess(clean_png, self.image_size)
        adv = preprocess(adv_png, self.image_size)
        return clean, adv

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        """All pairs stacked into two ``N x C x H x W`` tensors."""
        if not len(self):
            raise DataError("manifest has no pairs")
        pairs = [self[i] for i in range(len(self))]
        return (
            torch.stack([c for c, _ in pairs]),
            torch.stack([a for _, a in pairs]),
        )


def _job_seed(base: int, *parts: int) -> int:
    return int(np.random.SeedSequence([base, *parts]).generate_state(1)[0])


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(
        x.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
    )[0]


def _adversarial_crop(
    spec: CropSpec,
    crops: dict[CropKind, torch.Tensor],
    sides: dict[CropKind, float],
    attack: AttackConfig,
    seed: int,
    extractor: Any,
) -> tuple[torch.Tensor, dict[str, Any]]:
    clean = crops[spec.kind]
    kind = attack.kind
    if kind.structured:
        pair = structured_perturbation(clean, kind, attack.budget.epsilon, seed)
    elif kind is AttackKind.GRADIENT:
        if extractor is None:
            raise ConfigError("gradient attacks need a feature extractor")
        loss_fn = feature_distance_loss(extractor, clean)
        pair = gradient_attack(loss_fn, clean, attack.budget, seed)
    else:
        template_spec = CropKind.TEMPLATE
        search_spec = CropKind.SEARCH
        if template_spec not in crops or search_spec not in crops:
            raise ConfigError("tracker attacks need both template and search crops")
        # Bring both crops to one pixel scale before correlating them.
        ratio = sides[template_spec] / sides[search_spec]
        size = crops[spec.kind].shape[-1]
        if spec.kind is CropKind.SEARCH:
            small = max(1, min(size, round(size * ratio)))
            pair = tracker_attack(
                _resize(crops[template_spec], small),
                clean,
                attack.budget,
                seed,
                attack.temperature,
                AttackTarget.SEARCH,
            )
        else:
            big = max(size, round(size / ratio))
            pair = tracker_attack(
                clean,
                _resize(crops[search_spec], big),
                attack.budget,
                seed,
                attack.temperature,
                AttackTarget.TEMPLATE,
            )
    return pair.adversarial, pair.meta


def _pair_name(seq_name: str, frame: int, kind: CropKind) -> str:
    return f"{sanitize(seq_name)}_{frame:05d}_{kind.value}.png"


def build_manifest(
    sequences: Sequence[SequenceAnnotation],
    stride: int,
    crop_specs: Sequence[CropSpec],
    attack_config: AttackConfig,
    out_dir: Path,
    *,
    extractor: Any = None,
    external_adv_dir: Path | None = None,
    workers: int = 4,
) -> PairManifest:
    """Crop every sampled frame, attack each crop and write the manifest.

    The template crop of frame ``f`` uses its own box; the search crop is
    centred on the box of frame ``f - 1``. With *external_adv_dir* the
    adversarial crops are read from filename-matched PNGs instead of
    being generated.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "clean").mkdir(parents=True, exist_ok=True)
        (out_dir / "adv").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    jobs = [
        (seq_idx, frame)
        for seq_idx, seq in enumerate(sequences)
        for frame in sample_frames(seq, stride)
    ]
    if external_adv_dir is not None:
        external_adv_dir = Path(external_adv_dir)
        for seq_idx, frame in jobs:
            for spec in crop_specs:
                name = _pair_name(sequences[seq_idx].name, frame, spec.kind)
                if not (external_adv_dir / name).is_file():
                    raise DataError(
                        f"missing adversarial counterpart {name} in {external_adv_dir}"
                    )

    def run(seq_idx: int, frame: int) -> list[PairEntry]:
        seq = sequences[seq_idx]
        image = to_frame_tensor(seq.load_frame(frame))
        boxes = {
            CropKind.TEMPLATE: seq.boxes[frame],
            CropKind.SEARCH: seq.boxes[max(frame - 1, 0)],
        }
        crops = {s.kind: crop_region(image, boxes[s.kind], s) for s in crop_specs}
        sides = {s.kind: s.side(boxes[s.kind]) for s in crop_specs}
        entries = []
        for offset, spec in enumerate(crop_specs):
            name = _pair_name(seq.name, frame, spec.kind)
            clean = crops[spec.kind]
            if external_adv_dir is not None:
                adv = preprocess(load_png(external_adv_dir / name), spec.output_size)
                meta: dict[str, Any] = {"generator": "external"}
            else:
                seed = _job_seed(attack_config.seed, seq_idx, frame, offset)
                adv, meta = _adversarial_crop(
                    spec, crops, sides, attack_config, seed, extractor
                )
            save_png(out_dir / "clean" / name, clean)
            save_png(out_dir / "adv" / name, adv)
            entries.append(
                PairEntry(
                    clean_path=f"clean/{name}",
                    adv_path=f"adv/{name}",
                    crop_kind=spec.kind,
                    source_sequence=seq.name,
                    frame_index=frame,
                    generator_meta=meta,
                )
            )
        return entries

    results: dict[tuple[int, int], list[PairEntry]] = {}
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(run, *job): job for job in jobs}
        for future in as_completed(futures):
            results[futures[future]] = future.result()

    entries = [entry for job in jobs for entry in results[job]]
    manifest = PairManifest(entries=entries)
    manifest.write(out_dir)
    logger.info(
        "Wrote %d pairs from %d sequences (%d sampled frames) to %s",
        len(entries),
        len(sequences),
        len(jobs),
        out_dir,
    )
    return manifest


def ingest_external(clean_dir: Path, adv_dir: Path, out_dir: Path) -> PairManifest:
    """Copy filename-matched clean/adversarial PNGs into the standard layout."""
    clean_dir, adv_dir, out_dir = Path(clean_dir), Path(adv_dir), Path(out_dir)
    clean_files = sorted(clean_dir.glob("*.png"))
    if not clean_files:
        raise DataError(f"no PNG images found in {clean_dir}")
    adv_names = {p.name for p in adv_dir.glob("*.png")}
    for path in clean_files:
        if path.name not in adv_names:
            raise DataError(f"missing adversarial counterpart {path.name} in {adv_dir}")
    extra = sorted(adv_names - {p.name for p in clean_files})
    if extra:
        raise DataError(f"adversarial image {extra[0]} has no clean counterpart")

    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "adv").mkdir(parents=True, exist_ok=True)
    entries = []
    for path in clean_files:
        match = _PAIR_NAME.match(path.stem)
        if match:
            seq, frame = match["seq"], int(match["frame"])
            kind = CropKind(match["kind"])
        else:
            seq, frame, kind = path.stem, 0, CropKind.SEARCH
        shutil.copyfile(path, out_dir / "clean" / path.name)
        shutil.copyfile(adv_dir / path.name, out_dir / "adv" / path.name)
        entries.append(
            PairEntry(
                clean_path=f"clean/{path.name}",
                adv_path=f"adv/{path.name}",
                crop_kind=kind,
                source_sequence=seq,
                frame_index=frame,
                generator_meta={"generator": "external"},
            )
        )
    manifest = PairManifest(entries=entries, root=out_dir)
    manifest.validate()
    manifest.write(out_dir)
    logger.info("Ingested %d external pairs into %s", len(entries), out_dir)
    return manifest


@dataclass(frozen=True)
class BudgetAudit:
    checked: int
    skipped: int
    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def audit_budgets(manifest: PairManifest) -> BudgetAudit:
    """Re-check every generated pair against the budget stored in its meta.

    Pairs without a recorded norm and epsilon (external pairs) are skipped.
    """
    checked = skipped = 0
    violations = []
    for entry in manifest.entries:
        meta = entry.generator_meta
        if "norm" not in meta or "epsilon" not in meta:
            skipped += 1
            continue
        pair = AdversarialPair(
            preprocess(load_png(manifest.resolve(entry.clean_path))),
            preprocess(load_png(manifest.resolve(entry.adv_path))),
            meta,
        )
        checked += 1
        if not verify_budget(pair, quantized=True):
            violations.append(entry.adv_path)
    if violations:
        logger.warning("%d of %d pairs exceed their budget", len(violations), checked)
    return BudgetAudit(checked=checked, skipped=skipped, violations=tuple(violations))
