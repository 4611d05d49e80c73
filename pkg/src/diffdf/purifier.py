"""Inference-time purification and the classic filtering defenses.

Purification diffuses the input ``t_star`` steps forward in one closed-form
jump and runs the reverse chain back to step 1. It works on any image the
caller passes, so it can sit in front of a tracker without touching it.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Any, Callable, Iterable, Iterator

import torch
import torch.nn.functional as F

from diffdf.attacks import AttackTarget
from diffdf.denoiser import Denoiser
from diffdf.diffusion import Predictor, q_sample, reverse_chain
from diffdf.errors import CheckpointError, ConfigError
from diffdf.losses import gaussian_window
from diffdf.schedule import NoiseSchedule, VarianceMode
from diffdf.validation import read_bool, read_enum, read_int, reject_unknown

logger = logging.getLogger(__name__)

# Frames per second reported for the full-scale model on a single GPU.
REFERENCE_FPS = 34.01


@dataclass(frozen=True)
class PurifyConfig:
    t_star: int = 100
    variance_mode: VarianceMode = VarianceMode.BETA
    deterministic: bool = False
    seed: int = 0
    batch: int = 16
    apply_to: AttackTarget = AttackTarget.SEARCH

    @classmethod
    def from_dict(cls, data: dict) -> PurifyConfig:
        prefix = "purify"
        reject_unknown(
            data,
            ("t_star", "variance_mode", "deterministic", "seed", "batch", "apply_to"),
            prefix,
        )
        return cls(
            t_star=read_int(data, "t_star", prefix, 100, minimum=1),
            variance_mode=read_enum(
                data, "variance_mode", prefix, VarianceMode, VarianceMode.BETA
            ),
            deterministic=read_bool(data, "deterministic", prefix, False),
            seed=read_int(data, "seed", prefix, 0, minimum=0),
            batch=read_int(data, "batch", prefix, 16, minimum=1),
            apply_to=read_enum(
                data, "apply_to", prefix, AttackTarget, AttackTarget.SEARCH
            ),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "t_star": self.t_star,
            "variance_mode": self.variance_mode.value,
            "deterministic": self.deterministic,
            "seed": self.seed,
            "batch": self.batch,
            "apply_to": self.apply_to.value,
        }


@dataclass
class PurifyStats:
    frames: int = 0
    elapsed: float = 0.0

    @property
    def fps(self) -> float:
        return self.frames / self.elapsed if self.elapsed > 0 else 0.0

    def to_dict(self) -> dict[str, float]:
        return {"frames": self.frames, "elapsed": self.elapsed, "fps": self.fps}


def _predictor(model: Denoiser | Predictor, schedule: NoiseSchedule) -> Predictor:
    if isinstance(model, Denoiser):
        bound = model.schedule_fingerprint
        if bound is not None and bound != schedule.fingerprint():
            raise CheckpointError(
                f"denoiser is bound to schedule {bound}, "
                f"not {schedule.fingerprint()}"
            )
        model.eval()
    return model


@torch.no_grad()
def purify(
    model: Denoiser | Predictor,
    schedule: NoiseSchedule,
    x: torch.Tensor,
    cfg: PurifyConfig,
) -> torch.Tensor:
    """Noise *x* to ``t_star`` and denoise it back; output clamped to [-1, 1]."""
    if not 1 <= cfg.t_star <= schedule.T:
        raise ConfigError(f"purify.t_star={cfg.t_star} outside 1..{schedule.T}")
    predictor = _predictor(model, schedule)
    single = x.ndim == 3
    batch = x.unsqueeze(0) if single else x
    generator = torch.Generator().manual_seed(cfg.seed)
    outputs = []
    for chunk in torch.split(batch, cfg.batch):
        eps = torch.randn(chunk.shape, generator=generator, dtype=chunk.dtype)
        t = torch.full((chunk.shape[0],), cfg.t_star, dtype=torch.long)
        x_t = q_sample(chunk, t, eps.to(chunk.device), schedule)
        out = reverse_chain(
            x_t,
            cfg.t_star,
            predictor,
            schedule,
            cfg.variance_mode,
            None if cfg.deterministic else generator,
        )
        outputs.append(out.clamp(-1.0, 1.0))
    result = torch.cat(outputs)
    return result[0] if single else result


def purify_sequence(
    model: Denoiser | Predictor,
    schedule: NoiseSchedule,
    frames: Iterable[torch.Tensor],
    cfg: PurifyConfig,
    stats: PurifyStats | None = None,
) -> Iterator[torch.Tensor]:
    """Purify frames one by one, in order; frame ``i`` uses seed ``cfg.seed + i``."""
    stats = stats if stats is not None else PurifyStats()
    for index, frame in enumerate(frames):
        started = time.perf_counter()
        frame_cfg = replace(cfg, seed=cfg.seed + index)
        out = purify(model, schedule, frame, frame_cfg)
        elapsed = time.perf_counter() - started
        stats.frames += 1
        stats.elapsed += elapsed
        logger.debug("frame %d purified in %.4fs", index, elapsed)
        yield out
    if stats.frames:
        logger.info(
            "Purified %d frames at %.2f FPS (reported full-scale GPU figure: %.2f FPS)",
            stats.frames,
            stats.fps,
            REFERENCE_FPS,
        )


def _resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(
        x.unsqueeze(0), size=size, mode="bilinear", align_corners=False
    )[0]


class Purifier:
    """Callable defense for crops of any size.

    Crops are resized to the model resolution, purified and resized back.
    """

    def __init__(
        self,
        model: Denoiser | Predictor,
        schedule: NoiseSchedule,
        cfg: PurifyConfig,
        image_size: int,
    ) -> None:
        self.model = model
        self.schedule = schedule
        self.cfg = cfg
        self.image_size = image_size

    def __call__(self, x: torch.Tensor, seed: int = 0) -> torch.Tensor:
        size = tuple(x.shape[-2:])
        resized = _resize(x, (self.image_size, self.image_size))
        cfg = replace(self.cfg, seed=self.cfg.seed + seed)
        out = purify(self.model, self.schedule, resized, cfg)
        return _resize(out, size).clamp(-1.0, 1.0)


def _reflect_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    # Reflection needs pad < size; fall back to replication for tiny crops.
    mode = "reflect" if pad < min(x.shape[-2:]) else "replicate"
    return F.pad(x, (pad, pad, pad, pad), mode=mode)


def gaussian_filter(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Per-channel Gaussian blur with a ``2*ceil(3*sigma)+1`` kernel."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x.clone()
    single = x.ndim == 3
    batch = x.unsqueeze(0) if single else x
    channels = batch.shape[1]
    radius = math.ceil(3 * sigma)
    size = 2 * radius + 1
    kernel = gaussian_window(size, sigma, batch.dtype).to(batch.device)
    kernel = kernel.expand(channels, 1, size, size)
    out = F.conv2d(_reflect_pad(batch, radius), kernel, groups=channels)
    return out[0] if single else out


def median_filter(x: torch.Tensor, size: int) -> torch.Tensor:
    """Per-channel median over ``size x size`` windows."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"median window must be a positive odd integer, got {size}")
    if size == 1:
        return x.clone()
    single = x.ndim == 3
    batch = x.unsqueeze(0) if single else x
    n, c, h, w = batch.shape
    pad = size // 2
    patches = F.unfold(_reflect_pad(batch, pad), kernel_size=size)
    patches = patches.reshape(n, c, size * size, h * w)
    out = patches.median(dim=2).values.reshape(n, c, h, w)
    return out[0] if single else out


Defense = Callable[[torch.Tensor, int], torch.Tensor]


def filter_defense(kind: str, param: float) -> Defense:
    """Wrap a filter as a ``(crop, seed) -> crop`` defense."""
    if kind == "gaussian":
        return lambda x, seed=0: gaussian_filter(x, param)
    if kind == "median":
        return lambda x, seed=0: median_filter(x, int(param))
    raise ValueError(f"unknown filter defense {kind!r}")
