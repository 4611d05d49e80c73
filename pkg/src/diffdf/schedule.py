"""Noise schedules: the beta, alpha and alpha-bar tables of the diffusion chain.

Step indices are 1-based at the API (``t`` in ``1..T``); the tables are
stored 0-based, so ``beta[t - 1]`` is the variance added at step ``t``.
"""

from __future__ import annotations

import hashlib
import json
import math
import operator
from dataclasses import dataclass, field
from enum import Enum
from itertools import accumulate
from typing import Any

import torch

from diffdf.errors import ConfigError
from diffdf.validation import read_enum, read_float, read_int, reject_unknown

BETA_CLIP = 0.999


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    COSINE = "cosine"


class VarianceMode(str, Enum):
    BETA = "beta"
    POSTERIOR = "posterior"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: ScheduleKind
    beta: torch.Tensor = field(repr=False)
    alpha: torch.Tensor = field(repr=False)
    alpha_bar: torch.Tensor = field(repr=False)
    params: dict[str, float] = field(default_factory=dict)

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def alpha_bar_prev(self) -> torch.Tensor:
        """alpha_bar shifted by one step with alpha_bar_0 := 1."""
        one = torch.ones(1, dtype=self.alpha_bar.dtype)
        return torch.cat([one, self.alpha_bar[:-1]])

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "T": self.T, **self.params}

    @classmethod
    def from_dict(cls, data: dict) -> NoiseSchedule:
        return ScheduleConfig.from_dict(data).build()

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class DiffusionCoeffs:
    t: int
    sqrt_alpha_bar: float
    sqrt_one_minus_alpha_bar: float
    beta_t: float
    recip_sqrt_alpha: float
    posterior_variance: float


def _from_betas(
    kind: ScheduleKind, betas: list[float], params: dict[str, float]
) -> NoiseSchedule:
    alphas = [1.0 - b for b in betas]
    # Sequential product, so alpha_bar[t] == alpha_bar[t-1] * alpha[t] bit for bit.
    alpha_bar = list(accumulate(alphas, operator.mul))
    return NoiseSchedule(
        kind=kind,
        beta=torch.tensor(betas, dtype=torch.float64),
        alpha=torch.tensor(alphas, dtype=torch.float64),
        alpha_bar=torch.tensor(alpha_bar, dtype=torch.float64),
        params=params,
    )


def build_linear_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    if isinstance(T, bool) or not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, "
            f"got {beta_start!r}, {beta_end!r}"
        )
    if T == 1:
        betas = [float(beta_start)]
    else:
        step = (beta_end - beta_start) / (T - 1)
        betas = [beta_start + step * i for i in range(T - 1)] + [float(beta_end)]
    return _from_betas(
        ScheduleKind.LINEAR,
        betas,
        {"beta_start": float(beta_start), "beta_end": float(beta_end)},
    )


def build_cosine_schedule(T: int, offset: float = 0.008) -> NoiseSchedule:
    if isinstance(T, bool) or not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not offset > 0:
        raise ValueError(f"offset must be positive, got {offset!r}")

    def f(step: int) -> float:
        return math.cos((step / T + offset) / (1 + offset) * math.pi / 2) ** 2

    profile = [f(step) / f(0) for step in range(T + 1)]
    betas = [
        min(1.0 - profile[step] / profile[step - 1], BETA_CLIP)
        for step in range(1, T + 1)
    ]
    return _from_betas(ScheduleKind.COSINE, betas, {"offset": float(offset)})


def check_step(s: NoiseSchedule, t: int) -> int:
    if isinstance(t, bool) or not isinstance(t, int) or not 1 <= t <= s.T:
        raise ValueError(f"step t={t!r} outside 1..{s.T}")
    return t


def coeffs_at(
    s: NoiseSchedule, t: int, variance_mode: VarianceMode = VarianceMode.BETA
) -> DiffusionCoeffs:
    check_step(s, t)
    i = t - 1
    alpha_bar = float(s.alpha_bar[i])
    alpha_bar_prev = float(s.alpha_bar[i - 1]) if t > 1 else 1.0
    beta = float(s.beta[i])
    if VarianceMode(variance_mode) is VarianceMode.POSTERIOR:
        variance = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    else:
        variance = beta
    return DiffusionCoeffs(
        t=t,
        sqrt_alpha_bar=math.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=math.sqrt(1.0 - alpha_bar),
        beta_t=beta,
        recip_sqrt_alpha=1.0 / math.sqrt(float(s.alpha[i])),
        posterior_variance=variance,
    )


def variance_table(s: NoiseSchedule, variance_mode: VarianceMode) -> torch.Tensor:
    """Per-step reverse-process variance for the whole chain."""
    if VarianceMode(variance_mode) is VarianceMode.POSTERIOR:
        return (1.0 - s.alpha_bar_prev()) / (1.0 - s.alpha_bar) * s.beta
    return s.beta.clone()


@dataclass(frozen=True)
class ScheduleConfig:
    kind: ScheduleKind = ScheduleKind.LINEAR
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    offset: float = 0.008

    @classmethod
    def from_dict(cls, data: dict) -> ScheduleConfig:
        prefix = "schedule"
        reject_unknown(data, ("kind", "T", "beta_start", "beta_end", "offset"), prefix)
        kind = read_enum(data, "kind", prefix, ScheduleKind, ScheduleKind.LINEAR)
        T = read_int(data, "T", prefix, 1000, minimum=1)
        beta_start = read_float(data, "beta_start", prefix, 1e-4, positive=True)
        beta_end = read_float(data, "beta_end", prefix, 0.02, positive=True, below=1.0)
        if beta_start > beta_end:
            raise ConfigError("schedule.beta_start must be <= schedule.beta_end")
        offset = read_float(data, "offset", prefix, 0.008, positive=True)
        return cls(
            kind=kind, T=T, beta_start=beta_start, beta_end=beta_end, offset=offset
        )

    def build(self) -> NoiseSchedule:
        if self.kind is ScheduleKind.COSINE:
            return build_cosine_schedule(self.T, self.offset)
        return build_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "offset": self.offset,
        }
