"""Norm-bounded adversarial perturbations used to build clean/adversarial pairs.

Gradient attacks run projected gradient ascent on any differentiable
surrogate. The structured families are cheap seeded stand-ins with a known
max-norm. Every pair records the generator, norm, budget and seed in
``meta`` so manifests can be audited later with :func:`verify_budget`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

import torch
import torch.nn.functional as F

from diffdf.errors import ConfigError, NumericalError
from diffdf.ncc import ncc_response, response_peak
from diffdf.validation import read_enum, read_float, read_int, reject_unknown

logger = logging.getLogger(__name__)

LossFn = Callable[[torch.Tensor], torch.Tensor]

# Max per-pixel error introduced by storing a [-1, 1] image as 8-bit PNG.
PNG_QUANTIZATION = 1.0 / 127.5


class Norm(str, Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"


class AttackKind(str, Enum):
    GRADIENT = "gradient"
    TRACKER = "tracker"
    LOWFREQ = "lowfreq"
    CHECKER = "checker"
    PATCH = "patch"
    GAUSSIAN = "gaussian"

    @property
    def structured(self) -> bool:
        return self not in (AttackKind.GRADIENT, AttackKind.TRACKER)


class AttackTarget(str, Enum):
    SEARCH = "search"
    TEMPLATE = "template"
    BOTH = "both"


@dataclass(frozen=True)
class PerturbationBudget:
    norm: Norm = Norm.LINF
    epsilon: float = 0.06
    steps: int = 10
    step_size: float = 0.015

    @classmethod
    def from_dict(cls, data: dict, prefix: str = "attack.budget") -> PerturbationBudget:
        reject_unknown(data, ("norm", "epsilon", "steps", "step_size"), prefix)
        return cls(
            norm=read_enum(data, "norm", prefix, Norm, Norm.LINF),
            epsilon=read_float(data, "epsilon", prefix, 0.06, minimum=0.0),
            steps=read_int(data, "steps", prefix, 10, minimum=1),
            step_size=read_float(data, "step_size", prefix, 0.015, positive=True),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "norm": self.norm.value,
            "epsilon": self.epsilon,
            "steps": self.steps,
            "step_size": self.step_size,
        }


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind = AttackKind.TRACKER
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)
    target: AttackTarget = AttackTarget.SEARCH
    temperature: float = 0.05
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> AttackConfig:
        prefix = "attack"
        reject_unknown(
            data, ("kind", "budget", "target", "temperature", "seed"), prefix
        )
        budget = data.get("budget") or {}
        if not isinstance(budget, dict):
            raise ConfigError("attack.budget must be a mapping")
        return cls(
            kind=read_enum(data, "kind", prefix, AttackKind, AttackKind.TRACKER),
            budget=PerturbationBudget.from_dict(budget),
            target=read_enum(data, "target", prefix, AttackTarget, AttackTarget.SEARCH),
            temperature=read_float(data, "temperature", prefix, 0.05, positive=True),
            seed=read_int(data, "seed", prefix, 0, minimum=0),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "budget": self.budget.to_dict(),
            "target": self.target.value,
            "temperature": self.temperature,
            "seed": self.seed,
        }


@dataclass
class AdversarialPair:
    clean: torch.Tensor
    adversarial: torch.Tensor
    meta: dict[str, Any] = field(default_factory=dict)
    history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.clean.shape != self.adversarial.shape:
            raise ValueError(
                f"clean {tuple(self.clean.shape)} and adversarial "
                f"{tuple(self.adversarial.shape)} shapes differ"
            )

    @property
    def delta(self) -> torch.Tensor:
        return self.adversarial - self.clean


def _flat(delta: torch.Tensor) -> torch.Tensor:
    """Rows of per-item values: a batch is split per item, anything else is one item."""
    if delta.ndim == 4:
        return delta.reshape(delta.shape[0], -1)
    return delta.reshape(1, -1)


def perturbation_norm(delta: torch.Tensor, norm: Norm) -> torch.Tensor:
    """Per-item p-norm (one value for an unbatched tensor)."""
    flat = _flat(delta)
    norm = Norm(norm)
    if norm is Norm.LINF:
        return flat.abs().amax(dim=1)
    if norm is Norm.L2:
        return flat.pow(2).sum(dim=1).sqrt()
    return flat.abs().sum(dim=1)


def project_budget(delta: torch.Tensor, b: PerturbationBudget) -> torch.Tensor:
    """Bring *delta* back inside the p-ball of radius ``b.epsilon``.

    linf clamps elementwise; l2 and l1 rescale items whose norm exceeds the
    radius, leaving everything already inside the ball untouched.
    """
    eps = b.epsilon
    if b.norm is Norm.LINF:
        return delta.clamp(-eps, eps)
    norms = perturbation_norm(delta, b.norm)
    scale = torch.where(
        norms > eps, eps / norms.clamp_min(1e-30), torch.ones_like(norms)
    )
    if delta.ndim == 4:
        return delta * scale.reshape(-1, 1, 1, 1)
    return delta * scale[0]


def _ascent_direction(grad: torch.Tensor, norm: Norm) -> torch.Tensor:
    if norm is Norm.LINF:
        return grad.sign()
    lengths = _flat(grad).pow(2).sum(dim=1).sqrt().clamp_min(1e-30)
    if grad.ndim == 4:
        return grad / lengths.reshape(-1, 1, 1, 1)
    return grad / lengths[0]


def _random_start(
    x: torch.Tensor, b: PerturbationBudget, generator: torch.Generator
) -> torch.Tensor:
    noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1
    delta = project_budget(noise.to(x.device) * b.epsilon, b)
    return (x + delta).clamp(-1.0, 1.0) - x


def _meta(generator: str, b: PerturbationBudget, seed: int, **extra: Any) -> dict:
    return {
        "generator": generator,
        "norm": b.norm.value,
        "epsilon": b.epsilon,
        "steps": b.steps,
        "step_size": b.step_size,
        "seed": seed,
        **extra,
    }


def gradient_attack(
    loss_fn: LossFn,
    x: torch.Tensor,
    b: PerturbationBudget,
    seed: int,
    *,
    random_start: bool = True,
    generator_name: str = "pgd",
) -> AdversarialPair:
    """Projected gradient ascent on ``loss_fn`` inside the budget ball.

    The best iterate seen so far is returned, so the recorded loss history
    never decreases and the result scores at least as high as *x*.
    """
    x = x.detach()
    meta = _meta(generator_name, b, seed)
    if b.epsilon == 0:
        return AdversarialPair(x.clone(), x.clone(), meta, [])

    def evaluate(delta: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        delta = delta.detach().requires_grad_(True)
        loss = loss_fn(x + delta)
        (grad,) = torch.autograd.grad(loss, delta)
        return loss.detach(), grad

    generator = torch.Generator().manual_seed(seed)
    best_delta = torch.zeros_like(x)
    best_loss = loss_fn(x).detach()
    history = [float(best_loss)]
    delta = _random_start(x, b, generator) if random_start else best_delta.clone()

    for step in range(b.steps + 1):
        loss, grad = evaluate(delta)
        if not torch.isfinite(loss) or not bool(torch.isfinite(grad).all()):
            raise NumericalError(
                "non-finite loss or gradient during gradient attack",
                {"step": step, "loss": float(loss), "norm": b.norm.value},
            )
        if loss > best_loss:
            best_loss, best_delta = loss, delta.detach().clone()
        history.append(float(best_loss))
        if step == b.steps:
            break
        delta = project_budget(delta + b.step_size * _ascent_direction(grad, b.norm), b)
        delta = (x + delta).clamp(-1.0, 1.0) - x

    adversarial = (x + best_delta).clamp(-1.0, 1.0)
    logger.debug(
        "%s attack: loss %.6g -> %.6g over %d steps",
        generator_name,
        history[0],
        history[-1],
        b.steps,
    )
    return AdversarialPair(x.clone(), adversarial, meta, history)


def feature_distance_loss(
    extractor: Callable[[torch.Tensor], torch.Tensor], x_clean: torch.Tensor
) -> LossFn:
    """Surrogate ``||phi(x') - phi(x)||^2`` for feature-space attacks."""
    with torch.no_grad():
        target = extractor(x_clean.detach())

    def loss(x_adv: torch.Tensor) -> torch.Tensor:
        return (extractor(x_adv) - target).pow(2).sum()

    return loss


def _peak_suppression_loss(
    clean_response: torch.Tensor, radius: int, temperature: float
) -> Callable[[torch.Tensor], torch.Tensor]:
    peak_r, peak_c = response_peak(clean_response)
    rows = torch.arange(clean_response.shape[0]).reshape(-1, 1)
    cols = torch.arange(clean_response.shape[1]).reshape(1, -1)
    near = ((rows - peak_r).abs() <= radius) & ((cols - peak_c).abs() <= radius)

    def loss(response: torch.Tensor) -> torch.Tensor:
        off_peak = response.masked_fill(near.to(response.device), float("-inf"))
        if bool(near.all()):
            distractor = response.new_zeros(())
        else:
            distractor = temperature * torch.logsumexp(
                off_peak.reshape(-1) / temperature, dim=0
            )
        return distractor - response[peak_r, peak_c]

    return loss


def tracker_attack(
    template: torch.Tensor,
    search: torch.Tensor,
    b: PerturbationBudget,
    seed: int,
    temperature: float = 0.05,
    target: AttackTarget = AttackTarget.SEARCH,
) -> AdversarialPair:
    """Attack the correlation tracker's matching step.

    Perturbs the search region (or the template) so the response at the
    clean peak drops while off-peak responses rise. The returned pair holds
    the attacked input.
    """
    target = AttackTarget(target)
    if target is AttackTarget.BOTH:
        raise ValueError("tracker_attack perturbs one input; attack each side in turn")
    template = template.detach()
    search = search.detach()
    with torch.no_grad():
        clean_response = ncc_response(template, search)
    radius = max(1, min(template.shape[-2:]) // 4)
    objective = _peak_suppression_loss(clean_response, radius, temperature)

    def loss_fn(attacked: torch.Tensor) -> torch.Tensor:
        if target is AttackTarget.SEARCH:
            return objective(ncc_response(template, attacked))
        return objective(ncc_response(attacked, search))

    x = search if target is AttackTarget.SEARCH else template
    pair = gradient_attack(loss_fn, x, b, seed, generator_name="tracker-ncc")
    pair.meta["target"] = target.value
    pair.meta["temperature"] = temperature
    return pair


def _checker(shape: torch.Size, period: int) -> torch.Tensor:
    h, w = shape[-2:]
    half = period // 2
    rows = (torch.arange(h) // half).reshape(-1, 1)
    cols = (torch.arange(w) // half).reshape(1, -1)
    return 1.0 - 2.0 * ((rows + cols) % 2).to(torch.float64)


def structured_perturbation(
    x: torch.Tensor, kind: AttackKind | str, strength: float, seed: int
) -> AdversarialPair:
    """Seeded structured perturbation whose max-norm is at most *strength*."""
    kind = AttackKind(kind)
    if not kind.structured:
        raise ValueError(f"{kind.value} is not a structured perturbation kind")
    if strength < 0 or not math.isfinite(strength):
        raise ValueError(
            f"strength must be a finite non-negative number, got {strength}"
        )
    x = x.detach()
    generator = torch.Generator().manual_seed(seed)
    dtype = torch.float64
    shape = x.shape
    h, w = shape[-2:]
    extra: dict[str, Any] = {}

    if kind is AttackKind.GAUSSIAN:
        delta = torch.randn(shape, generator=generator, dtype=dtype) * (strength / 3)
        delta = delta.clamp(-strength, strength)
    elif kind is AttackKind.CHECKER:
        period = 2 * int(torch.randint(1, 5, (1,), generator=generator))
        sign = 1.0 if float(torch.rand(1, generator=generator)) < 0.5 else -1.0
        delta = (sign * strength * _checker(shape, period)).expand(shape).clone()
        extra = {"period": period, "sign": sign}
    elif kind is AttackKind.LOWFREQ:
        channels = shape[-3] if len(shape) >= 3 else 1
        coarse = torch.rand(1, channels, 4, 4, generator=generator, dtype=dtype) * 2 - 1
        smooth = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=True)
        peak = smooth.abs().amax().clamp_min(1e-12)
        delta = (smooth[0] * (strength / peak)).expand(shape).clone()
    else:
        side = max(1, min(h, w) // 4)
        top = int(torch.randint(0, h - side + 1, (1,), generator=generator))
        left = int(torch.randint(0, w - side + 1, (1,), generator=generator))
        signs = torch.randint(0, 2, shape, generator=generator).to(dtype) * 2 - 1
        delta = torch.zeros(shape, dtype=dtype)
        window = (..., slice(top, top + side), slice(left, left + side))
        delta[window] = strength * signs[window]
        extra = {"patch": [left, top, side, side]}

    budget = PerturbationBudget(Norm.LINF, strength, 1, max(strength, 1e-12))
    meta = _meta(f"structured:{kind.value}", budget, seed, **extra)
    adversarial = (x + delta.to(x.dtype).to(x.device)).clamp(-1.0, 1.0)
    return AdversarialPair(x.clone(), adversarial, meta)


def verify_budget(pair: AdversarialPair, *, quantized: bool = False) -> bool:
    """Check ``||adv - clean||_p <= epsilon`` and the [-1, 1] range post hoc.

    ``quantized`` allows for the rounding of pairs reloaded from 8-bit PNGs.
    """
    norm = Norm(pair.meta["norm"])
    epsilon = float(pair.meta["epsilon"])
    delta = pair.delta.to(torch.float64)
    slack = 1e-6
    if quantized:
        per_item = _flat(delta).shape[1]
        pixel_slack = PNG_QUANTIZATION
        if norm is Norm.LINF:
            slack += pixel_slack
        elif norm is Norm.L2:
            slack += pixel_slack * math.sqrt(per_item)
        else:
            slack += pixel_slack * per_item
    within = bool((perturbation_norm(delta, norm) <= epsilon + slack).all())
    in_range = bool(
        (pair.adversarial.abs() <= 1.0 + (PNG_QUANTIZATION if quantized else 0)).all()
    )
    return within and in_range
