"""Closed-form forward noising and the ancestral reverse sampler.

All functions accept a single image (``C x H x W``, or any shape when ``t``
is an int) or a batch (``N x C x H x W``) with one step per item. Steps are
1-based. Nothing here depends on a particular noise-prediction network: the
reverse chain takes any ``predictor(x_t, t) -> eps_hat`` callable.
"""

from __future__ import annotations

from typing import Callable, Union

import torch

from diffdf.schedule import NoiseSchedule, VarianceMode, variance_table

Steps = Union[int, torch.Tensor]
Predictor = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

# Below this alpha_bar the x0 inversion divides by (almost) zero.
MIN_ALPHA_BAR = 1e-12


def _check_steps(t: Steps, s: NoiseSchedule) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() == 0:
            raise ValueError("empty step tensor")
        lo, hi = int(t.min()), int(t.max())
    else:
        if isinstance(t, bool) or not isinstance(t, int):
            raise ValueError(f"step must be an int or tensor, got {t!r}")
        lo = hi = t
    if lo < 1 or hi > s.T:
        raise ValueError(f"step(s) {lo}..{hi} outside 1..{s.T}")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(
            f"{what} shape {tuple(b.shape)} does not match image shape {tuple(a.shape)}"
        )


def _gather(table: torch.Tensor, t: Steps, like: torch.Tensor) -> torch.Tensor:
    """Look up ``table[t - 1]`` and shape it to broadcast against *like*."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        values = table.to(like.device)[t.long().to(like.device) - 1]
        if values.shape[0] != like.shape[0]:
            raise ValueError(
                f"{values.shape[0]} steps given for a batch of {like.shape[0]}"
            )
        values = values.reshape(-1, *([1] * (like.ndim - 1)))
    else:
        values = table[int(t) - 1]
    return values.to(dtype=like.dtype, device=like.device)


def q_sample(
    x0: torch.Tensor, t: Steps, eps: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    """Draw x_t from q(x_t | x_0) given the noise *eps*."""
    _check_steps(t, s)
    _check_same_shape(x0, eps, "noise")
    sqrt_ab = _gather(s.alpha_bar.sqrt(), t, x0)
    sqrt_one_minus_ab = _gather((1.0 - s.alpha_bar).sqrt(), t, x0)
    return sqrt_ab * x0 + sqrt_one_minus_ab * eps


def q_sample_step(
    x_prev: torch.Tensor, t: Steps, eps: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    """One forward step: x_t from x_{t-1}."""
    _check_steps(t, s)
    _check_same_shape(x_prev, eps, "noise")
    sqrt_alpha = _gather(s.alpha.sqrt(), t, x_prev)
    sqrt_beta = _gather(s.beta.sqrt(), t, x_prev)
    return sqrt_alpha * x_prev + sqrt_beta * eps


def predict_x0_from_eps(
    x_t: torch.Tensor, t: Steps, eps_hat: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    _check_steps(t, s)
    _check_same_shape(x_t, eps_hat, "noise estimate")
    alpha_bar = _gather(s.alpha_bar, t, x_t)
    if bool((alpha_bar <= MIN_ALPHA_BAR).any()):
        raise ValueError("alpha_bar is too small to invert the forward process")
    sqrt_one_minus_ab = _gather((1.0 - s.alpha_bar).sqrt(), t, x_t)
    return (x_t - sqrt_one_minus_ab * eps_hat) / alpha_bar.sqrt()


def oracle_eps(
    x_t: torch.Tensor, x0: torch.Tensor, t: Steps, s: NoiseSchedule
) -> torch.Tensor:
    """The noise that maps *x0* to *x_t* in one closed-form jump."""
    _check_steps(t, s)
    _check_same_shape(x_t, x0, "clean image")
    sqrt_ab = _gather(s.alpha_bar.sqrt(), t, x_t)
    sqrt_one_minus_ab = _gather((1.0 - s.alpha_bar).sqrt(), t, x_t)
    return (x_t - sqrt_ab * x0) / sqrt_one_minus_ab


def posterior_mean(
    x0: torch.Tensor, x_t: torch.Tensor, t: Steps, s: NoiseSchedule
) -> torch.Tensor:
    """Mean of q(x_{t-1} | x_t, x_0); at t=1 this is x_0 itself."""
    _check_steps(t, s)
    _check_same_shape(x_t, x0, "clean image")
    alpha_bar = s.alpha_bar
    alpha_bar_prev = s.alpha_bar_prev()
    coef_x0 = alpha_bar_prev.sqrt() * s.beta / (1.0 - alpha_bar)
    coef_xt = s.alpha.sqrt() * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return _gather(coef_x0, t, x_t) * x0 + _gather(coef_xt, t, x_t) * x_t


def reverse_mean(
    x_t: torch.Tensor, t: Steps, eps_hat: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    """Model mean of p(x_{t-1} | x_t) given the predicted noise."""
    _check_steps(t, s)
    _check_same_shape(x_t, eps_hat, "noise estimate")
    recip_sqrt_alpha = _gather(1.0 / s.alpha.sqrt(), t, x_t)
    eps_coef = _gather(s.beta / (1.0 - s.alpha_bar).sqrt(), t, x_t)
    return recip_sqrt_alpha * (x_t - eps_coef * eps_hat)


def p_sample(
    x_t: torch.Tensor,
    t: Steps,
    eps_hat: torch.Tensor,
    z: torch.Tensor | None,
    s: NoiseSchedule,
    variance_mode: VarianceMode = VarianceMode.BETA,
) -> torch.Tensor:
    """One ancestral step; ``z=None`` makes it deterministic.

    No noise is added at t=1 whatever the variance mode.
    """
    mean = reverse_mean(x_t, t, eps_hat, s)
    if z is None:
        return mean
    _check_same_shape(x_t, z, "sampling noise")
    sigma = _gather(variance_table(s, variance_mode).sqrt(), t, x_t)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        keep = (t.to(x_t.device) > 1).to(x_t.dtype).reshape(sigma.shape)
        sigma = sigma * keep
    elif int(t) == 1:
        return mean
    return mean + sigma * z


def reverse_chain(
    x_t: torch.Tensor,
    t_start: int,
    predictor: Predictor,
    s: NoiseSchedule,
    variance_mode: VarianceMode = VarianceMode.BETA,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Run p_sample from *t_start* down to 1 on a batch.

    *generator* ``None`` runs the deterministic chain (no sampling noise).
    """
    _check_steps(t_start, s)
    x = x_t
    batch = x.shape[0]
    for step in range(t_start, 0, -1):
        t = torch.full((batch,), step, dtype=torch.long, device=x.device)
        eps_hat = predictor(x, t)
        z = None
        if generator is not None and step > 1:
            z = torch.randn(
                x.shape, generator=generator, dtype=x.dtype, device=x.device
            )
        x = p_sample(x, t, eps_hat, z, s, variance_mode)
    return x
