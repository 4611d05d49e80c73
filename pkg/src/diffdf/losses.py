"""Training objectives: noise MSE, pixel MSE, semantic feature MSE and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable

import torch
import torch.nn.functional as F

from diffdf.diffusion import predict_x0_from_eps, q_sample
from diffdf.errors import ConfigError
from diffdf.schedule import NoiseSchedule, VarianceMode, coeffs_at
from diffdf.validation import read_bool, read_enum, read_float, read_int, reject_unknown

FeatureFn = Callable[[torch.Tensor], torch.Tensor]


class BorderMode(str, Enum):
    VALID = "valid"
    REFLECT = "reflect"


class SsimConstants(str, Enum):
    LITERAL = "literal"
    CONVENTIONAL = "conventional"


@dataclass(frozen=True)
class LossWeights:
    lambda_pixel: float = 1.0
    lambda_semantic: float = 5.0
    lambda_ssim: float = 10.0

    @classmethod
    def from_dict(cls, data: dict) -> LossWeights:
        prefix = "train.weights"
        reject_unknown(data, ("lambda_pixel", "lambda_semantic", "lambda_ssim"), prefix)
        return cls(
            lambda_pixel=read_float(data, "lambda_pixel", prefix, 1.0, minimum=0.0),
            lambda_semantic=read_float(
                data, "lambda_semantic", prefix, 5.0, minimum=0.0
            ),
            lambda_ssim=read_float(data, "lambda_ssim", prefix, 10.0, minimum=0.0),
        )

    @classmethod
    def parse(cls, text: str) -> LossWeights:
        """Parse the ``pixel,semantic,ssim`` flag form, e.g. ``1,5,10``."""
        parts = [p.strip() for p in text.split(",")]
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise ConfigError(
                f"--weights expects three numbers, got {text!r}"
            ) from None
        if len(values) != 3 or any(v < 0 or not math.isfinite(v) for v in values):
            raise ConfigError(
                f"--weights expects three non-negative numbers, got {text!r}"
            )
        return cls(*values)

    def to_dict(self) -> dict[str, float]:
        return {
            "lambda_pixel": self.lambda_pixel,
            "lambda_semantic": self.lambda_semantic,
            "lambda_ssim": self.lambda_ssim,
        }


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    window_sigma: float = 1.5
    c1: float = 0.01
    c2: float = 0.03
    border_mode: BorderMode = BorderMode.VALID
    constants: SsimConstants = SsimConstants.LITERAL
    rescale: bool = True

    def __post_init__(self) -> None:
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ConfigError("ssim.window_size must be a positive odd integer")

    @classmethod
    def from_dict(cls, data: dict) -> SsimConfig:
        prefix = "ssim"
        reject_unknown(
            data,
            (
                "window_size",
                "window_sigma",
                "c1",
                "c2",
                "border_mode",
                "constants",
                "rescale",
            ),
            prefix,
        )
        return cls(
            window_size=read_int(data, "window_size", prefix, 11, minimum=1),
            window_sigma=read_float(data, "window_sigma", prefix, 1.5, positive=True),
            c1=read_float(data, "c1", prefix, 0.01, positive=True),
            c2=read_float(data, "c2", prefix, 0.03, positive=True),
            border_mode=read_enum(
                data, "border_mode", prefix, BorderMode, BorderMode.VALID
            ),
            constants=read_enum(
                data, "constants", prefix, SsimConstants, SsimConstants.LITERAL
            ),
            rescale=read_bool(data, "rescale", prefix, True),
        )

    def stability_constants(self) -> tuple[float, float]:
        if self.constants is SsimConstants.LITERAL:
            return self.c1, self.c2
        data_range = 1.0 if self.rescale else 2.0
        return (self.c1 * data_range) ** 2, (self.c2 * data_range) ** 2

    def to_dict(self) -> dict[str, Any]:
        return {
            "window_size": self.window_size,
            "window_sigma": self.window_sigma,
            "c1": self.c1,
            "c2": self.c2,
            "border_mode": self.border_mode.value,
            "constants": self.constants.value,
            "rescale": self.rescale,
        }


@dataclass(frozen=True)
class LossBundle:
    simple: float
    pixel: float
    semantic: float
    ssim_loss: float
    total: float

    def to_dict(self) -> dict[str, float]:
        return {
            "simple": self.simple,
            "pixel": self.pixel,
            "semantic": self.semantic,
            "ssim": self.ssim_loss,
            "total": self.total,
        }


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_simple(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    _check_pair(eps, eps_hat)
    return F.mse_loss(eps_hat, eps)


def loss_pixel(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Pixel reconstruction loss; the same noise MSE as :func:`loss_simple`."""
    _check_pair(eps, eps_hat)
    return F.mse_loss(eps_hat, eps)


def loss_semantic(
    extractor: FeatureFn, x_hat0: torch.Tensor, x_clean: torch.Tensor
) -> torch.Tensor:
    with torch.no_grad():
        target = extractor(x_clean)
    features = extractor(x_hat0)
    if features.shape != target.shape:
        raise ValueError(
            f"feature maps differ in shape: {tuple(features.shape)} vs "
            f"{tuple(target.shape)}"
        )
    return F.mse_loss(features, target)


def gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    """Normalized 2-D Gaussian kernel, shape ``(size, size)``."""
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_map(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig) -> torch.Tensor:
    _check_pair(x, y)
    if x.ndim == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    if cfg.rescale:
        x, y = (x + 1.0) / 2.0, (y + 1.0) / 2.0
    channels = x.shape[1]
    size = cfg.window_size
    if cfg.border_mode is BorderMode.REFLECT:
        pad = size // 2
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
        y = F.pad(y, (pad, pad, pad, pad), mode="reflect")
    elif min(x.shape[-2:]) < size:
        raise ValueError(
            f"image {tuple(x.shape[-2:])} is smaller than the {size}x{size} "
            "SSIM window in valid mode"
        )
    window = gaussian_window(size, cfg.window_sigma, x.dtype).to(x.device)
    kernel = window.expand(channels, 1, size, size)

    def blur(img: torch.Tensor) -> torch.Tensor:
        return F.conv2d(img, kernel, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x**2
    sigma_y = blur(y * y) - mu_y**2
    sigma_xy = blur(x * y) - mu_x * mu_y
    c1, c2 = cfg.stability_constants()
    numerator = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    denominator = (mu_x**2 + mu_y**2 + c1) * (sigma_x + sigma_y + c2)
    return numerator / denominator


def ssim(
    x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig | None = None
) -> torch.Tensor:
    """Mean windowed SSIM over positions and channels."""
    return _ssim_map(x, y, cfg or SsimConfig()).mean()


def loss_ssim(
    x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig | None = None
) -> torch.Tensor:
    return 1.0 - ssim(x, y, cfg)


def loss_total(
    simple: torch.Tensor | float,
    pixel: torch.Tensor | float,
    semantic: torch.Tensor | float,
    ssim_loss: torch.Tensor | float,
    w: LossWeights | None = None,
) -> tuple[torch.Tensor, LossBundle]:
    """Weighted sum; returns the differentiable total and a float bundle."""
    w = w or LossWeights()
    total = (
        simple
        + w.lambda_pixel * pixel
        + w.lambda_semantic * semantic
        + w.lambda_ssim * ssim_loss
    )
    total_t = torch.as_tensor(total)
    bundle = LossBundle(
        simple=float(simple),
        pixel=float(pixel),
        semantic=float(semantic),
        ssim_loss=float(ssim_loss),
        total=float(total_t),
    )
    return total_t, bundle


def vlb_weight(
    s: NoiseSchedule, t: int, variance_mode: VarianceMode = VarianceMode.BETA
) -> float:
    """Weight beta_t^2 / (2 sigma_t^2 alpha_t (1 - alpha_bar_t)) of the full term.

    Not used for training; the simplified objective drops it.
    """
    c = coeffs_at(s, t, variance_mode)
    sigma2 = c.posterior_variance
    if sigma2 <= 0:
        raise ValueError(f"reverse variance is zero at t={t}; the weight is undefined")
    alpha = 1.0 - c.beta_t
    return c.beta_t**2 / (2 * sigma2 * alpha * c.sqrt_one_minus_alpha_bar**2)


def compute_losses(
    model: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    extractor: FeatureFn,
    clean: torch.Tensor,
    adversarial: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    s: NoiseSchedule,
    weights: LossWeights,
    ssim_cfg: SsimConfig,
    clamp_x0: bool = True,
) -> tuple[torch.Tensor, LossBundle]:
    """Losses of one training step on a batch of adversarial/clean pairs.

    The adversarial image is noised to ``x_t``; the pixel terms compare the
    noise estimate against ``eps`` while the semantic and SSIM terms compare
    the one-shot ``x0`` estimate against the clean image.
    """
    x_t = q_sample(adversarial, t, eps, s)
    eps_hat = model(x_t, t)
    simple = loss_simple(eps, eps_hat)
    pixel = loss_pixel(eps, eps_hat)
    zero = simple.new_zeros(())
    need_x0 = weights.lambda_semantic > 0 or weights.lambda_ssim > 0
    semantic = ssim_term = zero
    if need_x0:
        x_hat0 = predict_x0_from_eps(x_t, t, eps_hat, s)
        if clamp_x0:
            x_hat0 = x_hat0.clamp(-1.0, 1.0)
        if weights.lambda_semantic > 0:
            semantic = loss_semantic(extractor, x_hat0, clean)
        if weights.lambda_ssim > 0:
            ssim_term = loss_ssim(x_hat0, clean, ssim_cfg)
    return loss_total(simple, pixel, semantic, ssim_term, weights)
