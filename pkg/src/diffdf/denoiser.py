"""The noise-prediction U-Net.

Encoder stages are two 3x3 conv + GroupNorm + SiLU layers followed by a
stride-2 conv; the sinusoidal time embedding goes through two fully
connected layers and a per-stage projection that is added to the feature
maps. The decoder mirrors the encoder with stride-2 transposed convs and
channel-wise skip concatenation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from diffdf.errors import ConfigError
from diffdf.validation import get, read_bool, read_int, reject_unknown

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    norm_groups: int = 32
    time_embed_dim: int = 128
    decoder_time_injection: bool = False

    @property
    def num_stages(self) -> int:
        return len(self.channel_multipliers)

    @property
    def stage_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def __post_init__(self) -> None:
        if not self.channel_multipliers:
            raise ConfigError("unet.channel_multipliers must not be empty")
        for channels in self.stage_channels:
            if channels % self.norm_groups != 0:
                raise ConfigError(
                    f"unet stage width {channels} is not divisible by "
                    f"unet.norm_groups={self.norm_groups}"
                )
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("unet.time_embed_dim must be an even number >= 2")

    @classmethod
    def full_scale(cls) -> UNetConfig:
        return cls()

    @classmethod
    def test_scale(cls) -> UNetConfig:
        return cls(base_channels=16, norm_groups=8, time_embed_dim=64)

    @classmethod
    def from_dict(cls, data: dict) -> UNetConfig:
        prefix = "unet"
        reject_unknown(
            data,
            (
                "in_channels",
                "base_channels",
                "channel_multipliers",
                "norm_groups",
                "time_embed_dim",
                "decoder_time_injection",
            ),
            prefix,
        )
        multipliers = get(data, "channel_multipliers", [1, 2, 4, 8])
        if not isinstance(multipliers, (list, tuple)) or not all(
            isinstance(m, int) and not isinstance(m, bool) and m > 0
            for m in multipliers
        ):
            raise ConfigError(
                "unet.channel_multipliers must be a list of positive integers"
            )
        return cls(
            in_channels=read_int(data, "in_channels", prefix, 3, minimum=1),
            base_channels=read_int(data, "base_channels", prefix, 64, minimum=1),
            channel_multipliers=tuple(multipliers),
            norm_groups=read_int(data, "norm_groups", prefix, 32, minimum=1),
            time_embed_dim=read_int(data, "time_embed_dim", prefix, 128, minimum=2),
            decoder_time_injection=read_bool(
                data, "decoder_time_injection", prefix, False
            ),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "norm_groups": self.norm_groups,
            "time_embed_dim": self.time_embed_dim,
            "decoder_time_injection": self.decoder_time_injection,
        }


def time_embedding(t: int | torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of step(s) *t*: ``[sin(t*w_k), cos(t*w_k)]``.

    Returns ``(dim,)`` for an int step and ``(N, dim)`` for a step tensor.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"time embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    steps = torch.as_tensor(t, dtype=torch.float64)
    args = steps.reshape(-1, 1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb[0] if steps.ndim == 0 else emb


class ConvBlock(nn.Module):
    """conv -> GroupNorm -> SiLU, twice; optional time injection after the first."""

    def __init__(
        self, in_ch: int, out_ch: int, groups: int, time_dim: int | None
    ) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=1, padding=1)
        self.norm1 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None) -> torch.Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        if self.time_proj is not None and temb is not None:
            h = h + self.time_proj(temb)[:, :, None, None]
        return F.silu(self.norm2(self.conv2(h)))


class Denoiser(nn.Module):
    """eps_theta(x_t, t) bound to the schedule it was trained with."""

    def __init__(self, config: UNetConfig, schedule_fingerprint: str | None = None):
        super().__init__()
        self.config = config
        self.schedule_fingerprint = schedule_fingerprint
        chans = config.stage_channels
        groups = config.norm_groups
        hidden = config.time_embed_dim * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_embed_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
        )

        self.encoder = nn.ModuleList()
        self.downsample = nn.ModuleList()
        in_ch = config.in_channels
        for ch in chans:
            self.encoder.append(ConvBlock(in_ch, ch, groups, hidden))
            self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            in_ch = ch

        self.bottleneck = nn.ModuleList(
            [ConvBlock(chans[-1], chans[-1], groups, hidden) for _ in range(2)]
        )

        decoder_time = hidden if config.decoder_time_injection else None
        self.upsample = nn.ModuleList()
        self.decoder = nn.ModuleList()
        in_ch = chans[-1]
        for ch in reversed(chans):
            self.upsample.append(nn.ConvTranspose2d(in_ch, ch, 2, stride=2))
            self.decoder.append(ConvBlock(2 * ch, ch, groups, decoder_time))
            in_ch = ch

        self.head = nn.Conv2d(chans[0], config.in_channels, 3, padding=1)

    @property
    def min_multiple(self) -> int:
        return 2**self.config.num_stages

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        h_dim, w_dim = x.shape[-2:]
        if h_dim % self.min_multiple or w_dim % self.min_multiple:
            raise ValueError(
                f"spatial size {h_dim}x{w_dim} is not divisible by {self.min_multiple}"
            )
        temb = time_embedding(t, self.config.time_embed_dim).to(x.dtype)
        temb = self.time_mlp(temb.to(x.device))

        skips: list[torch.Tensor] = []
        h = x
        for block, down in zip(self.encoder, self.downsample):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        for block in self.bottleneck:
            h = block(h, temb)
        for up, block in zip(self.upsample, self.decoder):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.head(h)


def build_denoiser(
    config: UNetConfig, seed: int, schedule_fingerprint: str | None = None
) -> Denoiser:
    """Construct a denoiser whose initial weights depend only on *seed*."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(config, schedule_fingerprint)
    logger.info(
        "Built denoiser: %d stages, %s channels, %.2fM parameters",
        config.num_stages,
        config.stage_channels,
        model.parameter_count() / 1e6,
    )
    return model


def predict_noise(m: Denoiser, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    if x_t.ndim != 4:
        raise ValueError(f"expected an N x C x H x W batch, got {tuple(x_t.shape)}")
    if x_t.shape[1] != m.config.in_channels:
        raise ValueError(
            f"expected {m.config.in_channels} channels, got {x_t.shape[1]}"
        )
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.shape[0] == 1 and x_t.shape[0] > 1:
        t = t.expand(x_t.shape[0])
    if t.shape[0] != x_t.shape[0]:
        raise ValueError(f"{t.shape[0]} steps given for a batch of {x_t.shape[0]}")
    if int(t.min()) < 1:
        raise ValueError("steps must be >= 1")
    return m(x_t, t)


@dataclass
class ParameterReport:
    total: int
    per_module: dict[str, int] = field(default_factory=dict)


def parameter_report(m: Denoiser) -> ParameterReport:
    per_module = {
        name: sum(p.numel() for p in child.parameters())
        for name, child in m.named_children()
    }
    return ParameterReport(total=m.parameter_count(), per_module=per_module)
