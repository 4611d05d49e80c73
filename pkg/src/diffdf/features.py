"""Frozen semantic feature extractors used by the semantic loss and attacks."""

from __future__ import annotations

import copy
import logging
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from diffdf.errors import CheckpointError, ConfigError
from diffdf.validation import read_int, read_str, reject_unknown

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ExtractorKind(str, Enum):
    BACKBONE = "pretrained_backbone_stage4"
    STUB = "deterministic_stub"


@dataclass(frozen=True)
class FeaturesConfig:
    backbone_path: str | None = None
    stub_seed: int = 0
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    @classmethod
    def from_dict(cls, data: dict) -> FeaturesConfig:
        prefix = "features"
        reject_unknown(data, ("backbone_path", "stub_seed", "mean", "std"), prefix)
        return cls(
            backbone_path=read_str(data, "backbone_path", prefix, None),
            stub_seed=read_int(data, "stub_seed", prefix, 0, minimum=0),
            mean=_read_triple(data, "mean", IMAGENET_MEAN),
            std=_read_triple(data, "std", IMAGENET_STD, positive=True),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "backbone_path": self.backbone_path,
            "stub_seed": self.stub_seed,
            "mean": list(self.mean),
            "std": list(self.std),
        }


def _read_triple(
    data: dict, key: str, default: tuple[float, float, float], positive: bool = False
) -> tuple[float, float, float]:
    value = data.get(key, default)
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 3
        or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
    ):
        raise ConfigError(f"features.{key} must be a list of three numbers")
    if positive and any(v <= 0 for v in value):
        raise ConfigError(f"features.{key} entries must be positive")
    return (float(value[0]), float(value[1]), float(value[2]))


def _stub_layers() -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(3, 16, 3, stride=2, padding=1),
        nn.Tanh(),
        nn.Conv2d(16, 32, 3, stride=2, padding=1),
        nn.Tanh(),
        nn.Conv2d(32, 32, 3, stride=1, padding=1),
    )


def _backbone_layers(weights_path: Path) -> nn.Sequential:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    try:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    except (OSError, RuntimeError, KeyError) as exc:
        raise CheckpointError(
            f"cannot load backbone weights from {weights_path}: {exc}"
        ) from exc
    # Everything up to and including the conv4_x stage.
    return nn.Sequential(
        net.conv1,
        net.bn1,
        net.relu,
        net.maxpool,
        net.layer1,
        net.layer2,
        net.layer3,
    )


class FeatureExtractor(nn.Module):
    """phi(x): image in [-1, 1] -> feature map. Weights never change."""

    def __init__(
        self,
        kind: ExtractorKind,
        layers: nn.Sequential,
        *,
        channels: int,
        reduction: int,
        min_size: int,
        source: str | int,
        mean: tuple[float, float, float] | None = None,
        std: tuple[float, float, float] | None = None,
    ) -> None:
        super().__init__()
        self.kind = kind
        self.layers = layers
        self.channels = channels
        self.reduction = reduction
        self.min_size = min_size
        self.source = source
        self.normalization = (mean, std) if mean is not None else None
        if mean is not None and std is not None:
            self.register_buffer("mean", torch.tensor(mean).reshape(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor(std).reshape(1, 3, 1, 1))
        self._dtype_copies: dict[torch.dtype, nn.Sequential] = {}
        self._copies_lock = threading.Lock()
        for param in self.parameters():
            param.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True) -> FeatureExtractor:
        # BatchNorm statistics in the backbone must stay frozen too.
        return super().train(False)

    def _layers_for(self, dtype: torch.dtype) -> nn.Sequential:
        # Shared across worker threads; self.layers keeps its construction dtype.
        if next(self.layers.parameters()).dtype == dtype:
            return self.layers
        with self._copies_lock:
            layers = self._dtype_copies.get(dtype)
            if layers is None:
                layers = copy.deepcopy(self.layers).to(dtype=dtype)
                self._dtype_copies[dtype] = layers
        return layers

    @property
    def output_spec(self) -> tuple[int, int]:
        return self.channels, self.reduction

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        if min(x.shape[-2:]) < self.min_size:
            raise ValueError(
                f"{self.kind.value} needs inputs of at least "
                f"{self.min_size}x{self.min_size}, got {tuple(x.shape[-2:])}"
            )
        layers = self._layers_for(x.dtype)
        if self.normalization is not None:
            x = ((x + 1.0) / 2.0 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = layers(x)
        return out[0] if squeeze else out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.extract(x)

    def descriptor(self) -> dict[str, Any]:
        desc: dict[str, Any] = {
            "kind": self.kind.value,
            "channels": self.channels,
            "reduction": self.reduction,
        }
        if self.kind is ExtractorKind.STUB:
            desc["stub_seed"] = self.source
        else:
            desc["backbone_path"] = str(self.source)
        if self.normalization is not None:
            mean, std = self.normalization
            desc["mean"] = list(mean or ())
            desc["std"] = list(std or ())
        return desc


def extract(fe: FeatureExtractor, x: torch.Tensor) -> torch.Tensor:
    return fe.extract(x)


def build_stub_extractor(seed: int) -> FeatureExtractor:
    """Fixed-seed three-layer strided conv stack: 32 channels at 1/4 resolution."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        layers = _stub_layers()
    return FeatureExtractor(
        ExtractorKind.STUB,
        layers,
        channels=32,
        reduction=4,
        min_size=4,
        source=seed,
    )


def build_backbone_extractor(
    weights_path: Path,
    mean: tuple[float, float, float] = IMAGENET_MEAN,
    std: tuple[float, float, float] = IMAGENET_STD,
) -> FeatureExtractor:
    return FeatureExtractor(
        ExtractorKind.BACKBONE,
        _backbone_layers(weights_path),
        channels=1024,
        reduction=16,
        min_size=32,
        source=str(weights_path),
        mean=mean,
        std=std,
    )


def build_feature_extractor(cfg: FeaturesConfig) -> FeatureExtractor:
    """Backbone when ``backbone_path`` names a file, stub otherwise.

    Weights are only ever read from disk; nothing is downloaded.
    """
    if cfg.backbone_path:
        path = Path(cfg.backbone_path).expanduser()
        if path.is_file():
            logger.info("Loading backbone feature extractor from %s", path)
            return build_backbone_extractor(path, cfg.mean, cfg.std)
        logger.warning(
            "Backbone weights %s not found; falling back to the stub extractor "
            "(seed %d)",
            path,
            cfg.stub_seed,
        )
    else:
        logger.debug("No backbone configured; using the stub extractor")
    return build_stub_extractor(cfg.stub_seed)
