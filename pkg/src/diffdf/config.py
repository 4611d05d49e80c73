"""Application configuration: presets, YAML files, flag and environment overrides.

Sources are merged in increasing precedence::

    preset -> YAML file -> --set section.key=value -> command flags -> environment

``DIFFDF_CONFIG`` names the YAML file when ``--config`` is not given,
``DIFFDF_SEED`` sets the top-level seed and ``DIFFDF__SECTION__KEY=value``
overrides a single key. A top-level ``seed`` is the default for every
section seed that is not set explicitly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from diffdf.attacks import AttackConfig
from diffdf.data import DataConfig
from diffdf.denoiser import UNetConfig
from diffdf.errors import ConfigError
from diffdf.evalkit import EvalConfig
from diffdf.features import FeaturesConfig
from diffdf.losses import SsimConfig
from diffdf.purifier import PurifyConfig
from diffdf.schedule import ScheduleConfig
from diffdf.trainer import TrainConfig
from diffdf.validation import (
    read_bool,
    read_int,
    read_str,
    reject_unknown,
    require_mapping,
)

ENV_CONFIG = "DIFFDF_CONFIG"
ENV_SEED = "DIFFDF_SEED"
ENV_PREFIX = "DIFFDF__"

SECTIONS = (
    "schedule",
    "unet",
    "ssim",
    "features",
    "attack",
    "data",
    "train",
    "purify",
    "eval",
)
TOP_LEVEL = ("seed", "out_dir", "deterministic")

# Section keys that inherit the top-level seed unless set explicitly.
_SEEDED = {
    "attack": "seed",
    "train": "seed",
    "purify": "seed",
    "features": "stub_seed",
}

PRESETS: dict[str, dict[str, Any]] = {
    "test-scale": {
        "schedule": {"kind": "linear", "T": 100},
        "unet": UNetConfig.test_scale().to_dict(),
        "data": {"image_size": 32},
        "train": {"epochs": 5, "batch_size": 8},
        "purify": {"t_star": 10},
    },
    "full-scale": {
        "schedule": {"kind": "linear", "T": 1000},
        "unet": UNetConfig.full_scale().to_dict(),
        "data": {"image_size": 256},
        "train": {"epochs": 15, "batch_size": 8},
        "purify": {"t_star": 100},
    },
}
DEFAULT_PRESET = "test-scale"


@dataclass(frozen=True)
class AppConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    unet: UNetConfig = field(default_factory=UNetConfig.test_scale)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    purify: PurifyConfig = field(default_factory=PurifyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs"
    deterministic: bool = False

    @classmethod
    def from_dict(cls, data: dict) -> AppConfig:
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        reject_unknown(data, SECTIONS + TOP_LEVEL, "config")
        seed = read_int(data, "seed", "config", 0, minimum=0)
        deterministic = read_bool(data, "deterministic", "config", False)
        sections = {}
        for name in SECTIONS:
            section = dict(require_mapping(data.get(name), name))
            seed_key = _SEEDED.get(name)
            if seed_key is not None and "seed" in data:
                section.setdefault(seed_key, seed)
            if name == "purify" and "deterministic" in data:
                section.setdefault("deterministic", deterministic)
            sections[name] = section
        schedule = ScheduleConfig.from_dict(sections["schedule"])
        purify = PurifyConfig.from_dict(sections["purify"])
        if purify.t_star > schedule.T:
            raise ConfigError(
                f"purify.t_star={purify.t_star} exceeds schedule.T={schedule.T}"
            )
        return cls(
            schedule=schedule,
            unet=UNetConfig.from_dict(sections["unet"]),
            ssim=SsimConfig.from_dict(sections["ssim"]),
            features=FeaturesConfig.from_dict(sections["features"]),
            attack=AttackConfig.from_dict(sections["attack"]),
            data=DataConfig.from_dict(sections["data"]),
            train=TrainConfig.from_dict(sections["train"]),
            purify=purify,
            eval=EvalConfig.from_dict(sections["eval"]),
            seed=seed,
            out_dir=read_str(data, "out_dir", "config", "runs") or "runs",
            deterministic=deterministic,
        )

    @classmethod
    def from_yaml(cls, path: Path) -> AppConfig:
        return cls.from_dict(read_yaml(path))

    def to_dict(self) -> dict[str, Any]:
        tree: dict[str, Any] = {
            name: getattr(self, name).to_dict() for name in SECTIONS
        }
        tree.update(
            seed=self.seed, out_dir=self.out_dir, deterministic=self.deterministic
        )
        return tree


def read_yaml(path: Path) -> dict:
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config file '{path}': {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file '{path}' is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(
            f"Config YAML file '{path}' must contain a mapping at the top level"
        )
    return data


def deep_merge(base: dict, update: Mapping) -> dict:
    """Return *base* with *update* merged in; nested mappings merge key by key."""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_scalar(text: str) -> Any:
    """Parse an override value as a YAML scalar (``1e-4``, ``true``, ``[1,2]``)."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _existing_key(node: dict, part: str) -> str:
    if part in node:
        return part
    for key in node:
        if isinstance(key, str) and key.lower() == part.lower():
            return key
    return part


def set_path(tree: dict, dotted: str, value: Any) -> None:
    """Set *value* at a dotted path; existing keys match case-insensitively."""
    parts = [p for p in dotted.split(".") if p]
    if not parts:
        raise ConfigError(f"empty override key {dotted!r}")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(_existing_key(node, part), {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {dotted!r} descends into a non-mapping")
        node = child
    node[_existing_key(node, parts[-1])] = value


def parse_override(item: str) -> tuple[str, Any]:
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"--set expects section.key=value, got {item!r}")
    return key.strip(), parse_scalar(value)


def env_overrides(environ: Mapping[str, str]) -> list[tuple[str, Any]]:
    """Overrides from the environment, sorted by variable name."""
    overrides: list[tuple[str, Any]] = []
    if environ.get(ENV_SEED):
        overrides.append(("seed", parse_scalar(environ[ENV_SEED])))
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX) and len(name) > len(ENV_PREFIX):
            dotted = ".".join(
                part.lower() for part in name[len(ENV_PREFIX) :].split("__")
            )
            overrides.append((dotted, parse_scalar(environ[name])))
    return overrides


def resolve_tree(
    preset: str | None = None,
    config_path: Path | None = None,
    overrides: Sequence[str] = (),
    environ: Mapping[str, str] | None = None,
    flags: Mapping[str, Any] | None = None,
) -> dict:
    environ = environ or {}
    name = preset or DEFAULT_PRESET
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; expected one of: {', '.join(PRESETS)}"
        )
    tree = copy.deepcopy(PRESETS[name])
    path = config_path or environ.get(ENV_CONFIG)
    if path:
        tree = deep_merge(tree, read_yaml(Path(path)))
    for item in overrides:
        set_path(tree, *parse_override(item))
    for dotted, value in (flags or {}).items():
        if value is not None:
            set_path(tree, dotted, value)
    for dotted, value in env_overrides(environ):
        set_path(tree, dotted, value)
    return tree


def load_app_config(
    preset: str | None = None,
    config_path: Path | None = None,
    overrides: Sequence[str] = (),
    environ: Mapping[str, str] | None = None,
    flags: Mapping[str, Any] | None = None,
) -> AppConfig:
    """Resolve and validate the full configuration before any work starts.

    *flags* are dotted keys set by command options; ``None`` values are ignored.
    """
    tree = resolve_tree(preset, config_path, overrides, environ, flags)
    return AppConfig.from_dict(tree)
