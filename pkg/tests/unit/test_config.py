from __future__ import annotations

from pathlib import Path

import pytest

from diffdf.config import (
    PRESETS,
    AppConfig,
    deep_merge,
    env_overrides,
    load_app_config,
    parse_override,
    read_yaml,
    set_path,
)
from diffdf.errors import ConfigError
from diffdf.schedule import ScheduleKind


def _write(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "config.yaml"
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


class TestPresets:
    def test_default_is_test_scale(self) -> None:
        """Without a preset the small configuration is used."""
        cfg = load_app_config()
        assert cfg.schedule.T == 100
        assert cfg.unet.base_channels == 16
        assert cfg.data.image_size == 32
        assert cfg.purify.t_star == 10

    def test_full_scale(self) -> None:
        """full-scale selects T=1000, 256 px crops and 15 epochs."""
        cfg = load_app_config("full-scale")
        assert cfg.schedule.T == 1000
        assert cfg.data.image_size == 256
        assert cfg.train.epochs == 15
        assert cfg.purify.t_star == 100

    def test_unknown_preset(self) -> None:
        """An unknown preset name is a config error listing the choices."""
        with pytest.raises(ConfigError, match=r"test-scale"):
            load_app_config("huge")

    def test_presets_are_not_mutated(self) -> None:
        """Overrides never leak into the preset tables."""
        before = PRESETS["test-scale"]["schedule"]["T"]
        load_app_config(overrides=["schedule.T=50", "purify.t_star=5"])
        assert PRESETS["test-scale"]["schedule"]["T"] == before


# ---------------------------------------------------------------------------
# Sources and precedence
# ---------------------------------------------------------------------------


class TestSources:
    def test_yaml_file(self, tmp_path: Path) -> None:
        """Keys from the YAML file override the preset."""
        path = _write(tmp_path, "schedule:\n  kind: cosine\ntrain:\n  lr: 0.001\n")
        cfg = load_app_config(config_path=path)
        assert cfg.schedule.kind is ScheduleKind.COSINE
        assert cfg.schedule.T == 100
        assert cfg.train.lr == pytest.approx(1e-3)

    def test_config_from_environment(self, tmp_path: Path) -> None:
        """DIFFDF_CONFIG names the file when no path is passed."""
        path = _write(tmp_path, "train:\n  epochs: 2\n")
        cfg = load_app_config(environ={"DIFFDF_CONFIG": str(path)})
        assert cfg.train.epochs == 2

    def test_set_overrides_file(self, tmp_path: Path) -> None:
        """--set wins over the YAML file."""
        path = _write(tmp_path, "train:\n  epochs: 2\n")
        cfg = load_app_config(config_path=path, overrides=["train.epochs=3"])
        assert cfg.train.epochs == 3

    def test_flags_override_set(self) -> None:
        """Command flags win over --set."""
        cfg = load_app_config(
            overrides=["train.epochs=3"], flags={"train.epochs": 4, "train.lr": None}
        )
        assert cfg.train.epochs == 4
        assert cfg.train.lr == pytest.approx(1e-4)

    def test_environment_wins(self) -> None:
        """Environment overrides have the highest precedence."""
        cfg = load_app_config(
            flags={"train.epochs": 4}, environ={"DIFFDF__TRAIN__EPOCHS": "6"}
        )
        assert cfg.train.epochs == 6

    def test_environment_key_matches_case_insensitively(self) -> None:
        """DIFFDF__SCHEDULE__T reaches the upper-case T key."""
        cfg = load_app_config(environ={"DIFFDF__SCHEDULE__T": "200"})
        assert cfg.schedule.T == 200
        assert "t" not in cfg.to_dict()["schedule"]

    def test_env_seed(self) -> None:
        """DIFFDF_SEED sets the top-level seed."""
        cfg = load_app_config(environ={"DIFFDF_SEED": "11"})
        assert cfg.seed == 11

    def test_list_override(self) -> None:
        """Override values parse as YAML scalars and lists."""
        cfg = load_app_config(overrides=["train.weights=[1, 0, 10]"])
        assert cfg.train.weights.lambda_semantic == 0.0
        assert cfg.train.weights.lambda_ssim == 10.0


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


class TestValidation:
    def test_seed_propagates_to_sections(self) -> None:
        """A top-level seed is the default for every section seed."""
        cfg = load_app_config(overrides=["seed=7"])
        assert cfg.attack.seed == 7
        assert cfg.train.seed == 7
        assert cfg.purify.seed == 7
        assert cfg.features.stub_seed == 7

    def test_explicit_section_seed_kept(self) -> None:
        """A section seed set explicitly is not replaced."""
        cfg = load_app_config(overrides=["seed=7", "train.seed=3"])
        assert cfg.train.seed == 3
        assert cfg.attack.seed == 7

    def test_deterministic_propagates_to_purify(self) -> None:
        """A top-level deterministic flag is the purifier default."""
        cfg = load_app_config(overrides=["deterministic=true"])
        assert cfg.purify.deterministic is True

    def test_explicit_purify_deterministic_kept(self) -> None:
        """purify.deterministic set explicitly is not replaced."""
        cfg = load_app_config(
            overrides=["deterministic=true", "purify.deterministic=false"]
        )
        assert cfg.deterministic is True
        assert cfg.purify.deterministic is False

    def test_t_star_beyond_horizon(self) -> None:
        """purify.t_star greater than schedule.T is rejected up front."""
        with pytest.raises(ConfigError, match=r"t_star"):
            load_app_config(overrides=["schedule.T=20", "purify.t_star=21"])

    def test_unknown_section(self) -> None:
        """Unknown top-level keys are rejected."""
        with pytest.raises(ConfigError, match=r"bogus"):
            load_app_config(overrides=["bogus.key=1"])

    def test_unknown_key(self) -> None:
        """Unknown keys inside a section are rejected."""
        with pytest.raises(ConfigError, match=r"lr_max"):
            load_app_config(overrides=["train.lr_max=1"])

    def test_not_a_mapping(self) -> None:
        """The configuration root must be a mapping."""
        with pytest.raises(ConfigError, match=r"mapping"):
            AppConfig.from_dict([1, 2])  # type: ignore[arg-type]

    def test_to_dict_round_trips(self) -> None:
        """to_dict feeds back into from_dict unchanged."""
        cfg = load_app_config("full-scale", overrides=["seed=5"])
        assert AppConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


class TestHelpers:
    def test_read_yaml_missing(self, tmp_path: Path) -> None:
        """A missing file is a config error naming it."""
        with pytest.raises(ConfigError, match=r"cannot read"):
            read_yaml(tmp_path / "nope.yaml")

    def test_read_yaml_invalid(self, tmp_path: Path) -> None:
        """Malformed YAML is a config error."""
        with pytest.raises(ConfigError, match=r"not valid YAML"):
            read_yaml(_write(tmp_path, "train: [1, 2\n"))

    def test_read_yaml_scalar_root(self, tmp_path: Path) -> None:
        """A YAML scalar at the top level is rejected."""
        with pytest.raises(ConfigError, match=r"mapping"):
            read_yaml(_write(tmp_path, "42\n"))

    def test_read_yaml_empty(self, tmp_path: Path) -> None:
        """An empty file is an empty mapping."""
        assert read_yaml(_write(tmp_path, "")) == {}

    def test_deep_merge(self) -> None:
        """Nested mappings merge key by key; the base is left untouched."""
        base = {"a": {"x": 1, "y": 2}, "b": 3}
        merged = deep_merge(base, {"a": {"y": 5}, "c": 4})
        assert merged == {"a": {"x": 1, "y": 5}, "b": 3, "c": 4}
        assert base["a"]["y"] == 2

    def test_set_path_creates_sections(self) -> None:
        """Missing intermediate sections are created."""
        tree: dict = {}
        set_path(tree, "train.lr", 0.5)
        assert tree == {"train": {"lr": 0.5}}

    def test_set_path_through_scalar(self) -> None:
        """Descending into a scalar is an error."""
        with pytest.raises(ConfigError, match=r"non-mapping"):
            set_path({"seed": 1}, "seed.value", 2)

    def test_parse_override_requires_equals(self) -> None:
        """--set without '=' is rejected."""
        with pytest.raises(ConfigError, match=r"section.key=value"):
            parse_override("train.lr")

    def test_parse_override_scalars(self) -> None:
        """Values are parsed as YAML scalars."""
        assert parse_override("train.lr=0.001") == ("train.lr", 0.001)
        assert parse_override("deterministic=true") == ("deterministic", True)

    def test_env_overrides_sorted(self) -> None:
        """Environment overrides are ordered by variable name, seed first."""
        found = env_overrides(
            {
                "DIFFDF__TRAIN__LR": "0.1",
                "DIFFDF__ATTACK__STEPS": "3",
                "DIFFDF_SEED": "2",
                "HOME": "/root",
            }
        )
        assert found == [("seed", 2), ("attack.steps", 3), ("train.lr", 0.1)]
