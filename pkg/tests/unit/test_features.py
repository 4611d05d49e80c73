from __future__ import annotations

import logging

import pytest
import torch

from diffdf.errors import ConfigError
from diffdf.features import (
    ExtractorKind,
    FeaturesConfig,
    build_feature_extractor,
    build_stub_extractor,
    extract,
)


class TestStubExtractor:
    def test_output_shape(self) -> None:
        """32 channels at a quarter of the input resolution."""
        fe = build_stub_extractor(0)
        assert extract(fe, torch.zeros(2, 3, 32, 32)).shape == (2, 32, 8, 8)
        assert fe.output_spec == (32, 4)

    def test_single_image_is_squeezed(self) -> None:
        """A C x H x W input gives a C x h x w output."""
        fe = build_stub_extractor(0)
        assert extract(fe, torch.zeros(3, 16, 16)).shape == (32, 4, 4)

    def test_weights_frozen(self) -> None:
        """No parameter requires grad and train() keeps eval mode."""
        fe = build_stub_extractor(0)
        fe.train()
        assert not fe.training
        assert not any(p.requires_grad for p in fe.parameters())

    def test_gradient_flows_to_input(self) -> None:
        """Gradients reach the image even though weights are frozen."""
        fe = build_stub_extractor(0)
        x = torch.rand(1, 3, 16, 16, requires_grad=True)
        extract(fe, x).sum().backward()
        assert x.grad is not None
        assert float(x.grad.abs().sum()) > 0

    def test_seed_determines_weights(self) -> None:
        """Same seed gives identical features; another seed does not."""
        x = torch.rand(1, 3, 16, 16)
        a = extract(build_stub_extractor(5), x)
        b = extract(build_stub_extractor(5), x)
        c = extract(build_stub_extractor(6), x)
        assert torch.equal(a, b)
        assert not torch.allclose(a, c)

    def test_other_dtype_leaves_weights_alone(self) -> None:
        """A float64 call does not change the float32 weights other callers see."""
        fe = build_stub_extractor(0)
        x = torch.rand(1, 3, 16, 16)
        before = extract(fe, x)
        wide = extract(fe, x.double())
        assert wide.dtype == torch.float64
        assert all(p.dtype == torch.float32 for p in fe.layers.parameters())
        assert torch.equal(extract(fe, x), before)
        torch.testing.assert_close(wide.float(), before, rtol=1e-4, atol=1e-5)

    def test_too_small_input_raises(self) -> None:
        """Inputs below the minimum size raise ValueError."""
        with pytest.raises(ValueError, match=r"at least 4x4"):
            extract(build_stub_extractor(0), torch.zeros(1, 3, 2, 2))

    def test_descriptor(self) -> None:
        """The descriptor names the stub and its seed."""
        desc = build_stub_extractor(7).descriptor()
        assert desc["kind"] == ExtractorKind.STUB.value
        assert desc["stub_seed"] == 7


class TestBuildFeatureExtractor:
    def test_no_backbone_uses_stub(self) -> None:
        """Without a backbone path the stub is used with the configured seed."""
        fe = build_feature_extractor(FeaturesConfig(stub_seed=3))
        assert fe.kind is ExtractorKind.STUB
        assert fe.source == 3

    def test_missing_backbone_falls_back_with_warning(self, tmp_path, caplog) -> None:
        """A backbone path that does not exist warns and falls back to the stub."""
        cfg = FeaturesConfig(backbone_path=str(tmp_path / "missing.pt"))
        with caplog.at_level(logging.WARNING, logger="diffdf.features"):
            fe = build_feature_extractor(cfg)
        assert fe.kind is ExtractorKind.STUB
        assert "not found" in caplog.text


class TestFeaturesConfig:
    def test_defaults(self) -> None:
        """Defaults use ImageNet statistics and no backbone."""
        cfg = FeaturesConfig.from_dict({})
        assert cfg.backbone_path is None
        assert cfg.mean == (0.485, 0.456, 0.406)

    def test_std_must_be_positive(self) -> None:
        """Zero std entries are rejected."""
        with pytest.raises(ConfigError, match=r"features.std entries must be positive"):
            FeaturesConfig.from_dict({"std": [0.2, 0.0, 0.2]})

    def test_mean_needs_three_values(self) -> None:
        """mean must have three numbers."""
        with pytest.raises(ConfigError, match=r"three numbers"):
            FeaturesConfig.from_dict({"mean": [0.5, 0.5]})
