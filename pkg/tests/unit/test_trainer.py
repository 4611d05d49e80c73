from __future__ import annotations

import csv

import pytest
import torch

from diffdf.denoiser import UNetConfig
from diffdf.errors import CheckpointError, ConfigError, DataError, NumericalError
from diffdf.features import build_stub_extractor
from diffdf.losses import LossWeights, SsimConfig
from diffdf.schedule import build_linear_schedule
from diffdf.trainer import (
    LOSS_COLUMNS,
    TrainConfig,
    Trainer,
    checkpoint_schedule,
    load_checkpoint,
    lr_at,
    restore_denoiser,
    save_checkpoint,
    train,
)

TINY = UNetConfig(
    base_channels=8, channel_multipliers=(1, 2), norm_groups=4, time_embed_dim=16
)
SSIM = SsimConfig(window_size=3)


@pytest.fixture(scope="module")
def schedule():
    return build_linear_schedule(20)


@pytest.fixture(scope="module")
def pairs():
    g = torch.Generator().manual_seed(0)
    clean = torch.rand(6, 3, 8, 8, generator=g) * 2 - 1
    adversarial = (clean + 0.05 * torch.randn(6, 3, 8, 8, generator=g)).clamp(-1, 1)
    return clean, adversarial


def _train(schedule, pairs, out_dir=None, resume_from=None, **overrides):
    cfg = TrainConfig(**{"epochs": 2, "batch_size": 4, **overrides})
    return train(
        cfg,
        *pairs,
        schedule,
        TINY,
        build_stub_extractor(0),
        SSIM,
        out_dir,
        resume_from,
    )


# ---------------------------------------------------------------------------
# Learning-rate schedule / config
# ---------------------------------------------------------------------------


class TestLearningRate:
    def test_step_decay(self) -> None:
        """lr drops tenfold every five epochs."""
        cfg = TrainConfig()
        assert lr_at(cfg, 0) == pytest.approx(1e-4)
        assert lr_at(cfg, 4) == pytest.approx(1e-4)
        assert lr_at(cfg, 5) == pytest.approx(1e-5)
        assert lr_at(cfg, 10) == pytest.approx(1e-6)

    def test_optimizer_follows_schedule(self, schedule) -> None:
        """set_lr writes the scheduled rate into every param group."""
        trainer = Trainer(TrainConfig(), schedule, TINY, build_stub_extractor(0), SSIM)
        trainer.set_lr(7)
        assert trainer.optimizer.param_groups[0]["lr"] == pytest.approx(1e-5)

    def test_stale_optimizer_lr_raises(self, schedule, pairs) -> None:
        """fit raises ConfigError when the optimizer misses a scheduled decay."""
        cfg = TrainConfig(epochs=2, batch_size=4, lr_decay_every=1)
        trainer = Trainer(cfg, schedule, TINY, build_stub_extractor(0), SSIM)
        trainer.set_lr = lambda epoch: lr_at(cfg, epoch)
        with pytest.raises(ConfigError, match=r"at epoch 1 differs"):
            trainer.fit(*pairs)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "weights",
        ["1,0,10", [1, 0, 10], {"lambda_pixel": 1, "lambda_semantic": 0}],
    )
    def test_weight_forms(self, weights) -> None:
        """Weights accept the flag string, a list or a mapping."""
        cfg = TrainConfig.from_dict({"weights": weights})
        assert cfg.weights.lambda_semantic == 0.0

    def test_bad_weight_type(self) -> None:
        """A scalar is not a valid weights value."""
        with pytest.raises(ConfigError, match=r"train.weights"):
            TrainConfig.from_dict({"weights": 3})

    def test_grad_clip_optional(self) -> None:
        """grad_clip defaults to None and must be positive when set."""
        assert TrainConfig.from_dict({}).grad_clip is None
        with pytest.raises(ConfigError, match=r"grad_clip"):
            TrainConfig.from_dict({"grad_clip": 0})


# ---------------------------------------------------------------------------
# fit / checkpoints
# ---------------------------------------------------------------------------


class TestFit:
    def test_writes_losses_and_checkpoint(self, schedule, pairs, tmp_path) -> None:
        """One CSV row per step plus last.pt and its JSON manifest."""
        ckpt = _train(schedule, pairs, tmp_path)
        with open(tmp_path / "losses.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == LOSS_COLUMNS
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
        assert (tmp_path / "last.pt").is_file()
        assert (tmp_path / "last.json").is_file()
        assert ckpt.position.global_step == 4
        assert ckpt.manifest["schedule_fingerprint"] == schedule.fingerprint()
        assert len(ckpt.manifest["loss_history_tail"]) == 4

    def test_same_seed_same_losses(self, schedule, pairs) -> None:
        """Two runs with one seed produce identical loss histories."""
        a = _train(schedule, pairs).manifest["loss_history_tail"]
        b = _train(schedule, pairs).manifest["loss_history_tail"]
        assert a == b

    def test_zero_weights_train(self, schedule, pairs) -> None:
        """The noise-only objective records zero semantic and SSIM terms."""
        ckpt = _train(schedule, pairs, weights=LossWeights(1.0, 0.0, 0.0))
        tail = ckpt.manifest["loss_history_tail"]
        assert all(h["semantic"] == 0.0 and h["ssim"] == 0.0 for h in tail)

    def test_resume_matches_uninterrupted(self, schedule, pairs, tmp_path) -> None:
        """Resuming from a mid-epoch checkpoint reproduces the full run."""
        full = _train(schedule, pairs, tmp_path / "full", checkpoint_every=1)
        resumed = _train(
            schedule,
            pairs,
            tmp_path / "resumed",
            resume_from=tmp_path / "full" / "step-000001.pt",
            checkpoint_every=1,
        )
        assert resumed.position == full.position
        for key, value in full.model_state.items():
            assert torch.allclose(resumed.model_state[key], value, atol=1e-6, rtol=0)

    def test_nan_input_raises(self, schedule, pairs) -> None:
        """A non-finite loss stops training with diagnostics."""
        clean, adversarial = pairs
        bad = adversarial.clone()
        bad[0, 0, 0, 0] = float("nan")
        with pytest.raises(NumericalError, match=r"not finite") as exc:
            _train(schedule, (clean, bad))
        assert exc.value.diagnostics["epoch"] == 0

    def test_shape_mismatch(self, schedule, pairs) -> None:
        """Clean and adversarial tensors must match."""
        clean, adversarial = pairs
        with pytest.raises(DataError, match=r"differ in shape"):
            _train(schedule, (clean, adversarial[:3]))

    def test_no_pairs(self, schedule) -> None:
        """An empty dataset cannot be trained on."""
        empty = torch.zeros(0, 3, 8, 8)
        with pytest.raises(DataError, match=r"no training pairs"):
            _train(schedule, (empty, empty))


class TestCheckpointIO:
    def test_restore_reproduces_predictions(self, schedule, pairs, tmp_path) -> None:
        """A saved and reloaded denoiser predicts the same noise."""
        ckpt = _train(schedule, pairs, epochs=1)
        path = save_checkpoint(ckpt, tmp_path / "model.pt")
        loaded = load_checkpoint(path)
        a = restore_denoiser(ckpt, schedule)
        b = restore_denoiser(loaded, checkpoint_schedule(loaded))
        x = pairs[1][:2]
        t = torch.tensor([3, 9])
        with torch.no_grad():
            assert torch.equal(a(x, t), b(x, t))

    def test_wrong_schedule_rejected(self, schedule, pairs) -> None:
        """Restoring against another schedule raises CheckpointError."""
        ckpt = _train(schedule, pairs, epochs=1)
        with pytest.raises(CheckpointError, match=r"trained with schedule"):
            restore_denoiser(ckpt, build_linear_schedule(30))

    def test_missing_file(self, tmp_path) -> None:
        """Loading a missing checkpoint raises CheckpointError."""
        with pytest.raises(CheckpointError, match=r"does not exist"):
            load_checkpoint(tmp_path / "nope.pt")

    def test_wrong_format_version(self, tmp_path) -> None:
        """Unknown format versions are rejected."""
        path = tmp_path / "old.pt"
        torch.save({"format_version": 0}, path)
        with pytest.raises(CheckpointError, match=r"format version 0"):
            load_checkpoint(path)

    def test_resume_with_other_unet_rejected(self, schedule, pairs) -> None:
        """A checkpoint from another architecture cannot be resumed."""
        ckpt = _train(schedule, pairs, epochs=1)
        other = UNetConfig(
            base_channels=4,
            channel_multipliers=(1, 2),
            norm_groups=4,
            time_embed_dim=16,
        )
        trainer = Trainer(TrainConfig(), schedule, other, build_stub_extractor(0), SSIM)
        with pytest.raises(CheckpointError, match=r"U-Net config"):
            trainer.resume(ckpt)
