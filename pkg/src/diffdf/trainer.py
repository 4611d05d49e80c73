"""Training loop for the purification denoiser.

Each step samples one time step per item, noises the adversarial crops,
predicts the noise and applies one Adam update on the weighted loss.
Checkpoints capture the model, the optimizer, the sampling generator and the
position inside the epoch so an interrupted run resumes bit for bit.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import torch

from diffdf.denoiser import Denoiser, UNetConfig, build_denoiser
from diffdf.errors import CheckpointError, ConfigError, DataError, NumericalError
from diffdf.features import FeatureExtractor
from diffdf.losses import LossBundle, LossWeights, SsimConfig, compute_losses
from diffdf.reporting import report
from diffdf.schedule import NoiseSchedule
from diffdf.utils import atomic_write_text
from diffdf.validation import (
    read_bool,
    read_float,
    read_int,
    read_optional_float,
    read_str,
    reject_unknown,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOSS_COLUMNS = ("step", "epoch", "lr", "simple", "pixel", "semantic", "ssim", "total")
HISTORY_TAIL = 20


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-4
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float | None = None
    clamp_x0: bool = True
    device: str = "cpu"

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        prefix = "train"
        reject_unknown(
            data,
            (
                "epochs",
                "batch_size",
                "lr",
                "lr_decay_factor",
                "lr_decay_every",
                "weights",
                "seed",
                "checkpoint_every",
                "grad_clip",
                "clamp_x0",
                "device",
            ),
            prefix,
        )
        weights = data.get("weights") or {}
        if isinstance(weights, str):
            parsed = LossWeights.parse(weights)
        elif isinstance(weights, (list, tuple)):
            parsed = LossWeights.parse(",".join(str(w) for w in weights))
        elif isinstance(weights, dict):
            parsed = LossWeights.from_dict(weights)
        else:
            raise ConfigError(
                "train.weights must be a mapping or 'pixel,semantic,ssim'"
            )
        return cls(
            epochs=read_int(data, "epochs", prefix, 5, minimum=0),
            batch_size=read_int(data, "batch_size", prefix, 8, minimum=1),
            lr=read_float(data, "lr", prefix, 1e-4, positive=True),
            lr_decay_factor=read_float(
                data, "lr_decay_factor", prefix, 10.0, positive=True
            ),
            lr_decay_every=read_int(data, "lr_decay_every", prefix, 5, minimum=1),
            weights=parsed,
            seed=read_int(data, "seed", prefix, 0, minimum=0),
            checkpoint_every=read_int(data, "checkpoint_every", prefix, 0, minimum=0),
            grad_clip=read_optional_float(data, "grad_clip", prefix, positive=True),
            clamp_x0=read_bool(data, "clamp_x0", prefix, True),
            device=read_str(data, "device", prefix, "cpu") or "cpu",
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lr_decay_factor": self.lr_decay_factor,
            "lr_decay_every": self.lr_decay_every,
            "weights": self.weights.to_dict(),
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "grad_clip": self.grad_clip,
            "clamp_x0": self.clamp_x0,
            "device": self.device,
        }


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: ``lr / decay_factor ** (epoch // decay_every)`` (0-based epochs)."""
    return cfg.lr / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


@dataclass
class TrainPosition:
    epoch: int = 0
    batch_in_epoch: int = 0
    global_step: int = 0

    def to_dict(self) -> dict[str, int]:
        return {
            "epoch": self.epoch,
            "batch_in_epoch": self.batch_in_epoch,
            "global_step": self.global_step,
        }


@dataclass
class Checkpoint:
    model_state: dict[str, torch.Tensor]
    optimizer_state: dict[str, Any]
    manifest: dict[str, Any]
    rng_state: torch.Tensor
    position: TrainPosition

    @property
    def schedule_fingerprint(self) -> str:
        return self.manifest["schedule_fingerprint"]

    def to_payload(self) -> dict[str, Any]:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model": self.model_state,
            "optimizer": self.optimizer_state,
            "manifest": self.manifest,
            "rng_state": self.rng_state,
            "position": self.position.to_dict(),
        }


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    """Write the binary checkpoint plus a plain-text JSON manifest beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        torch.save(ckpt.to_payload(), tmp)
        tmp.replace(path)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    atomic_write_text(
        _manifest_path(path), json.dumps(ckpt.manifest, sort_keys=True, indent=2) + "\n"
    )
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types here
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise CheckpointError(f"checkpoint {path} has an unknown layout")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version!r}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    try:
        return Checkpoint(
            model_state=payload["model"],
            optimizer_state=payload["optimizer"],
            manifest=payload["manifest"],
            rng_state=payload["rng_state"],
            position=TrainPosition(**payload["position"]),
        )
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} is missing {exc}") from exc


def restore_denoiser(
    ckpt: Checkpoint, schedule: NoiseSchedule | None = None
) -> Denoiser:
    """Rebuild the denoiser stored in *ckpt*, checking its schedule binding."""
    if schedule is not None and schedule.fingerprint() != ckpt.schedule_fingerprint:
        raise CheckpointError(
            f"checkpoint was trained with schedule {ckpt.schedule_fingerprint}, "
            f"not {schedule.fingerprint()}"
        )
    unet = ckpt.manifest["unet"]
    config = UNetConfig.from_dict(unet)
    model = Denoiser(config, ckpt.schedule_fingerprint)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model


def checkpoint_schedule(ckpt: Checkpoint) -> NoiseSchedule:
    return NoiseSchedule.from_dict(ckpt.manifest["schedule"])


class Trainer:
    """Owns the denoiser, its optimizer and the sampling generator."""

    def __init__(
        self,
        cfg: TrainConfig,
        schedule: NoiseSchedule,
        unet_config: UNetConfig,
        extractor: FeatureExtractor,
        ssim_cfg: SsimConfig | None = None,
        out_dir: Path | None = None,
    ) -> None:
        self.cfg = cfg
        self.schedule = schedule
        self.unet_config = unet_config
        self.extractor = extractor
        self.ssim_cfg = ssim_cfg or SsimConfig()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.device = torch.device(cfg.device)
        self.model = build_denoiser(unet_config, cfg.seed, schedule.fingerprint()).to(
            self.device
        )
        self.extractor.to(self.device)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), weight_decay=0.0
        )
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.position = TrainPosition()
        self.history: list[LossBundle] = []
        self.epoch_means: list[float] = []

    # -- checkpoints ----------------------------------------------------------

    def manifest(self) -> dict[str, Any]:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "schedule": self.schedule.to_dict(),
            "schedule_fingerprint": self.schedule.fingerprint(),
            "unet": self.unet_config.to_dict(),
            "loss_weights": self.cfg.weights.to_dict(),
            "ssim": self.ssim_cfg.to_dict(),
            "feature_extractor": self.extractor.descriptor(),
            "train": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "step": self.position.global_step,
            "epoch": self.position.epoch,
            "parameter_count": self.model.parameter_count(),
            "loss_history_tail": [b.to_dict() for b in self.history[-HISTORY_TAIL:]],
        }

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_state={
                k: v.detach().cpu().clone() for k, v in self.model.state_dict().items()
            },
            optimizer_state=copy.deepcopy(self.optimizer.state_dict()),
            manifest=self.manifest(),
            rng_state=self.generator.get_state(),
            position=replace(self.position),
        )

    def resume(self, ckpt: Checkpoint) -> None:
        if ckpt.schedule_fingerprint != self.schedule.fingerprint():
            raise CheckpointError(
                "checkpoint schedule does not match the configured schedule"
            )
        if ckpt.manifest.get("unet") != self.unet_config.to_dict():
            raise CheckpointError(
                "checkpoint U-Net config does not match the configured one"
            )
        self.model.load_state_dict(ckpt.model_state)
        self.optimizer.load_state_dict(ckpt.optimizer_state)
        self.generator.set_state(ckpt.rng_state)
        self.position = replace(ckpt.position)
        self.history = [
            LossBundle(
                simple=h["simple"],
                pixel=h["pixel"],
                semantic=h["semantic"],
                ssim_loss=h["ssim"],
                total=h["total"],
            )
            for h in ckpt.manifest.get("loss_history_tail", [])
        ]
        logger.info(
            "Resuming at epoch %d, batch %d (step %d)",
            self.position.epoch,
            self.position.batch_in_epoch,
            self.position.global_step,
        )

    def _save(self, name: str) -> Path | None:
        if self.out_dir is None:
            return None
        return save_checkpoint(self.checkpoint(), self.out_dir / name)

    # -- training -------------------------------------------------------------

    def set_lr(self, epoch: int) -> float:
        lr = lr_at(self.cfg, epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def train_step(self, clean: torch.Tensor, adversarial: torch.Tensor) -> LossBundle:
        if clean.shape[0] == 0:
            raise ValueError("empty batch")
        n = clean.shape[0]
        t = torch.randint(1, self.schedule.T + 1, (n,), generator=self.generator)
        eps = torch.randn(
            adversarial.shape, generator=self.generator, dtype=adversarial.dtype
        )
        clean, adversarial = clean.to(self.device), adversarial.to(self.device)
        t, eps = t.to(self.device), eps.to(self.device)

        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        total, bundle = compute_losses(
            self.model,
            self.extractor,
            clean,
            adversarial,
            t,
            eps,
            self.schedule,
            self.cfg.weights,
            self.ssim_cfg,
            clamp_x0=self.cfg.clamp_x0,
        )
        if not math.isfinite(bundle.total):
            raise NumericalError(
                "training loss is not finite",
                {
                    "epoch": self.position.epoch,
                    "step": self.position.global_step,
                    "t": t.tolist(),
                    **bundle.to_dict(),
                },
            )
        total.backward()
        if self.cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        return bundle

    def _open_loss_csv(self) -> io.TextIOBase | None:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "losses.csv"
        rows: list[str] = []
        if path.is_file() and self.position.global_step:
            # Drop rows written after the checkpoint we resumed from.
            rows = path.read_text(encoding="utf-8").splitlines()[
                1 : self.position.global_step + 1
            ]
        handle = path.open("w", encoding="utf-8", newline="")
        handle.write(",".join(LOSS_COLUMNS) + "\n")
        for row in rows:
            handle.write(row + "\n")
        return handle

    def fit(self, clean: torch.Tensor, adversarial: torch.Tensor) -> Checkpoint:
        """Run the remaining epochs over the stacked pair tensors."""
        if clean.shape != adversarial.shape:
            raise DataError("clean and adversarial tensors differ in shape")
        n = clean.shape[0]
        if n == 0 and self.cfg.epochs > 0:
            raise DataError("no training pairs")
        batches = math.ceil(n / self.cfg.batch_size) if n else 0
        handle = self._open_loss_csv()
        writer = csv.writer(handle, lineterminator="\n") if handle else None
        try:
            while self.position.epoch < self.cfg.epochs:
                epoch = self.position.epoch
                lr = self.set_lr(epoch)
                applied = self.optimizer.param_groups[0]["lr"]
                if applied != lr_at(self.cfg, epoch):
                    raise ConfigError(
                        f"optimizer lr {applied} at epoch {epoch} differs from "
                        f"the scheduled {lr_at(self.cfg, epoch)}"
                    )
                order = torch.randperm(
                    n, generator=torch.Generator().manual_seed(self.cfg.seed + epoch)
                )
                totals = []
                with report.step(f"train epoch {epoch + 1}/{self.cfg.epochs}"):
                    for b in range(self.position.batch_in_epoch, batches):
                        size = self.cfg.batch_size
                        idx = order[b * size : (b + 1) * size]
                        bundle = self.train_step(clean[idx], adversarial[idx])
                        self.history.append(bundle)
                        totals.append(bundle.total)
                        self.position.global_step += 1
                        self.position.batch_in_epoch = b + 1
                        if writer is not None:
                            writer.writerow(
                                [self.position.global_step, epoch, repr(lr)]
                                + [repr(v) for v in bundle.to_dict().values()]
                            )
                        every = self.cfg.checkpoint_every
                        if every and self.position.global_step % every == 0:
                            if handle is not None:
                                handle.flush()
                            self._save(f"step-{self.position.global_step:06d}.pt")
                            self._save("last.pt")
                mean = sum(totals) / len(totals) if totals else float("nan")
                self.epoch_means.append(mean)
                logger.info(
                    "epoch %d/%d: lr=%g mean total loss=%.6g",
                    epoch + 1,
                    self.cfg.epochs,
                    lr,
                    mean,
                )
                self.position.epoch += 1
                self.position.batch_in_epoch = 0
                if handle is not None:
                    handle.flush()
                self._save("last.pt")
        finally:
            if handle is not None:
                handle.close()
        ckpt = self.checkpoint()
        if self.out_dir is not None:
            path = save_checkpoint(ckpt, self.out_dir / "last.pt")
            report.attach_file(path, "checkpoint")
            report.attach_file(self.out_dir / "losses.csv", "losses")
        return ckpt


def train(
    cfg: TrainConfig,
    clean: torch.Tensor,
    adversarial: torch.Tensor,
    schedule: NoiseSchedule,
    unet_config: UNetConfig,
    extractor: FeatureExtractor,
    ssim_cfg: SsimConfig | None = None,
    out_dir: Path | None = None,
    resume_from: Path | None = None,
) -> Checkpoint:
    trainer = Trainer(cfg, schedule, unet_config, extractor, ssim_cfg, out_dir)
    if resume_from is not None:
        trainer.resume(load_checkpoint(resume_from))
    return trainer.fit(clean, adversarial)
