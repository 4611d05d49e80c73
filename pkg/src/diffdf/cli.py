"""Command-line entry point: ``diffdf <command> [options]``.

Every command resolves the full configuration first, runs under
``seed_everything`` and writes ``run.json`` into its output directory,
on failure too. Exit codes: 0 success, 2 config error, 3 data error,
4 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import torch

from diffdf import __version__
from diffdf.attacks import AttackKind, AttackTarget, Norm
from diffdf.config import AppConfig, load_app_config
from diffdf.data import (
    PairDataset,
    PairManifest,
    SequenceAnnotation,
    audit_budgets,
    build_manifest,
    ingest_external,
    load_sequences,
    make_synthetic_sequences,
    save_png,
    write_sequences,
)
from diffdf.errors import ConfigError, DataError, DiffDfError
from diffdf.evalkit import (
    Condition,
    MatrixReport,
    gap_recovery,
    image_quality,
    parse_conditions,
    run_matrix,
)
from diffdf.features import build_feature_extractor
from diffdf.losses import LossWeights
from diffdf.purifier import (
    Purifier,
    PurifyStats,
    filter_defense,
    purify,
    purify_sequence,
)
from diffdf.reporting import report
from diffdf.schedule import NoiseSchedule
from diffdf.trainer import (
    Checkpoint,
    checkpoint_schedule,
    load_checkpoint,
    restore_denoiser,
    train,
)
from diffdf.utils import atomic_write_text, content_hash, seed_everything

logger = logging.getLogger(__name__)

RUN_FILE = "run.json"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"

# Loss weight rows of the ablation: pixel only, +semantic, +ssim, all three.
ABLATION_WEIGHTS = (
    LossWeights(1.0, 0.0, 0.0),
    LossWeights(1.0, 5.0, 0.0),
    LossWeights(1.0, 0.0, 10.0),
    LossWeights(1.0, 5.0, 10.0),
)
ABLATION_CONDITIONS = (Condition.ORIGINAL, Condition.ATTACKED, Condition.DEFENDED)


@dataclass
class RunContext:
    command: str
    argv: list[str]
    config: AppConfig
    out_dir: Path
    inputs: list[Path] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)

    def write_run_file(self, exit_code: int, started: float, error: str | None) -> Path:
        existing = [p for p in self.inputs if p.exists()]
        payload = {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "config": self.config.to_dict(),
            "inputs": [str(p) for p in self.inputs],
            "input_hash": content_hash(existing) if existing else None,
            "summary": self.summary,
            "exit_code": exit_code,
            "error": error,
            "elapsed": time.perf_counter() - started,
            **report.snapshot(),
        }
        path = self.out_dir / RUN_FILE
        atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")
        return path


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _sequences(ctx: RunContext, sequences_dir: str | None, seed_offset: int = 0):
    if sequences_dir:
        root = Path(sequences_dir)
        ctx.inputs.append(root)
        return load_sequences(root)
    data = ctx.config.data
    return make_synthetic_sequences(
        data.sequences,
        data.frames,
        data.canvas,
        ctx.config.seed + seed_offset,
        max_velocity=data.max_velocity,
        object_size=(data.object_min, data.object_max),
    )


def _manifest(ctx: RunContext, path: str | None) -> PairManifest:
    if not path:
        raise ConfigError("a pair dataset is required (--data)")
    ctx.inputs.append(Path(path))
    return PairManifest.load(Path(path))


def _checkpoint(ctx: RunContext, path: str | None) -> Checkpoint:
    if not path:
        raise ConfigError("a trained checkpoint is required (--checkpoint)")
    ctx.inputs.append(Path(path))
    return load_checkpoint(Path(path))


def _purifier(ckpt: Checkpoint, cfg: AppConfig) -> tuple[Purifier, NoiseSchedule]:
    schedule = checkpoint_schedule(ckpt)
    if schedule.fingerprint() != cfg.schedule.build().fingerprint():
        logger.warning(
            "checkpoint schedule %s differs from the configured one; "
            "purifying with the checkpoint's schedule",
            ckpt.schedule_fingerprint,
        )
    if cfg.purify.t_star > schedule.T:
        raise ConfigError(
            f"purify.t_star={cfg.purify.t_star} exceeds the checkpoint's T={schedule.T}"
        )
    model = restore_denoiser(ckpt, schedule)
    return Purifier(model, schedule, cfg.purify, cfg.data.image_size), schedule


def _write_rows(path: Path, rows: Sequence[dict[str, Any]]) -> Path:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())
    report.attach_file(path, path.name)
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_make_data(ctx: RunContext, args: argparse.Namespace) -> int:
    cfg = ctx.config
    pairs_dir = ctx.out_dir / "pairs"
    if args.clean_dir or args.adv_dir:
        if not (args.clean_dir and args.adv_dir):
            raise ConfigError("--clean-dir and --adv-dir must be given together")
        ctx.inputs += [Path(args.clean_dir), Path(args.adv_dir)]
        with report.step("ingest external pairs"):
            manifest = ingest_external(
                Path(args.clean_dir), Path(args.adv_dir), pairs_dir
            )
    else:
        with report.step("generate synthetic sequences"):
            sequences = _sequences(ctx, args.sequences_dir)
            if not args.sequences_dir:
                write_sequences(sequences, ctx.out_dir / "sequences")
        manifest = _build_pairs(ctx, sequences, pairs_dir, args.external_adv_dir)
    budget = cfg.attack.budget
    ctx.summary = {
        "pairs": len(manifest),
        "pairs_dir": str(pairs_dir),
        "attack": cfg.attack.kind.value,
        "budget": budget.to_dict(),
    }
    print(
        f"Wrote {len(manifest)} pairs to {pairs_dir} "
        f"({cfg.attack.kind.value}, {budget.norm.value} eps={budget.epsilon:g})"
    )
    return 0


def _build_pairs(
    ctx: RunContext,
    sequences: Sequence[SequenceAnnotation],
    pairs_dir: Path,
    external_adv_dir: str | None = None,
) -> PairManifest:
    cfg = ctx.config
    extractor = None
    if cfg.attack.kind is AttackKind.GRADIENT:
        extractor = build_feature_extractor(cfg.features)
    if external_adv_dir:
        ctx.inputs.append(Path(external_adv_dir))
    with report.step(f"build {cfg.attack.kind.value} pairs"):
        return build_manifest(
            sequences,
            cfg.data.stride,
            cfg.data.crop_specs(),
            cfg.attack,
            pairs_dir,
            extractor=extractor,
            external_adv_dir=Path(external_adv_dir) if external_adv_dir else None,
            workers=cfg.data.workers,
        )


def cmd_attack(ctx: RunContext, args: argparse.Namespace) -> int:
    sequences = _sequences(ctx, args.sequences_dir)
    pairs_dir = ctx.out_dir / "pairs"
    manifest = _build_pairs(ctx, sequences, pairs_dir)
    audit = audit_budgets(manifest)
    ctx.summary = {
        "pairs": len(manifest),
        "pairs_dir": str(pairs_dir),
        "budget": ctx.config.attack.budget.to_dict(),
        "budget_checked": audit.checked,
        "budget_violations": list(audit.violations),
    }
    print(f"Wrote {len(manifest)} adversarial pairs to {pairs_dir}")
    if not audit.ok:
        raise DataError(f"{len(audit.violations)} pairs exceed the perturbation budget")
    return 0


def _train(
    ctx: RunContext, manifest: PairManifest, cfg: AppConfig, out_dir: Path, resume
) -> Checkpoint:
    clean, adversarial = PairDataset(manifest, cfg.data.image_size).tensors()
    extractor = build_feature_extractor(cfg.features)
    with report.step(f"train on {clean.shape[0]} pairs"):
        return train(
            cfg.train,
            clean,
            adversarial,
            cfg.schedule.build(),
            cfg.unet,
            extractor,
            cfg.ssim,
            out_dir,
            resume_from=resume,
        )


def cmd_train(ctx: RunContext, args: argparse.Namespace) -> int:
    manifest = _manifest(ctx, args.data)
    resume = None
    if args.resume:
        resume = Path(args.resume) if args.resume != "last" else ctx.out_dir / "last.pt"
        ctx.inputs.append(resume)
    ckpt = _train(ctx, manifest, ctx.config, ctx.out_dir, resume)
    tail = ckpt.manifest.get("loss_history_tail") or [{}]
    ctx.summary = {
        "checkpoint": str(ctx.out_dir / "last.pt"),
        "step": ckpt.position.global_step,
        "final_losses": tail[-1],
    }
    print(f"Checkpoint: {ctx.out_dir / 'last.pt'}")
    print("Final losses: " + ", ".join(f"{k}={v:.6g}" for k, v in tail[-1].items()))
    return 0


def cmd_purify(ctx: RunContext, args: argparse.Namespace) -> int:
    cfg = ctx.config
    manifest = _manifest(ctx, args.data)
    ckpt = _checkpoint(ctx, args.checkpoint)
    schedule = checkpoint_schedule(ckpt)
    model = restore_denoiser(ckpt, schedule)
    clean, adversarial = PairDataset(manifest, cfg.data.image_size).tensors()
    stats = PurifyStats()
    with report.step(f"purify {adversarial.shape[0]} crops"):
        purified = torch.stack(
            list(purify_sequence(model, schedule, adversarial, cfg.purify, stats))
        )
    out = ctx.out_dir / "purified"
    for entry, image in zip(manifest.entries, purified):
        save_png(out / Path(entry.adv_path).name, image)
    quality = image_quality(clean, adversarial, purified, cfg.ssim)
    quality.update(stats.to_dict())
    atomic_write_text(
        ctx.out_dir / "quality.json",
        json.dumps(quality, sort_keys=True, indent=2) + "\n",
    )
    report.attach_file(ctx.out_dir / "quality.json", "quality")
    ctx.summary = quality
    print(
        f"PSNR adversarial {quality['psnr_adversarial']:.2f} dB -> "
        f"purified {quality['psnr_purified']:.2f} dB; "
        f"SSIM {quality['ssim_adversarial']:.4f} -> {quality['ssim_purified']:.4f}"
    )
    return 0


def _evaluate(
    sequences: Sequence[SequenceAnnotation],
    conditions: Sequence[Condition],
    purifier: Purifier | None,
    cfg: AppConfig,
    out_dir: Path,
) -> MatrixReport:
    matrix = run_matrix(
        sequences, conditions, cfg.attack, purifier, cfg.eval, cfg.purify.apply_to
    )
    matrix.write(out_dir)
    return matrix


def cmd_eval(ctx: RunContext, args: argparse.Namespace) -> int:
    cfg = ctx.config
    summary: dict[str, Any] = {}
    if args.manifest:
        audit = audit_budgets(_manifest(ctx, args.manifest))
        summary["budget_checked"] = audit.checked
        summary["budget_violations"] = list(audit.violations)
        print(f"Budget audit: {audit.checked} checked, {len(audit.violations)} over")
    conditions = cfg.eval.conditions
    purifier = None
    if Condition.DEFENDED in conditions:
        purifier, _ = _purifier(_checkpoint(ctx, args.checkpoint), cfg)
    sequences = _sequences(ctx, args.sequences_dir, seed_offset=1)
    matrix = _evaluate(sequences, conditions, purifier, cfg, ctx.out_dir)
    recovery = gap_recovery(matrix)
    summary["aggregates"] = {
        c.value: matrix.aggregate(c).to_dict() for c in conditions
    }
    summary["gap_recovery"] = recovery
    ctx.summary = summary
    for c in conditions:
        row = matrix.aggregate(c)
        print(
            f"{c.value:>9}: success {row.success_auc:.3f}  precision "
            f"{row.precision:.3f}  norm-precision {row.norm_precision:.3f}  "
            f"lost {row.lost_number}  eao-lite {row.eao_lite:.3f}"
        )
    if "budget_violations" in summary and summary["budget_violations"]:
        raise DataError("manifest contains pairs that exceed their budget")
    return 0


def cmd_ablate(ctx: RunContext, args: argparse.Namespace) -> int:
    manifest = _manifest(ctx, args.data)
    sequences = _sequences(ctx, args.sequences_dir, seed_offset=1)
    rows = []
    for weights in ABLATION_WEIGHTS:
        label = (
            f"{weights.lambda_pixel:g}-{weights.lambda_semantic:g}-"
            f"{weights.lambda_ssim:g}"
        )
        run_dir = ctx.out_dir / f"weights-{label}"
        cfg = replace(ctx.config, train=replace(ctx.config.train, weights=weights))
        seed_everything(cfg.seed, cfg.deterministic)
        with report.step(f"ablation {label}"):
            ckpt = _train(ctx, manifest, cfg, run_dir, None)
            purifier, _ = _purifier(ckpt, cfg)
            matrix = _evaluate(sequences, ABLATION_CONDITIONS, purifier, cfg, run_dir)
        defended = matrix.aggregate(Condition.DEFENDED)
        tail = ckpt.manifest.get("loss_history_tail") or [{}]
        rows.append(
            {
                "lambda_pixel": weights.lambda_pixel,
                "lambda_semantic": weights.lambda_semantic,
                "lambda_ssim": weights.lambda_ssim,
                "success_auc": defended.success_auc,
                "precision": defended.precision,
                "norm_precision": defended.norm_precision,
                "eao_lite": defended.eao_lite,
                "gap_recovery": gap_recovery(matrix),
                "final_total_loss": tail[-1].get("total"),
            }
        )
    _write_rows(ctx.out_dir / "ablation.csv", rows)
    atomic_write_text(
        ctx.out_dir / "ablation.json", json.dumps(rows, sort_keys=True, indent=2) + "\n"
    )
    ctx.summary = {"rows": rows}
    for row in rows:
        print(
            f"pixel={row['lambda_pixel']:g} semantic={row['lambda_semantic']:g} "
            f"ssim={row['lambda_ssim']:g}: defended success {row['success_auc']:.3f}"
        )
    return 0


def cmd_plot(ctx: RunContext, args: argparse.Namespace) -> int:
    from diffdf import plotting

    written: list[Path] = []
    if args.source:
        source = Path(args.source)
        curves = source / "curves.csv" if source.is_dir() else source
        if curves.name == "report.csv":
            curves = curves.with_name("curves.csv")
        ctx.inputs.append(curves)
        written += plotting.plot_curves(curves, ctx.out_dir)
    if args.losses:
        ctx.inputs.append(Path(args.losses))
        losses_png = ctx.out_dir / "losses.png"
        written.append(plotting.plot_losses(Path(args.losses), losses_png))
    if args.data:
        written.append(_plot_differences(ctx, args, plotting))
    if not written:
        raise ConfigError("nothing to plot: pass --from, --losses or --data")
    ctx.summary = {"figures": [str(p) for p in written]}
    for path in written:
        print(path)
    return 0


def _plot_differences(ctx: RunContext, args: argparse.Namespace, plotting) -> Path:
    cfg = ctx.config
    manifest = _manifest(ctx, args.data)
    dataset = PairDataset(manifest, cfg.data.image_size)
    clean, adversarial = dataset[min(args.index, len(dataset) - 1)]
    gaussian = filter_defense("gaussian", cfg.eval.gaussian_sigma)
    median = filter_defense("median", cfg.eval.median_size)
    defended = [
        ("gaussian", gaussian(adversarial, 0)),
        ("median", median(adversarial, 0)),
    ]
    if args.checkpoint:
        ckpt = _checkpoint(ctx, args.checkpoint)
        schedule = checkpoint_schedule(ckpt)
        model = restore_denoiser(ckpt, schedule)
        defended.append(("purified", purify(model, schedule, adversarial, cfg.purify)))
    return plotting.plot_difference_maps(
        clean, adversarial, defended, ctx.out_dir / "difference_maps.png"
    )


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (default: $DIFFDF_CONFIG)")
    common.add_argument(
        "--preset", choices=("test-scale", "full-scale"), help="Base configuration"
    )
    common.add_argument(
        "--seed", type=int, help="Top-level seed (default: $DIFFDF_SEED)"
    )
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config key; may be repeated",
    )
    common.add_argument("--out", help="Run directory (default: <out_dir>/<command>)")
    common.add_argument(
        "--deterministic",
        action="store_true",
        default=None,
        help="Deterministic kernels and a noise-free purification chain",
    )
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    return common


def _attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", choices=[k.value for k in AttackKind])
    p.add_argument("--norm", choices=[n.value for n in Norm])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--target", choices=[t.value for t in AttackTarget])


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="diffdf",
        description="Diffusion-based adversarial purification for visual tracking.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", parents=[common], help="Build a pair dataset")
    p.add_argument(
        "--synthetic", action="store_true", help="Generate sequences (default)"
    )
    p.add_argument("--sequences", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--sequences-dir", help="Existing sequences instead of synthetic")
    p.add_argument("--clean-dir", help="Ingest clean PNGs (with --adv-dir)")
    p.add_argument("--adv-dir", help="Ingest adversarial PNGs (with --clean-dir)")
    p.add_argument("--external-adv-dir", help="Take adversarial crops from here")
    _attack_flags(p)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("attack", parents=[common], help="Attack sequence crops")
    p.add_argument("--sequences-dir", help="Sequences to attack (default: synthetic)")
    _attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("train", parents=[common], help="Train the denoiser")
    p.add_argument("--data", help="Pair dataset directory or manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weights", help="pixel,semantic,ssim loss weights, e.g. 1,5,10")
    p.add_argument(
        "--resume",
        nargs="?",
        const="last",
        help="Resume from a checkpoint (default: <out>/last.pt)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("purify", parents=[common], help="Purify adversarial crops")
    p.add_argument("--data", help="Pair dataset directory or manifest")
    p.add_argument("--checkpoint", help="Trained checkpoint")
    p.add_argument("--t-star", type=int)
    p.set_defaults(func=cmd_purify)

    p = sub.add_parser(
        "eval", parents=[common], help="Attack x defense tracking matrix"
    )
    p.add_argument("--checkpoint", help="Trained checkpoint (needed for 'defended')")
    p.add_argument("--sequences-dir", help="Sequences (default: held-out synthetic)")
    p.add_argument("--conditions", help="Comma-separated conditions")
    p.add_argument("--manifest", help="Also audit this pair dataset's budgets")
    p.add_argument("--t-star", type=int)
    p.add_argument("--target", choices=[t.value for t in AttackTarget])
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="Loss-combination ablation")
    p.add_argument("--data", help="Pair dataset directory or manifest")
    p.add_argument("--sequences-dir", help="Sequences (default: held-out synthetic)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", parents=[common], help="Render figures")
    p.add_argument(
        "--from", dest="source", help="Report directory, report.csv or curves.csv"
    )
    p.add_argument("--losses", help="losses.csv from a training run")
    p.add_argument("--data", help="Pair dataset for difference maps")
    p.add_argument("--checkpoint", help="Add the purified crop to the difference maps")
    p.add_argument("--index", type=int, default=0, help="Pair shown in difference maps")
    p.set_defaults(func=cmd_plot)
    return parser


# Command options and the config keys they set.
_FLAG_KEYS = {
    "seed": "seed",
    "deterministic": "deterministic",
    "sequences": "data.sequences",
    "frames": "data.frames",
    "stride": "data.stride",
    "kind": "attack.kind",
    "norm": "attack.budget.norm",
    "epsilon": "attack.budget.epsilon",
    "steps": "attack.budget.steps",
    "step_size": "attack.budget.step_size",
    "target": "attack.target",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "weights": "train.weights",
    "t_star": "purify.t_star",
    "conditions": "eval.conditions",
}


def _flag_values(args: argparse.Namespace) -> dict[str, Any]:
    flags = {}
    for name, key in _FLAG_KEYS.items():
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "conditions":
            value = [c.value for c in parse_conditions(value)]
        elif name == "weights":
            value = LossWeights.parse(value).to_dict()
        flags[key] = value
    return flags


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.INFO
    if getattr(args, "verbose", False):
        level = logging.DEBUG
    elif getattr(args, "quiet", False):
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    report.reset()
    started = time.perf_counter()

    try:
        config = load_app_config(
            args.preset,
            Path(args.config) if args.config else None,
            args.overrides,
            os.environ,
            _flag_values(args),
        )
    except DiffDfError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return exc.exit_code

    out_dir = Path(args.out) if args.out else Path(config.out_dir) / args.command
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(
            f"Error: cannot create output directory {out_dir}: {exc}",
            file=sys.stderr,
        )
        return DataError.exit_code

    ctx = RunContext(args.command, argv, config, out_dir)
    if args.config:
        ctx.inputs.append(Path(args.config))
    seed_everything(config.seed, config.deterministic)
    handler: Callable[[RunContext, argparse.Namespace], int] = args.func

    code, error = 0, None
    try:
        code = handler(ctx, args)
    except DiffDfError as exc:
        code, error = exc.exit_code, str(exc)
    except OSError as exc:
        code, error = DataError.exit_code, str(exc)
    except (RuntimeError, ArithmeticError, ValueError) as exc:
        logger.debug("command failed", exc_info=True)
        code, error = 4, f"{type(exc).__name__}: {exc}"
    if error is not None:
        print(f"Error: {error}", file=sys.stderr)
    ctx.write_run_file(code, started, error)
    return code


if __name__ == "__main__":
    sys.exit(main())
