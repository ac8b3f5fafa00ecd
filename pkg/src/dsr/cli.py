"""Command-line interface.

Subcommands: train-stage1, train-stage2, train-stage3, infer, eval,
synth-debug, ablate.  Option precedence is CLI flag > config file >
profile defaults.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_model
from .config import PROFILES, RunConfig, load_config, profile_config, write_config
from .data import DatasetError, load_dataset, supervised_pairs
from .evaluation import emit_overlays, evaluate_dataset, evaluate_with_injections, write_report
from .networks import DsrModel
from .synthesis import perlin_field, perlin_mask, simulate_smudge
from .training import TrainLogRecord, train_stage1, train_stage2, train_stage3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="INI config file layered over the profile")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--profile", choices=PROFILES, default="paper")
    parser.add_argument("--out", type=str, default="runs/out", help="output directory")


def _add_stage_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--iterations", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--learning-rate", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsr", description="Quantized dual-decoder surface anomaly detection")
    parser.add_argument("--version", action="version", version=f"dsr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p1 = sub.add_parser("train-stage1", help="train encoder, codebooks, and general decoder")
    _add_common(p1)
    _add_stage_overrides(p1)
    p1.add_argument("--data", type=str, required=True, help="image corpus root")
    p1.add_argument("--layout", choices=("flat", "mvtec", "ksdd2"), default="flat")

    p2 = sub.add_parser("train-stage2", help="train the anomaly detection branch")
    _add_common(p2)
    _add_stage_overrides(p2)
    p2.add_argument("--data", type=str, required=True)
    p2.add_argument("--layout", choices=("flat", "mvtec", "ksdd2"), default="flat")
    p2.add_argument("--checkpoint", type=str, required=True, help="stage-1 checkpoint")
    p2.add_argument("--lambda-s", type=float, default=None, help="similarity bound fraction")
    p2.add_argument(
        "--supervised-dir", action="append", default=None,
        help="flat directory of annotated anomalous images; repeatable",
    )

    p3 = sub.add_parser("train-stage3", help="train the mask upsampler")
    _add_common(p3)
    _add_stage_overrides(p3)
    p3.add_argument("--data", type=str, required=True)
    p3.add_argument("--layout", choices=("flat", "mvtec", "ksdd2"), default="flat")
    p3.add_argument("--checkpoint", type=str, required=True, help="stage-2 checkpoint")

    pi = sub.add_parser("infer", help="write anomaly maps for a directory of images")
    _add_common(pi)
    pi.add_argument("--checkpoint", type=str, required=True)
    pi.add_argument("--data", type=str, required=True, help="flat image directory")
    pi.add_argument("--threshold", type=float, default=0.5)
    pi.add_argument("--overlays", action="store_true")
    pi.add_argument("--no-upsampler", action="store_true")

    pe = sub.add_parser("eval", help="evaluate a trained model on a labeled test split")
    _add_common(pe)
    pe.add_argument("--checkpoint", type=str, required=True)
    pe.add_argument("--data", type=str, required=True)
    pe.add_argument("--layout", choices=("flat", "mvtec", "ksdd2"), default="mvtec")
    pe.add_argument("--split", choices=("train", "test"), default="test")
    pe.add_argument("--no-upsampler", action="store_true")
    pe.add_argument("--per-image-pixel-ap", action="store_true")
    pe.add_argument("--no-pixel-metrics", action="store_true")
    pe.add_argument("--overlays", action="store_true")

    ps = sub.add_parser("synth-debug", help="write generated masks and smudges for inspection")
    _add_common(ps)
    ps.add_argument("--size", type=int, default=None, help="canvas size (defaults to profile resolution)")
    ps.add_argument("--count", type=int, default=4)
    ps.add_argument("--image", type=str, default=None, help="optional base image for smudges")

    pa = sub.add_parser("ablate", help="train and evaluate a stage-2 variant")
    _add_common(pa)
    _add_stage_overrides(pa)
    pa.add_argument("--data", type=str, required=True)
    pa.add_argument("--layout", choices=("flat", "mvtec", "ksdd2"), default="flat")
    pa.add_argument("--checkpoint", type=str, required=True, help="stage-1 checkpoint")
    pa.add_argument("--lambda-s", type=float, default=None)
    pa.add_argument("--random-sampling", action="store_true")
    pa.add_argument("--image-space-anomalies", action="store_true")
    pa.add_argument("--loss", choices=("both", "img", "feat"), default="both")
    pa.add_argument("--no-upsampler", action="store_true")
    pa.add_argument("--holdout-fraction", type=float, default=0.2)
    return parser


def _resolve_config(args: argparse.Namespace, stage: int | None = None) -> RunConfig:
    config = load_config(args.config, args.profile) if args.config else profile_config(args.profile)
    if stage is not None:
        target = config.stage(stage)
        for flag, key in (("iterations", "iterations"), ("batch_size", "batch_size"), ("learning_rate", "learning_rate")):
            value = getattr(args, flag, None)
            if value is not None:
                setattr(target, key, value)
        if getattr(args, "lambda_s", None) is not None:
            target.lambda_s = args.lambda_s
    config.validate()
    return config


def _progress(stage: str):
    def callback(record: TrainLogRecord) -> None:
        losses = " ".join(f"{k.removeprefix('loss_')}={v:.5f}" for k, v in sorted(record.losses.items()))
        print(f"[{stage}] iter={record.iteration} lr={record.learning_rate:.2e} {losses}", file=sys.stderr)

    return callback


def _load_corpus(args: argparse.Namespace, config: RunConfig) -> torch.Tensor:
    manifest = load_dataset(args.data, layout=args.layout, split="train", resolution=config.model.resolution)
    return manifest.load_images()


def _cmd_train_stage1(args) -> int:
    config = _resolve_config(args, stage=1)
    images = _load_corpus(args, config)
    result = train_stage1(images, config, seed=args.seed, out_dir=args.out, progress=_progress("stage1"))
    print(f"stage 1 complete: {len(result.records)} log records, checkpoint in {args.out}")
    return 0


def _cmd_train_stage2(args) -> int:
    config = _resolve_config(args, stage=2)
    model, checkpoint = load_model(args.checkpoint)
    config.model = checkpoint.config.model  # the architecture comes from the checkpoint
    images = _load_corpus(args, config)
    if args.supervised_dir:
        config.stage2.supervised_anomaly_dirs = tuple(args.supervised_dir)
    supervised = supervised_pairs(config.stage2.supervised_anomaly_dirs, config.model.resolution)
    result = train_stage2(
        images, model, config, seed=args.seed, supervised=supervised,
        out_dir=args.out, progress=_progress("stage2"),
    )
    print(f"stage 2 complete: counters={result.counters}, checkpoint in {args.out}")
    return 0


def _cmd_train_stage3(args) -> int:
    config = _resolve_config(args, stage=3)
    model, checkpoint = load_model(args.checkpoint)
    config.model = checkpoint.config.model
    images = _load_corpus(args, config)
    result = train_stage3(images, model, config, seed=args.seed, out_dir=args.out, progress=_progress("stage3"))
    print(f"stage 3 complete: counters={result.counters}, checkpoint in {args.out}")
    return 0


def _cmd_infer(args) -> int:
    model, checkpoint = load_model(args.checkpoint)
    resolution = checkpoint.config.model.resolution
    manifest = load_dataset(args.data, layout="flat", split="test", resolution=resolution)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    lines = ["image_id\tscore"]
    from .evaluation import image_score  # local import keeps module load light

    for entry in manifest.entries:
        image = manifest.load_image(entry).unsqueeze(0)
        with torch.no_grad():
            maps = model.forward_maps(image, use_upsampler=not args.no_upsampler)
        score = image_score(maps.mask_feature[0, 0])
        lines.append(f"{entry.image_id}\t{score!r}")
        np.save(out_dir / f"{entry.image_path.stem}_mask.npy", maps.mask_full[0, 0].numpy())
        if args.overlays:
            emit_overlays(image[0], maps.mask_full[0, 0], args.threshold, out_dir, stem=entry.image_path.stem)
    (out_dir / "scores.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(manifest.entries)} maps to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    model, checkpoint = load_model(args.checkpoint)
    resolution = checkpoint.config.model.resolution
    manifest = load_dataset(args.data, layout=args.layout, split=args.split, resolution=resolution)
    report = evaluate_dataset(
        model,
        manifest,
        no_upsampler=args.no_upsampler,
        pixel_pooling="image" if args.per_image_pixel_ap else "dataset",
        pixel_metrics=not args.no_pixel_metrics,
    )
    paths = write_report(report, args.out)
    if args.overlays:
        overlay_dir = Path(args.out) / "overlays"
        model.eval()
        for entry in manifest.entries[:16]:
            image = manifest.load_image(entry).unsqueeze(0)
            with torch.no_grad():
                maps = model.forward_maps(image, use_upsampler=not args.no_upsampler)
            emit_overlays(image[0], maps.mask_full[0, 0], 0.5, overlay_dir, stem=entry.image_path.stem)
    for name, value in (("image AUROC", report.auroc_det), ("image AP", report.ap_det), ("pixel AP", report.ap_loc)):
        print(f"{name}: {'n/a' if value is None else f'{value:.4f}'}")
    for note in report.notes:
        print(f"note: {note}")
    print(f"report files: {', '.join(str(p) for p in paths.values())}")
    return 0


def _cmd_synth_debug(args) -> int:
    config = _resolve_config(args)
    size = args.size or config.model.resolution
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    import matplotlib.pyplot as plt

    if args.image:
        from .data import load_image

        base = torch.from_numpy(load_image(args.image, size))
    else:
        rng = np.random.default_rng(args.seed)
        field = perlin_field(size, size, 3, rng)
        field = (field - field.min()) / max(field.max() - field.min(), 1e-9)
        base = torch.from_numpy(np.stack([0.2 + 0.6 * field] * 3).astype(np.float32))

    for i in range(args.count):
        mask, area_ok = perlin_mask(size, size, args.seed + i, config.synthesis)
        plt.imsave(out_dir / f"mask_{i:02d}.png", mask.astype(float), cmap="gray", vmin=0, vmax=1)
        smudged, smask = simulate_smudge(base, args.seed + i, config.synthesis)
        plt.imsave(out_dir / f"smudge_{i:02d}.png", smudged.numpy().transpose(1, 2, 0).clip(0, 1))
        plt.imsave(out_dir / f"smudge_mask_{i:02d}.png", smask.numpy().astype(float), cmap="gray", vmin=0, vmax=1)
        if not area_ok:
            print(f"warning: mask_{i:02d} area outside the configured range", file=sys.stderr)
    print(f"wrote {3 * args.count} debug images to {out_dir}")
    return 0


def _cmd_ablate(args) -> int:
    config = _resolve_config(args, stage=2)
    config.stage2.random_sampling = bool(args.random_sampling)
    config.stage2.image_space_anomalies = bool(args.image_space_anomalies)
    config.stage2.loss_img_only = args.loss == "img"
    config.stage2.loss_feat_only = args.loss == "feat"
    config.stage2.no_upsampler = bool(args.no_upsampler)
    config.validate()

    model, checkpoint = load_model(args.checkpoint)
    config.model = checkpoint.config.model
    images = _load_corpus(args, config)
    n_hold = max(1, int(round(args.holdout_fraction * images.shape[0])))
    if images.shape[0] - n_hold < 1:
        raise DatasetError(["ablate needs at least 2 corpus images (train + holdout)"])
    holdout, train = images[:n_hold], images[n_hold:]

    out_dir = Path(args.out)
    result = train_stage2(train, model, config, seed=args.seed, out_dir=out_dir, progress=_progress("ablate"))
    report = evaluate_with_injections(
        result.model, holdout, lambda_s=config.stage2.lambda_s, seed=args.seed + 1, synthesis=config.synthesis,
    )
    write_report(report, out_dir)
    write_config(config, out_dir / "ablation_config.ini")

    row = {
        "lambda_s": config.stage2.lambda_s,
        "random_sampling": config.stage2.random_sampling,
        "image_space_anomalies": config.stage2.image_space_anomalies,
        "loss": args.loss,
        "no_upsampler": config.stage2.no_upsampler,
        "auroc_det": report.auroc_det,
        "ap_det": report.ap_det,
        "ap_loc": report.ap_loc,
    }
    table = out_dir / "ablation.tsv"
    header = "\t".join(row)
    line = "\t".join(str(v) for v in row.values())
    table.write_text(header + "\n" + line + "\n", encoding="utf-8")
    print(f"ablation variant: {line}")
    return 0


_COMMANDS = {
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "train-stage3": _cmd_train_stage3,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "synth-debug": _cmd_synth_debug,
    "ablate": _cmd_ablate,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (DatasetError, FileNotFoundError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
