"""Command-line workflows: synth, normals, preprocess, train, eval, cv, predict.

Every command is seed-driven and reproducible: identical arguments produce
bit-identical artifacts. Exit codes: 0 success, 1 runtime error (message on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cloud import AugmentationParams, NormalEstimationParams, PointCloud, estimate_normals
from .errors import GraspCloudError
from .formats import DatasetIndex, load_manifest, parse_pcd, write_pcd
from .labels import LABEL_NAMES, NUM_CLASSES
from .model import PointNetConfig, build, load_checkpoint, predict, save_checkpoint
from .pipeline import (
    Metrics,
    TrainConfig,
    confusion_to_csv,
    cross_validate,
    evaluate,
    metrics_to_json,
    preprocess,
    split,
    summarize_folds,
    train,
)
from .synth import SynthConfig, generate_dataset, write_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graspcloud",
        description="Grasp-type classification workflows for 2.5-D point clouds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise-sigma", type=float, default=0.002)
    p.add_argument("--camera-distance", type=float, default=0.6)
    p.add_argument("--grid-resolution", type=int, default=256)
    p.add_argument("--hard", action="store_true", help="overlapping scale distributions")

    p = sub.add_parser("normals", help="attach estimated surface normals to a cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--viewpoint", default="0,0,0", help="sensor position x,y,z")
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", help="normals/normalize/resample one cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--model", choices=("basic", "extended"), default="basic")
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a classifier on a manifest")
    _add_training_flags(p)
    p.add_argument("--out", required=True, help="checkpoint output path")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")

    p = sub.add_parser("cv", help="k-fold cross-validation on a manifest")
    _add_training_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")

    p = sub.add_parser("predict", help="classify one cloud with a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", choices=("basic", "extended"), default="basic")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--jitter", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--granularity", choices=("cloud", "object"), default="cloud")


def run(argv) -> int:
    """Dispatch a command line; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        handler = _HANDLERS[args.command]
        handler(args)
        return 0
    except (GraspCloudError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # contract: structured message, never a crash
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


# -- command handlers -----------------------------------------------------------


def _cmd_synth(args) -> None:
    config = SynthConfig(
        per_class=args.per_class,
        noise_sigma=args.noise_sigma,
        camera_distance=args.camera_distance,
        grid_resolution=args.grid_resolution,
        seed=args.seed,
        hard_mode=args.hard,
    )
    clouds, index = generate_dataset(config)
    write_dataset(clouds, index, args.out)
    print(f"wrote {len(clouds)} clouds and manifest.csv to {args.out}")


def _parse_viewpoint(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"viewpoint must be x,y,z, got {text!r}")
    return np.array([float(v) for v in parts])


def _cmd_normals(args) -> None:
    cloud = parse_pcd(Path(args.input).read_bytes())
    params = NormalEstimationParams(k=args.k, viewpoint=_parse_viewpoint(args.viewpoint))
    out = estimate_normals(cloud, params)
    Path(args.out).write_bytes(write_pcd(out))
    print(f"wrote {args.out} ({len(out)} points, normals attached)")


def _model_config(args) -> PointNetConfig:
    return PointNetConfig(use_normals=args.model == "extended", points_per_cloud=args.points)


def _cmd_preprocess(args) -> None:
    cloud = parse_pcd(Path(args.input).read_bytes())
    out = preprocess(
        cloud,
        _model_config(args),
        NormalEstimationParams(k=args.k),
        np.random.default_rng(args.seed),
    )
    Path(args.out).write_bytes(write_pcd(out))
    print(f"wrote {args.out} ({len(out)} points)")


def _load_labeled_clouds(manifest_path: str) -> tuple[list[PointCloud], DatasetIndex]:
    path = Path(manifest_path)
    index = load_manifest(path.read_bytes())
    base = path.parent
    clouds = []
    for row in index.rows:
        cloud_path = Path(row.path)
        if not cloud_path.is_absolute():
            cloud_path = base / cloud_path
        cloud = parse_pcd(cloud_path.read_bytes())
        cloud.label = row.label
        clouds.append(cloud)
    return clouds, index


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        augmentation=AugmentationParams(jitter_sigma=args.jitter),
        model=_model_config(args),
        split_granularity=args.granularity,
    )


def _cmd_train(args) -> None:
    clouds, index = _load_labeled_clouds(args.manifest)
    config = _train_config(args)
    seeds = np.random.SeedSequence(args.seed).spawn(3)
    pre_rng = np.random.default_rng(seeds[0])
    normal_params = NormalEstimationParams(k=args.k)
    prepped = [preprocess(c, config.model, normal_params, pre_rng) for c in clouds]
    for cloud, row in zip(prepped, index.rows):
        cloud.label = row.label
    pos = {row.path: i for i, row in enumerate(index.rows)}

    train_idx, val_idx, test_idx = split(index, config)
    train_set = [prepped[pos[r.path]] for r in train_idx.rows]
    val_set = [prepped[pos[r.path]] for r in val_idx.rows]
    test_set = [prepped[pos[r.path]] for r in test_idx.rows]

    model = build(config.model, np.random.default_rng(seeds[1]))
    model, metrics = train(model, train_set, val_set, config, np.random.default_rng(seeds[2]))
    Path(args.out).write_bytes(save_checkpoint(model))
    print(f"wrote checkpoint to {args.out} ({model.global_step} steps)")
    if test_set:
        test_metrics = evaluate(model, test_set)
        print("held-out test metrics:")
        sys.stdout.write(report(test_metrics, "text").decode())


def _cmd_eval(args) -> None:
    model = load_checkpoint(Path(args.checkpoint).read_bytes())
    clouds, index = _load_labeled_clouds(args.manifest)
    pre_rng = np.random.default_rng(args.seed)
    normal_params = NormalEstimationParams(k=args.k)
    prepped = [preprocess(c, model.config, normal_params, pre_rng) for c in clouds]
    for cloud, row in zip(prepped, index.rows):
        cloud.label = row.label
    metrics = evaluate(model, prepped)
    sys.stdout.write(report(metrics, args.format).decode())


def _cmd_cv(args) -> None:
    clouds, index = _load_labeled_clouds(args.manifest)
    config = _train_config(args)
    fold_metrics, _ = cross_validate(clouds, index, args.folds, config)
    sys.stdout.write(report(fold_metrics, args.format).decode())


def _cmd_predict(args) -> None:
    model = load_checkpoint(Path(args.checkpoint).read_bytes())
    cloud = parse_pcd(Path(args.input).read_bytes())
    prepped = preprocess(
        cloud,
        model.config,
        NormalEstimationParams(k=args.k),
        np.random.default_rng(args.seed),
    )
    label, probs = predict(model, prepped)
    print(label.token)
    for cls in range(NUM_CLASSES):
        print(f"  {LABEL_NAMES[cls]:<22s} {probs[cls]:.4f}")


_HANDLERS = {
    "synth": _cmd_synth,
    "normals": _cmd_normals,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "cv": _cmd_cv,
    "predict": _cmd_predict,
}


# -- reports ------------------------------------------------------------------------


def report(metrics, fmt: str = "text") -> bytes:
    """Render metrics for humans or machines.

    ``metrics`` is a single Metrics (one evaluation) or a list of per-fold
    Metrics; the text layout gives one accuracy row per grasp class plus an
    overall row (mean and standard deviation across folds), followed by the
    confusion grid.
    """
    folds = list(metrics) if isinstance(metrics, (list, tuple)) else [metrics]
    if fmt == "json":
        if len(folds) == 1:
            return metrics_to_json(folds[0])
        summary = summarize_folds(folds)
        payload = {
            "folds": [json.loads(metrics_to_json(m).decode()) for m in folds],
            "summary": {
                "per_class_mean": summary.per_class_mean.tolist(),
                "per_class_std": summary.per_class_std.tolist(),
                "overall_mean": summary.overall_mean,
                "overall_std": summary.overall_std,
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True).encode()
    if fmt == "csv":
        total = _combined_confusion(folds)
        return confusion_to_csv(total)
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")

    summary = summarize_folds(folds)
    width = max(len(name) for name in LABEL_NAMES) + 2
    lines = [f"{'grasp':<{width}}accuracy"]
    for cls in range(NUM_CLASSES):
        lines.append(
            f"{LABEL_NAMES[cls]:<{width}}"
            f"{summary.per_class_mean[cls]:.3f} ± {summary.per_class_std[cls]:.3f}"
        )
    lines.append(f"{'overall':<{width}}{summary.overall_mean:.3f} ± {summary.overall_std:.3f}")
    lines.append("")
    lines.append("confusion (rows = true, cols = predicted)")
    total = _combined_confusion(folds)
    short = [name.replace(" ", "_")[:10] for name in LABEL_NAMES]
    lines.append(f"{'':<{width}}" + "".join(f"{s:>11}" for s in short))
    for cls in range(NUM_CLASSES):
        row = "".join(f"{int(v):>11d}" for v in total.confusion[cls])
        lines.append(f"{LABEL_NAMES[cls]:<{width}}" + row)
    lines.append("")
    return ("\n".join(lines)).encode()


def _combined_confusion(folds: list[Metrics]) -> Metrics:
    total = folds[0].confusion.copy()
    for m in folds[1:]:
        total = total + m.confusion
    support = total.sum(axis=1)
    per_class = np.divide(
        np.diag(total).astype(np.float64),
        support,
        out=np.zeros(NUM_CLASSES),
        where=support > 0,
    )
    return Metrics(
        per_class_accuracy=per_class,
        overall_accuracy=float(np.trace(total) / max(total.sum(), 1)),
        confusion=total,
    )
