"""Command-line interface.

Subcommands: train, cv, predict, split, synth, inspect, gradcheck.
Exit codes: 0 success, 2 usage or configuration error, 3 data or file
format error, 4 numeric failure (non-finite values during computation).
Every run is deterministic given its seed and a fixed thread count, and
every output file embeds the configuration hash and seed it came from.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data, gradcheck, model, train
from .config import RunConfig, load_run_config, run_config_from_dict
from .errors import ConfigError, DataError, FormatError, NumericError, ParameterError, ShapeError
from .loss_metrics import EvalReport, LossConfig
from .rng import substream
from .tensor import read_tensor_file, write_tensor_file

# class colors for overlays: blue, purple, green, yellow, orange, red, then
# cyan and magenta for synthetic classes beyond the standard six
PALETTE = [
    (0, 0, 255),
    (128, 0, 128),
    (0, 200, 0),
    (255, 255, 0),
    (255, 165, 0),
    (255, 0, 0),
    (0, 255, 255),
    (255, 0, 255),
]


def write_ppm(path, rgb: np.ndarray, comment: str = "") -> None:
    """Binary P6 image; `rgb` is H x W x 3 uint8."""
    h, w, _ = rgb.shape
    header = f"P6\n# {comment}\n{w} {h}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rgb.astype(np.uint8).tobytes())


def overlay_image(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Blend the grayscale input with the class palette, half and half."""
    gray = image[0].astype(np.float64)
    span = gray.max() - gray.min()
    gray = (gray - gray.min()) / span if span > 0 else np.zeros_like(gray)
    colors = np.array([PALETTE[c % len(PALETTE)] for c in range(labels.max() + 1)])
    rgb = colors[labels].astype(np.float64)
    blended = 0.5 * rgb + 0.5 * (gray[..., None] * 255.0)
    return np.clip(blended + 0.5, 0, 255).astype(np.uint8)


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return run_config_from_dict({})
    return load_run_config(path)


def _load_split(path) -> data.SplitAssignment:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable split file: {exc}") from exc
    return data.SplitAssignment.from_json_dict(doc)


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_runlog(path, entries) -> None:
    with open(path, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _report_doc(report: EvalReport, run: RunConfig) -> dict:
    doc = report.to_json_dict()
    doc["config_hash"] = run.hash()
    doc["seed"] = run.seed
    return doc


def cmd_train(args) -> int:
    run = _load_config(args.config)
    manifest = data.load_manifest(args.manifest)
    split = _load_split(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train.run_fold(
        manifest, split, args.fold, run.network, run.loss, run.settings,
        checkpoint_dir=out, config_hash=run.hash(),
    )
    model.save_checkpoint(result.network, out / "best.ckpt")
    _write_runlog(out / "runlog.jsonl", result.runlog)
    _write_json(out / "report.json", _report_doc(result.report, run))
    print(
        f"fold {args.fold}: best epoch {result.best_epoch} "
        f"bacc {result.report.bacc:.4f} ({result.epochs_run} epochs)"
    )
    return 0


def cmd_cv(args) -> int:
    run = _load_config(args.config)
    manifest = data.load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    alphas = [float(v) for v in args.sweep_alpha.split(",")] if args.sweep_alpha else None

    if alphas is None:
        result = train.run_cv(manifest, run.network, run.loss, run.settings, folds=args.folds,
                               config_hash=run.hash())
        _write_cv_outputs(out, run, result, suffix="")
        print(f"cv mean bacc {result.mean_bacc:.4f}")
        return 0

    sweep_rows = []
    summary = {}
    for alpha in alphas:
        loss_cfg = LossConfig(alpha=alpha)
        result = train.run_cv(manifest, run.network, loss_cfg, run.settings, folds=args.folds,
                               config_hash=run.hash())
        tag = f"alpha{alpha:g}"
        _write_cv_outputs(out, run, result, suffix=f"_{tag}")
        summary[str(alpha)] = result.mean_bacc
        for fold, runlog in enumerate(result.runlogs):
            for entry in runlog:
                sweep_rows.append((alpha, fold, entry["epoch"], entry["val_bacc"]))
        print(f"alpha {alpha:g}: mean bacc {result.mean_bacc:.4f}")
    with open(out / "sweep.csv", "w") as fh:
        fh.write("alpha,fold,epoch,bacc\n")
        for row in sweep_rows:
            fh.write(f"{row[0]:g},{row[1]},{row[2]},{row[3]:.6f}\n")
    _write_json(out / "sweep_summary.json", {"mean_bacc": summary, "config_hash": run.hash(), "seed": run.seed})
    return 0


def _write_cv_outputs(out: Path, run: RunConfig, result, suffix: str) -> None:
    doc = {
        "mean_bacc": result.mean_bacc,
        "per_fold": [r.to_json_dict() for r in result.fold_reports],
        "pooled_confusion": result.pooled_confusion.tolist(),
        "split": result.split.to_json_dict(),
        "config_hash": run.hash(),
        "seed": run.seed,
    }
    _write_json(out / f"cv_report{suffix}.json", doc)
    for fold, runlog in enumerate(result.runlogs):
        _write_runlog(out / f"runlog{suffix}_fold{fold}.jsonl", runlog)


def cmd_predict(args) -> int:
    net = model.load_checkpoint(args.checkpoint)
    image_path = Path(args.image)
    if image_path.suffix.lower() == ".pgm":
        image = data.read_pgm(image_path).astype(np.float32)[None]
    else:
        image = read_tensor_file(image_path).astype(np.float32)
        if image.ndim == 2:
            image = image[None]
    probs, _ = model.forward(net, image, mode="eval")
    labels = probs.argmax(axis=0).astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = f"config_hash={model.config_hash(net.config)} seed={net.rng_seed}"
    write_tensor_file(labels, out / "labels.tsr")
    write_ppm(out / "overlay.ppm", overlay_image(image, labels), comment=stamp)
    _write_json(
        out / "meta.json",
        {
            "config_hash": model.config_hash(net.config),
            "seed": net.rng_seed,
            "image": str(image_path),
            "shape": list(labels.shape),
            "class_pixels": np.bincount(labels.reshape(-1), minlength=net.config.num_classes).tolist(),
        },
    )
    print(f"wrote {out / 'labels.tsr'} and {out / 'overlay.ppm'}")
    return 0


def cmd_split(args) -> int:
    manifest = data.load_manifest(args.manifest)
    split = data.hill_climb_split(manifest, args.folds, args.iters, substream(args.seed, "split"))
    doc = split.to_json_dict()
    doc["seed"] = args.seed
    doc["folds"] = args.folds
    doc["max_stale_iters"] = args.iters
    _write_json(args.out, doc)
    sizes = split.fold_sizes()
    print(f"fold sizes {sizes}, mean entropy {split.mean_entropy:.4f}")
    return 0


def cmd_synth(args) -> int:
    manifest = data.make_synthetic_manifest(
        args.out,
        seed=args.seed,
        count=args.count,
        size=args.size,
        num_classes=args.classes,
        unlabeled_fraction=args.unlabeled_fraction,
        region_granularity=args.granularity,
    )
    _write_json(
        Path(args.out) / "gen_meta.json",
        {
            "seed": args.seed,
            "count": args.count,
            "size": args.size,
            "classes": args.classes,
            "unlabeled_fraction": args.unlabeled_fraction,
            "granularity": args.granularity,
        },
    )
    print(f"wrote {len(manifest.entries)} mosaics to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    if args.table2:
        print(f"{'configuration':<26} {'params':>9} {'x1e5':>6} {'reported':>9} {'delta%':>7}")
        for variant in model.builtin_variants():
            count = model.param_count(model.build(variant.config, seed=0))
            delta = 100.0 * (count / (variant.reported_params_1e5 * 1e5) - 1.0)
            print(
                f"{variant.name:<26} {count:>9d} {count / 1e5:>6.2f} "
                f"{variant.reported_params_1e5:>9.2f} {delta:>+7.2f}"
            )
        return 0

    run = _load_config(args.config)
    cfg = run.network
    net = model.build(cfg, seed=run.seed)
    print(f"config hash:      {run.hash()}")
    print(f"parameters:       {model.param_count(net)} ({model.param_count(net) / 1e5:.2f} x 1e5)")
    print(f"receptive field:  {model.receptive_field(cfg)}")
    print()
    print(f"{'layer':<14} {'kernel':>7} {'dilation':>9} {'in->out':>12} {'params':>8}")
    in_ch = 1
    for i, blk in enumerate(net.blocks):
        p = blk.conv.weights.size + (blk.conv.bias.size if blk.conv.bias is not None else 0)
        if blk.norm is not None:
            p += 4 * blk.norm.gamma.size
        print(f"block{i:02d}        {'3x3':>7} {blk.conv.dilation:>9} {in_ch:>5} -> {cfg.kernels_per_layer:<4} {p:>8}")
        in_ch = cfg.kernels_per_layer
    in_ch = cfg.concat_channels()
    for i, blk in enumerate(net.head_blocks):
        width = blk.conv.weights.shape[0]
        p = blk.conv.weights.size + (blk.conv.bias.size if blk.conv.bias is not None else 0)
        if blk.norm is not None:
            p += 4 * blk.norm.gamma.size
        print(f"head{i:02d}         {'1x1':>7} {1:>9} {in_ch:>5} -> {width:<4} {p:>8}")
        in_ch = width
    p = net.classifier.weights.size + net.classifier.bias.size
    print(f"classifier     {'1x1':>7} {1:>9} {in_ch:>5} -> {cfg.num_classes:<4} {p:>8}")
    print()
    coverage = model.sampling_coverage(cfg)
    final = coverage[-1]
    print("sampling coverage by depth (offsets reachable from one output):")
    for row in coverage:
        worst_gap = max(row.gap_histogram) if row.gap_histogram else 0
        print(
            f"  depth {row.depth:>2} (D={row.dilation:<3}) extent {row.extent:>4} "
            f"offsets {row.offsets:>7} fill {row.coverage_fraction:6.1%} max gap {worst_gap}"
        )
    print(f"final: {final.offsets} offsets inside a {final.extent}x{final.extent} field")
    return 0


def cmd_gradcheck(args) -> int:
    config = _load_config(args.config).network if args.config else gradcheck.default_check_config()
    results = gradcheck.run_suite(config, seed=args.seed)
    worst = max(r.error for r in results)
    for r in results:
        print(f"{r.name:30s} {r.error:10.3e} {'ok' if r.ok() else 'FAIL'}")
    print(f"worst relative error {worst:.3e} (tolerance {gradcheck.SUITE_TOLERANCE:g})")
    return 0 if all(r.ok() for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="texseg",
        description="Dilated fully-convolutional semantic texture segmentation.",
    )
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one fold against a split")
    p.add_argument("--config", help="run-config JSON (defaults apply when omitted)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True, help="split JSON from `texseg split`")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="full cross validation, optionally sweeping alpha")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--sweep-alpha", help="comma-separated alpha values")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict", help="label map and color overlay for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="TSR1 tensor or PGM image")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("split", help="entropy-maximizing case split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--iters", type=int, default=2000, help="stop after this many stale proposals")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="generate a synthetic texture-mosaic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--unlabeled-fraction", type=float, default=0.3)
    p.add_argument("--granularity", type=int, default=None, help="regions per mosaic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="layer table, parameter count, receptive field, sampling")
    p.add_argument("--config")
    p.add_argument("--table2", action="store_true", help="print the built-in configuration grid")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, ShapeError, ParameterError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
