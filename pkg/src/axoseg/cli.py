"""Command-line entry point: synth, ingest, train, predict, evaluate,
morphometrics, report.

Exit codes: 0 success, 1 usage error, 2 data/contract error. Every run
writes a manifest (command, resolved arguments, seed, version, wall clock)
atomically into its output directory, and re-running with the recorded
snapshot reproduces outputs bit-identically for deterministic commands.

Heavy imports happen inside command handlers: `--threads` must pin the
BLAS pools before numpy first loads.
"""

from __future__ import annotations

import argparse
import glob as globmod
import json
import os
import sys
import time
from pathlib import Path

from .errors import AxosegError, ConfigError, DataError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage by default; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace, started: float):
    from . import __version__

    snapshot = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k != "func"
    }
    manifest = {
        "command": command,
        "config": snapshot,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / ".run_manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, out_dir / "run_manifest.json")


def _expand_models(patterns):
    paths = []
    for pat in patterns:
        hits = sorted(globmod.glob(pat))
        if hits:
            paths.extend(hits)
        else:
            paths.append(pat)  # literal path; load will report if missing
    return paths


def _load_checkpoints(patterns):
    from . import unet
    from .errors import MissingFileError

    ckpts = []
    for p in _expand_models(patterns):
        if not Path(p).exists():
            raise MissingFileError(f"checkpoint not found: {p}")
        ckpts.append(unet.load_checkpoint(p))
    return ckpts


def _tiling_plan(args):
    from .infer import TilingPlan

    return TilingPlan(tile=args.tile, overlap=args.overlap, blend=args.blend)


def _add_tiling_flags(p):
    p.add_argument("--tile", type=int, default=128, help="inference tile size in pixels")
    p.add_argument("--overlap", type=float, default=0.5, help="tile overlap fraction [0,1)")
    p.add_argument("--blend", choices=("gaussian", "uniform"), default="gaussian")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from . import synthgen

    presets = {s.id: s for s in synthgen.domain_presets()}
    chosen = list(presets) if args.preset == "all" else [args.preset]
    out = Path(args.out)
    from dataclasses import replace

    for name in chosen:
        spec = replace(presets[name], seed=args.seed)
        manifest = synthgen.generate(spec, args.n, out / name)
        print(f"{name}: {args.n} images -> {manifest}")
    _write_run_manifest(out, "synth", args, args._started)
    return EXIT_OK


def cmd_ingest(args):
    from . import datahub

    for m in args.manifest:
        ds = datahub.ingest(m)
        dims = {f"{s.height}x{s.width}" for s in ds.samples}
        annotated = sum(1 for s in ds.samples if s.annotated)
        print(
            f"{ds.id}: {len(ds)} samples ({annotated} annotated), "
            f"modality {ds.descriptor.modality}, "
            f"pixel size {ds.descriptor.pixel_size_um} um/px, dims {sorted(dims)}"
        )
    return EXIT_OK


def _parse_ratios(text):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"--split-ratios needs three comma-separated values, got '{text}'")
    return tuple(parts)


def cmd_train(args):
    from . import datahub, trainer, unet
    from .infer import TilingPlan

    datasets = [datahub.ingest(m) for m in args.manifest]
    ratios = _parse_ratios(args.split_ratios)
    splits = [datahub.split(ds, ratios=ratios, seed=args.seed) for ds in datasets]
    if args.mode == "generalist" and len(datasets) < 2:
        raise DataError("generalist mode needs at least two source manifests")

    model_cfg = unet.UNetConfig(depth=args.depth, base_channels=args.base_channels)
    config = trainer.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        patch_size=(args.patch, args.patch),
        lr=args.lr,
        momentum=args.momentum,
        folds=args.folds,
        seed=args.seed,
        steps_per_epoch=args.steps,
        model=model_cfg,
        val_plan=TilingPlan(tile=args.patch, overlap=0.0, blend="uniform"),
        val_max_images=args.val_max_images,
    )
    out = Path(args.out)
    results = trainer.run_experiment(
        trainer.ExperimentPlan(args.mode, config), datasets, splits, out_dir=out
    )
    for name, group in results.items():
        best = ", ".join(f"fold{c.provenance.fold_index}={c.best_val_metric:.3f}" for c in group)
        print(f"{name}: {len(group)} checkpoints ({best})")
    _write_run_manifest(out, "train", args, args._started)
    return EXIT_OK


def cmd_predict(args):
    from . import datahub, infer, pipeline

    ckpts = _load_checkpoints(args.model)
    plan = _tiling_plan(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    members = [c.build_model() for c in ckpts]
    for image_path in args.image:
        p = Path(image_path)
        if not p.exists():
            raise DataError(f"image not found: {p}")
        image = pipeline.preprocess(datahub.load_image_array(p))
        probs = infer.ensemble_predict(members, image, plan)
        axon, myelin = infer.argmax_masks(probs)
        datahub.save_mask(out / f"{p.stem}_seg-axon.png", axon)
        datahub.save_mask(out / f"{p.stem}_seg-myelin.png", myelin)
        print(f"{p.name}: axon {int(axon.sum())} px, myelin {int(myelin.sum())} px")
    _write_run_manifest(out, "predict", args, args._started)
    return EXIT_OK


def cmd_evaluate(args):
    from . import datahub, metrics, unet

    run_dir = Path(args.models)
    if not run_dir.is_dir():
        raise DataError(f"--models must be a training output directory, got {run_dir}")
    models = {}
    for group_dir in sorted(d for d in run_dir.iterdir() if d.is_dir()):
        ckpt_paths = sorted(group_dir.glob("fold*.ckpt"))
        if ckpt_paths:
            models[group_dir.name] = [unet.load_checkpoint(p) for p in ckpt_paths]
    if not models:
        raise DataError(f"no '<model>/fold*.ckpt' checkpoints under {run_dir}")

    ratios = _parse_ratios(args.split_ratios)
    targets = []
    for m in args.manifest:
        ds = datahub.ingest(m)
        targets.append((ds, datahub.split(ds, ratios=ratios, seed=args.seed)))

    matrix = metrics.evaluate_matrix(models, targets, _tiling_plan(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.matrix_to_csv(matrix, out / "metrics.csv")
    metrics.matrix_to_svg(matrix, out / "heatmap.svg")
    for row in matrix.rows:
        cells = []
        for col in matrix.cols:
            cell = matrix.cell(row, col)
            cells.append(
                f"{col}: n/a"
                if not cell.available
                else f"{col}: ax {cell.dice_axon_mean:.3f} my {cell.dice_myelin_mean:.3f}"
            )
        print(f"{row} | " + " | ".join(cells))
    print(f"wrote {out / 'metrics.csv'} and {out / 'heatmap.svg'}")
    _write_run_manifest(out, "evaluate", args, args._started)
    return EXIT_OK


def cmd_morphometrics(args):
    from . import datahub, morpho

    axon = datahub.load_mask_array(Path(args.axon_mask))
    myelin = datahub.load_mask_array(Path(args.myelin_mask))
    result = morpho.extract_instances(axon, myelin, orphan_distance=args.orphan_distance)
    records = morpho.compute_morphometrics(result, args.pixel_size)
    if args.exclude_border:
        records = [r for r in records if not r.touches_border]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "morphometrics.csv"
    morpho.export_records(records, csv_path)
    print(
        f"{len(records)} instances ({len(result.orphan_myelin)} orphan myelin regions) "
        f"-> {csv_path}"
    )
    _write_run_manifest(out, "morphometrics", args, args._started)
    return EXIT_OK


def cmd_report(args):
    import numpy as np
    from PIL import Image

    from . import datahub, infer, pipeline

    ckpts = _load_checkpoints(args.model)
    members = [c.build_model() for c in ckpts]
    plan = _tiling_plan(args)
    ds = datahub.ingest(args.manifest)
    samples = ds.samples[: args.max_rows]
    panels = []
    for sample in samples:
        raw, axon_gt, myelin_gt = datahub.load_sample_arrays(sample)
        image = pipeline.preprocess(raw)
        probs = infer.ensemble_predict(members, image, plan)
        axon_pred, myelin_pred = infer.argmax_masks(probs)
        gray = (image * 255).astype(np.uint8)

        def overlay(axon, myelin):
            rgb = np.stack([gray, gray, gray], axis=-1).astype(np.float32)
            if axon is not None:
                rgb[axon] = 0.4 * rgb[axon] + 0.6 * np.array([255.0, 64.0, 64.0])
            if myelin is not None:
                rgb[myelin] = 0.4 * rgb[myelin] + 0.6 * np.array([64.0, 96.0, 255.0])
            return rgb.astype(np.uint8)

        row = [np.stack([gray] * 3, axis=-1), overlay(axon_gt, myelin_gt), overlay(axon_pred, myelin_pred)]
        panels.append(np.concatenate(row, axis=1))
    sheet = np.concatenate(panels, axis=0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sheet_path = out / "report.png"
    Image.fromarray(sheet, mode="RGB").save(sheet_path)
    print(f"contact sheet ({len(panels)} rows: image | ground truth | prediction) -> {sheet_path}")
    _write_run_manifest(out, "report", args, args._started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="axoseg", description=__doc__.split("\n")[0])
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate synthetic datasets")
    p.add_argument("--preset", choices=("SYN-BF", "SYN-EM", "SYN-BIG", "all"), default="all")
    p.add_argument("--n", type=int, default=12, help="images per preset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate dataset manifests")
    p.add_argument("--manifest", nargs="+", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train dedicated or generalist models")
    p.add_argument("--manifest", nargs="+", required=True)
    p.add_argument("--mode", choices=("dedicated", "generalist"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument(
        "--steps", type=int, default=None, help="optimizer steps per epoch (default: scale with pool size)"
    )
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--patch", type=int, default=256)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.99)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--split-ratios", default="0.7,0.1,0.2")
    p.add_argument("--val-max-images", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment images with trained checkpoints")
    p.add_argument("--model", nargs="+", required=True, help="checkpoint path(s) or globs; several imply ensembling")
    p.add_argument("--image", nargs="+", required=True)
    p.add_argument("--out", required=True)
    _add_tiling_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="cross-evaluate trained models on test splits")
    p.add_argument("--models", required=True, help="training output directory (<name>/fold*.ckpt)")
    p.add_argument("--manifest", nargs="+", required=True, help="target dataset manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--split-ratios", default="0.7,0.1,0.2")
    _add_tiling_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("morphometrics", help="per-axon measurements from masks")
    p.add_argument("--axon-mask", required=True)
    p.add_argument("--myelin-mask", required=True)
    p.add_argument("--pixel-size", type=float, required=True, help="micrometers per pixel")
    p.add_argument("--orphan-distance", type=float, default=3.0)
    p.add_argument("--exclude-border", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_morphometrics)

    p = sub.add_parser("report", help="image | ground truth | prediction contact sheet")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-rows", type=int, default=6)
    _add_tiling_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    started = time.time()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        for var in _THREAD_ENV_VARS:
            os.environ[var] = str(args.threads)
    args._started = started
    try:
        return args.func(args)
    except AxosegError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
