"""``cellmamba`` command line: train, eval, infer, gradcheck, bench, synth, convert.

Exit codes: 0 success, 1 validation failure, 2 numeric failure (NaN loss or a
gradient check over tolerance).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import ConfigurationError, ShapeError
from .backbone import check_image_size
from .config import load_config
from .data import (
    DatasetManifest,
    ImageRecord,
    extract_patches,
    load_dataset,
    load_images,
    mask_to_bboxes,
    read_image,
    read_label_raster,
    synth_generate,
    write_dataset,
)
from .losses import NumericError
from .metrics import REPORT_SCHEMA, EvalReport

logger = logging.getLogger("cellmamba")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .plots import plot_training
    from .train import Trainer, targets_from

    run = load_config(args.config)
    train_cfg = run.train
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.epochs is not None:
        train_cfg = type(train_cfg).from_dict({**train_cfg.to_dict(), "epochs": args.epochs, "milestones": None})
    manifest = load_dataset(args.data)
    images = load_images(manifest, args.data)
    model_cfg = run.model
    if manifest.num_classes != model_cfg.num_classes:
        model_cfg = type(model_cfg).from_dict({**model_cfg.to_dict(), "num_classes": manifest.num_classes})
    out = Path(args.out)
    trainer = Trainer(model_cfg, train_cfg, run.loss, out)
    (out / "config.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "loss": asdict(run.loss), "eval": asdict(run.eval)}, indent=1)
    )
    t0 = time.perf_counter()
    result = trainer.fit(images, targets_from(manifest))
    elapsed = time.perf_counter() - t0
    plot_training(result.history, out / "loss_curve.png")
    last = result.history[-1]
    print(f"trained {train_cfg.epochs} epochs in {elapsed:.1f}s; final loss {last.loss:.4f}; checkpoint {out / 'checkpoint'}")
    return EXIT_OK


def _print_report(report: EvalReport) -> None:
    print(f"{'class':>6} {'AP':>7} {'AP50':>7} {'AP75':>7} {'#gt':>5}")
    fmt = lambda v: "   n/a" if v is None else f"{v:7.3f}"  # noqa: E731
    for row in report.per_class_ap:
        print(f"{row['class_id']:>6} {fmt(row['ap'])} {fmt(row['ap50'])} {fmt(row['ap75'])} {row['num_ground_truth']:>5}")
    print(f"mAP {report.map:.3f}  mAP@50 {report.map50:.3f}  mAP@75 {report.map75:.3f}")
    print(f"P {report.precision:.3f}  R {report.recall:.3f}  F1 {report.f1:.3f}  at threshold {report.best_threshold:.2f}")
    print(f"params {report.params_m}M  time {report.time_ms_per_patch:.1f} ms/patch")


def cmd_eval(args) -> int:
    import jsonschema

    from .inference import evaluate_model, ground_truth
    from .plots import plot_pr_curves
    from .train import inference_state, model_from_checkpoint

    run = load_config(args.config)
    model, ckpt = model_from_checkpoint(args.ckpt)
    manifest = load_dataset(args.data)
    if not manifest.images:
        raise CliError("cannot evaluate an empty image set")
    if manifest.num_classes != model.cfg.num_classes:
        raise CliError(f"checkpoint predicts {model.cfg.num_classes} classes, dataset has {manifest.num_classes}")
    images = load_images(manifest, args.data)
    state = inference_state(ckpt)
    report, dets = evaluate_model(model, manifest, images, state, run.eval)
    payload = report.to_dict()
    jsonschema.validate(payload, REPORT_SCHEMA)
    _print_report(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(payload, indent=1))
        with open(out / "per_class_ap.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["class_id", "ap", "ap50", "ap75", "num_ground_truth"])
            writer.writeheader()
            writer.writerows(report.per_class_ap)
        plot_pr_curves(dets, ground_truth(manifest), model.cfg.num_classes, out / "pr_curves.png")
    else:
        print(json.dumps(payload))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .inference import predict
    from .plots import draw_overlay
    from .train import inference_state, model_from_checkpoint

    model, ckpt = model_from_checkpoint(args.ckpt)
    image = read_image(args.image)
    try:
        check_image_size(*image.shape[:2])
    except (ConfigurationError, ShapeError) as exc:
        raise CliError(str(exc)) from exc
    run = load_config(args.config)
    dets = predict(model, [image], inference_state(ckpt), run.eval)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = [{"bbox": [round(float(v), 3) for v in d.bbox], "class_id": d.class_id, "score": round(float(d.score), 5)} for d in dets]
    (out / "detections.json").write_text(json.dumps({"image": str(args.image), "detections": records}, indent=1))
    drawn = draw_overlay(image, dets, out / "overlay.png")
    print(f"{len(records)} detections, {drawn} boxes drawn -> {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    dtypes = {"64": [np.float64], "32": [np.float32], "both": [np.float64, np.float32]}[args.precision]
    failed = []
    for dtype in dtypes:
        results = run_gradcheck(dtype, seed=args.seed or 0, samples=args.samples)
        bits = np.dtype(dtype).itemsize * 8
        for r in results:
            tol = args.tolerance if args.tolerance is not None else r.tolerance
            ok = r.max_rel_error < tol
            print(f"{bits}-bit {r.component:<24} max_rel_err={r.max_rel_error:.3e} coords={r.coordinates:<4} {'ok' if ok else 'FAIL'}")
            if not ok:
                failed.append(f"{r.component} ({bits}-bit)")
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import OPS, bench
    from .plots import plot_bench

    ops = OPS if args.op == "both" else (args.op,)
    results = {}
    rows = []
    for op in ops:
        try:
            r = bench(op, args.lengths, dim=args.dim, repeats=args.repeats)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        results[op] = r
        rows += r.rows()
        for n, s in zip(r.lengths, r.seconds):
            print(f"{op:<8} L={n:<6} {s * 1e3:9.3f} ms")
        print(f"{op:<8} exponent {'unreported' if r.exponent is None else f'{r.exponent:.3f}'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["op", "length", "seconds"])
            writer.writeheader()
            writer.writerows(rows)
        (out / "bench.json").write_text(json.dumps({op: {"lengths": r.lengths, "seconds": r.seconds, "exponent": r.exponent} for op, r in results.items()}, indent=1))
        plot_bench({op: (r.lengths, r.seconds, r.exponent) for op, r in results.items()}, out / "bench.png")
    return EXIT_OK


def cmd_synth(args) -> int:
    manifest, images = synth_generate(args.n, args.size, args.classes, args.density, args.seed if args.seed is not None else 0)
    path = write_dataset(args.out, manifest, images)
    print(f"wrote {len(images)} images, {len(manifest.annotations)} boxes -> {path}")
    return EXIT_OK


def cmd_convert(args) -> int:
    """``--data`` holds ``images/<stem>.png`` and ``labels/<stem>.{png,pgm}``; optional ``classes.json``
    maps ``stem -> {instance id: category id}``."""
    root = Path(args.data)
    class_maps = json.loads((root / "classes.json").read_text()) if (root / "classes.json").exists() else {}
    label_files = sorted(p for p in (root / "labels").iterdir() if p.suffix.lower() in (".png", ".pgm"))
    if not label_files:
        raise CliError(f"no label rasters in {root / 'labels'}")
    manifest = DatasetManifest()
    images = []
    cat_ids = set()
    for label_path in label_files:
        image = read_image(root / "images" / f"{label_path.stem}.png")
        mask = read_label_raster(label_path)
        if mask.shape != image.shape[:2]:
            raise CliError(f"{label_path.name}: mask {mask.shape} does not match image {image.shape[:2]}")
        class_of = {int(k): int(v) for k, v in class_maps.get(label_path.stem, {}).items()}
        anns = mask_to_bboxes(mask, class_of, default_category=1)
        tiles = extract_patches(image, anns, args.size) if args.size else [(image, anns, (0, 0))]
        for patch, kept, (x0, y0) in tiles:
            img_id = len(images)
            suffix = f"_{y0}_{x0}" if args.size else ""
            manifest.images.append(ImageRecord(img_id, f"{label_path.stem}{suffix}.png", patch.shape[1], patch.shape[0]))
            for a in kept:
                a.image_id = img_id
                manifest.annotations.append(a)
                cat_ids.add(a.category_id)
            images.append(patch)
    manifest.categories = [{"id": c, "name": f"class_{c}"} for c in sorted(cat_ids or {1})]
    path = write_dataset(args.out, manifest.validate(), images)
    print(f"wrote {len(images)} images, {len(manifest.annotations)} boxes -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (training stays deterministic at 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cellmamba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", required=True, help="run directory (log, checkpoint, figures)")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for report.json, per_class_ap.csv, pr_curves.png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="detect cells in one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="directory for detections.json and overlay.png")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    p.add_argument("--tolerance", type=float, help="override the per-precision tolerance")
    p.add_argument("--precision", choices=["64", "32", "both"], default="both")
    p.add_argument("--samples", type=int, default=8, help="coordinates checked per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[common], help="mixer wall time vs sequence length")
    p.add_argument("--op", choices=["ncmamba", "msa", "both"], default="both")
    p.add_argument("--lengths", type=int, nargs="+", default=[1024, 2048, 4096, 8192])
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", help="directory for bench.csv, bench.json, bench.png")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cell dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--size", type=int, choices=[128, 256], default=256)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--density", type=float, default=6.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", parents=[common], help="instance masks -> box manifest")
    p.add_argument("--data", required=True, help="directory with images/ and labels/")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, choices=[128, 256], help="tile into patches of this size")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
