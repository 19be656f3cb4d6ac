"""``mcar`` command line: gen-data, train, eval, localize, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage error (argparse).
Every subcommand first prints its resolved configuration as one JSON line on
stderr, so stdout stays machine readable.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .backbone import BackboneConfig, CheckpointError, ModelParams, load_checkpoint, save_checkpoint
from .bench import linear_fit, time_stages
from .metrics import evaluate
from .region import McarConfig, Region
from .synth import (
    DatasetError,
    SynthSpec,
    default_classes,
    generate,
    load,
    read_meta,
    read_ppm,
    resolve_split,
    stack,
    write_ppm,
)
from .tensor import PoolingStrategy
from .two_stream import TrainConfig, TrainingDivergedError, predict, predict_batch, train

log = logging.getLogger("mcar")

# one overlay colour per class id, cycled
BOX_COLORS = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180),
    (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
]

TRAIN_DEFAULTS = TrainConfig()


class CliError(Exception):
    """A runtime failure reported as a one-line message with exit code 1."""


def _print_config(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "config": config}, sort_keys=True), file=sys.stderr, flush=True)


def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError(f"expected non-negative integers, got {text!r}")
    return values


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _load_split(path, prefer: str):
    try:
        split = resolve_split(path, prefer)
        samples = load(split)
    except (DatasetError, OSError) as exc:
        raise CliError(f"cannot load dataset {path}: {exc}") from None
    if not samples:
        raise CliError(f"dataset split {split} is empty")
    return split, samples


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (CheckpointError, OSError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from None


def _check_compatible(params: ModelParams, images: np.ndarray, labels: np.ndarray) -> None:
    expected = {"input_size": params.config.input_size, "num_classes": params.num_classes}
    found = {"input_size": images.shape[1] if images.shape[1] == images.shape[2] else list(images.shape[1:3]),
             "num_classes": labels.shape[1]}
    diff = [f"{k}: checkpoint {expected[k]} != data {found[k]}" for k in expected if expected[k] != found[k]]
    if diff:
        raise CliError("checkpoint does not match the dataset; manifest diff: " + "; ".join(diff))


# --- gen-data ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SynthSpec(
        canvas=args.canvas,
        classes=default_classes(args.classes),
        objects_per_image=tuple(args.objects),
        scale_px=tuple(args.scale),
        occlusion=args.occlusion,
        noise_std=args.noise,
        counts=(args.train_n, args.val_n),
        seed=args.seed,
    )
    config = {
        "out": str(args.out), "canvas": spec.canvas, "classes": [c.name for c in spec.classes],
        "objects_per_image": list(spec.objects_per_image), "scale_px": list(spec.scale_px),
        "occlusion": spec.occlusion, "noise_std": spec.noise_std, "train_n": args.train_n,
        "val_n": args.val_n, "seed": spec.seed,
    }
    _print_config("gen-data", config)
    try:
        generate(spec, args.out)
    except ValueError as exc:
        raise CliError(f"unsatisfiable dataset spec: {exc}") from None
    print(f"wrote {args.train_n} train / {args.val_n} val images to {args.out}")
    return 0


# --- train ------------------------------------------------------------------

def _train_config(args, input_size: int) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.wd,
        lr_drop_epochs=args.lr_drops,
        loss_mode=args.loss,
        mcar=McarConfig(top_n=args.topn, tau=args.tau, selection=args.select),
        pooling=PoolingStrategy(args.pool, args.lam),
        backbone=BackboneConfig(input_size, tuple(args.channels)),
        flip=not args.no_flip,
        seed=args.seed,
        local_warmup_epochs=args.warmup,
    )


def cmd_train(args) -> int:
    _, train_samples = _load_split(args.data, "train")
    val_images = val_labels = None
    try:
        val_split = resolve_split(args.data, "val")
        if val_split != resolve_split(args.data, "train"):
            _, val_samples = _load_split(val_split, "val")
            val_images, val_labels = stack(val_samples)
    except DatasetError:
        pass
    images, labels = stack(train_samples)
    try:
        config = _train_config(args, images.shape[1])
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out)
    history_path = Path(args.history) if args.history else out.with_suffix(".history.jsonl")
    resolved = {**config.to_dict(), "data": str(args.data), "out": str(out), "history": str(history_path)}
    _print_config("train", resolved)
    out.parent.mkdir(parents=True, exist_ok=True)
    history_path.parent.mkdir(parents=True, exist_ok=True)
    with open(history_path, "w") as fh:
        def on_epoch(rec):
            line = rec.to_json()
            print(line, flush=True)
            fh.write(line + "\n")
            fh.flush()

        try:
            params, _ = train(images, labels, config, val_images, val_labels, on_epoch=on_epoch)
        except TrainingDivergedError as exc:
            raise CliError(f"training diverged: {exc}") from None
    meta = read_class_names(args.data)
    save_checkpoint(out, params, {"train_config": resolved, "class_names": meta})
    print(f"checkpoint written to {out}")
    return 0


def read_class_names(data) -> Optional[List[str]]:
    try:
        return read_meta(resolve_split(data, "train")).classes
    except DatasetError:
        return None


# --- eval -------------------------------------------------------------------

def _mcar_from(args, extra: dict) -> McarConfig:
    saved = extra.get("train_config", {}).get("mcar", {})
    return McarConfig(
        top_n=args.topn if args.topn is not None else saved.get("top_n", 4),
        tau=args.tau if args.tau is not None else saved.get("tau", 0.5),
        selection=args.select,
    )


def cmd_eval(args) -> int:
    params, extra = _load_ckpt(args.ckpt)
    split, samples = _load_split(args.data, "val")
    images, labels = stack(samples)
    _check_compatible(params, images, labels)
    try:
        cfg = _mcar_from(args, extra)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    _print_config("eval", {
        "ckpt": str(args.ckpt), "data": str(split), "threshold": args.threshold, "top3": args.top3,
        "topn": cfg.top_n, "tau": cfg.tau, "select": cfg.selection, "seed": args.seed,
    })
    fused, y_g, y_l, _ = predict_batch(images, params, cfg, seed=args.seed)
    names = extra.get("class_names") or None
    report = evaluate(fused, labels, args.threshold, names)
    doc = report.to_dict()
    doc["assignment"] = "top3" if args.top3 else "threshold"
    doc["prf"] = doc["top3"] if args.top3 else doc["all"]
    doc["global_mAP"] = evaluate(y_g, labels, args.threshold).map
    doc["images"] = len(samples)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


# --- localize ---------------------------------------------------------------

def _draw_box(img: np.ndarray, r: Region, color) -> None:
    c = np.asarray(color, dtype=np.float32) / 255.0
    img[r.y_lo, r.x_lo:r.x_hi + 1] = c
    img[r.y_hi, r.x_lo:r.x_hi + 1] = c
    img[r.y_lo:r.y_hi + 1, r.x_lo] = c
    img[r.y_lo:r.y_hi + 1, r.x_hi] = c


def _svg(size: int, records) -> str:
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'  <rect x="0" y="0" width="{size}" height="{size}" fill="none" stroke="#888" stroke-width="0.5"/>',
    ]
    for r, label, color in records:
        hexc = "#%02x%02x%02x" % color
        lines.append(
            f'  <rect x="{r.x_lo}" y="{r.y_lo}" width="{r.width}" height="{r.height}" '
            f'fill="none" stroke="{hexc}" stroke-width="1"/>'
        )
        lines.append(f'  <text x="{r.x_lo}" y="{max(r.y_lo - 1, 4)}" font-size="4" fill="{hexc}">{label}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_localize(args) -> int:
    params, extra = _load_ckpt(args.ckpt)
    try:
        image = read_ppm(args.image)
    except (DatasetError, OSError) as exc:
        raise CliError(f"cannot read image {args.image}: {exc}") from None
    size = params.config.input_size
    if image.shape[:2] != (size, size):
        raise CliError(f"image is {image.shape[1]}x{image.shape[0]} but the checkpoint expects {size}x{size}")
    try:
        cfg = _mcar_from(args, extra)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    prefix = Path(args.out_prefix)
    _print_config("localize", {
        "ckpt": str(args.ckpt), "image": str(args.image), "topn": cfg.top_n, "tau": cfg.tau,
        "select": cfg.selection, "out_prefix": str(prefix), "seed": args.seed,
    })
    fused, regions, y_g, _ = predict(image, params, cfg, np.random.default_rng(args.seed))
    names = extra.get("class_names") or [f"class{c}" for c in range(params.num_classes)]
    overlay = image.copy()
    records, rows = [], []
    for r in regions:
        label = f"{names[r.class_id]}: {y_g[r.class_id]:.2f}/{fused[r.class_id]:.2f}"
        color = BOX_COLORS[r.class_id % len(BOX_COLORS)]
        _draw_box(overlay, r, color)
        records.append((r, label, color))
        rows.append(f"{label}\t{r.class_id}\t{r.x_lo}\t{r.y_lo}\t{r.x_hi}\t{r.y_hi}\t{y_g[r.class_id]:.6f}\t{fused[r.class_id]:.6f}")
        print(f"{label}\tbox=({r.x_lo},{r.y_lo})-({r.x_hi},{r.y_hi})")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    header = "label\tclass\tx_lo\ty_lo\tx_hi\ty_hi\tglobal\tfused"
    Path(f"{prefix}.regions.tsv").write_text("\n".join([header] + rows) + "\n")
    write_ppm(f"{prefix}.ppm", overlay)
    Path(f"{prefix}.svg").write_text(_svg(size, records))
    print(f"{len(regions)} regions; wrote {prefix}.regions.tsv, {prefix}.ppm, {prefix}.svg")
    return 0


# --- bench ------------------------------------------------------------------

def cmd_bench(args) -> int:
    params, _ = _load_ckpt(args.ckpt)
    split, samples = _load_split(args.data, "val")
    images, labels = stack(samples[: args.images])
    _check_compatible(params, images, labels)
    _print_config("bench", {
        "ckpt": str(args.ckpt), "data": str(split), "topn_list": args.topn_list,
        "repeat": args.repeat, "images": len(images), "tau": args.tau,
    })
    timings = time_stages(images, params, args.topn_list, args.repeat, tau=args.tau)
    print(f"{'topN':>5} {'global':>9} {'G-to-L':>9} {'local':>9} {'total':>9} {'sum':>9}  (ms/image)")
    for t in timings:
        print(f"{t.top_n:>5} {t.global_ms:>9.3f} {t.g2l_ms:>9.3f} {t.local_ms:>9.3f} {t.total_ms:>9.3f} {t.stage_sum_ms:>9.3f}")
    ok = True
    for t in timings:
        if t.gap > 0.10:
            ok = False
            print(f"topN={t.top_n}: total {t.total_ms:.3f} ms differs from stage sum {t.stage_sum_ms:.3f} ms by {100 * t.gap:.1f}%")
    doc = {"timings": [t.to_dict() for t in timings]}
    if len({t.top_n for t in timings}) >= 2:
        fit = linear_fit([t.top_n for t in timings], [t.local_ms for t in timings])
        doc["local_fit"] = fit
        print(f"local stage vs topN: slope {fit['slope']:.3f} ms/region, R^2 {fit['r2']:.4f}")
    if args.json:
        Path(args.json).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if not ok:
        raise CliError("stage timings do not add up to the end-to-end time within 10%")
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcar", description="Multi-class attentional region training and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic train/val dataset")
    g.add_argument("--out", required=True, type=Path, help="output dataset directory")
    g.add_argument("--classes", type=int, default=8, help="number of classes, 1..16 (toy default 8)")
    g.add_argument("--train-n", type=int, default=2000, help="training images (toy default 2000)")
    g.add_argument("--val-n", type=int, default=500, help="validation images (toy default 500)")
    g.add_argument("--canvas", type=int, default=64, help="square image side in pixels (toy default 64)")
    g.add_argument("--occlusion", action=argparse.BooleanOptionalAction, default=True,
                   help="allow partially overlapping objects (toy default on)")
    g.add_argument("--objects", type=int, nargs=2, default=list(SynthSpec().objects_per_image), metavar=("MIN", "MAX"),
                   help="objects per image (toy default %(default)s)")
    g.add_argument("--scale", type=int, nargs=2, default=list(SynthSpec().scale_px), metavar=("MIN", "MAX"),
                   help="object side in pixels (toy default %(default)s)")
    g.add_argument("--noise", type=float, default=SynthSpec().noise_std, help="pixel noise std (toy default %(default)s)")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    d = TRAIN_DEFAULTS
    t = sub.add_parser("train", help="train the two-stream model")
    t.add_argument("--data", required=True, type=Path, help="dataset root with train/ and val/")
    t.add_argument("--out", required=True, type=Path, help="checkpoint path")
    t.add_argument("--history", type=Path, help="per-epoch JSON lines (default: <out>.history.jsonl)")
    t.add_argument("--epochs", type=_positive_int, default=d.epochs, help="toy default %(default)s")
    t.add_argument("--batch", type=_positive_int, default=d.batch_size, help="toy default %(default)s")
    t.add_argument("--lr", type=float, default=d.lr, help="base learning rate (toy default %(default)s)")
    t.add_argument("--lr-drops", type=_int_list, default=None,
                   help="comma-separated epochs where lr is multiplied by 0.1 (default: 1/2 and 5/6 of training)")
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--wd", type=float, default=1e-4, help="weight decay")
    t.add_argument("--topn", type=int, default=4, help="attention maps turned into local regions; 0 = global only")
    t.add_argument("--tau", type=float, default=0.5, help="localization threshold")
    t.add_argument("--pool", choices=("gap", "gmp", "gwp"), default="gwp")
    t.add_argument("--lambda", dest="lam", type=float, default=0.5, help="GWP mixing weight")
    t.add_argument("--loss", choices=("pair", "single"), default="pair")
    t.add_argument("--select", choices=("top", "random", "bottom"), default="top")
    t.add_argument("--channels", type=_int_list, default=list(d.backbone.channels),
                   help="conv block widths (toy default %(default)s)")
    t.add_argument("--warmup", type=int, default=d.local_warmup_epochs,
                   help="global-only epochs before the local stream joins (toy default %(default)s)")
    t.add_argument("--no-flip", action="store_true", help="disable random horizontal flips")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path, help="split directory or dataset root (uses val/)")
    e.add_argument("--threshold", type=float, default=0.6)
    e.add_argument("--top3", action="store_true", help="report P/R/F1 under top-3 assignment")
    e.add_argument("--topn", type=int, default=None, help="override the checkpoint's topN")
    e.add_argument("--tau", type=float, default=None, help="override the checkpoint's tau")
    e.add_argument("--select", choices=("top", "random", "bottom"), default="top")
    e.add_argument("--seed", type=int, default=0, help="seed for --select random")
    e.set_defaults(func=cmd_eval)

    lo = sub.add_parser("localize", help="attentional regions for one PPM image")
    lo.add_argument("--ckpt", required=True, type=Path)
    lo.add_argument("--image", required=True, type=Path, help="binary PPM (P6)")
    lo.add_argument("--out-prefix", required=True, help="writes <prefix>.regions.tsv, .ppm and .svg")
    lo.add_argument("--topn", type=int, default=None)
    lo.add_argument("--tau", type=float, default=None)
    lo.add_argument("--select", choices=("top", "random", "bottom"), default="top")
    lo.add_argument("--seed", type=int, default=0)
    lo.set_defaults(func=cmd_localize)

    b = sub.add_parser("bench", help="per-stage inference timing")
    b.add_argument("--ckpt", required=True, type=Path)
    b.add_argument("--data", required=True, type=Path)
    b.add_argument("--topn-list", type=_int_list, default=[0, 1, 2, 4, 8])
    b.add_argument("--repeat", type=_positive_int, default=3)
    b.add_argument("--images", type=_positive_int, default=50, help="validation images to time")
    b.add_argument("--tau", type=float, default=0.5)
    b.add_argument("--json", type=Path, help="also write the timings as JSON")
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mcar {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
