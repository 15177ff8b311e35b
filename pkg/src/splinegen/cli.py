"""Command-line interface: ``splinegen <command> ...``.

Commands
--------
dataset    generate a synthetic JSONL dataset
fit        fit one point set with a classical parameterization and knot method
train      train the sequence model, logging losses per epoch to CSV
finetune   fine-tune a trained model through the differentiable fitting layer
infer      predict knots and parameters for a point set and fit with them
bench      compare classical combinations (and optionally a model) over a dataset
gradcheck  finite-difference checks of the analytic gradients
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from .classical import KnotMethod, ParamMethod, classical_fit
from .dataset import GenConfig, generate_dataset, read_dataset, train_val_split, write_dataset
from .kernel import IllConditionedWarning, clamped_knots, eval_curve, least_squares_fit

log = logging.getLogger("splinegen")

BENCH_COLUMNS = ["method", "max", "mse", "hausdorff", "curves", "failures"]
BENCH_PARAMS = [ParamMethod.CHORD, ParamMethod.CENTRIPETAL]
BENCH_KNOTS = [KnotMethod.UNIFORM, KnotMethod.AVG, KnotMethod.KTP, KnotMethod.NKTP]
KNOT_LABELS = {"uniform": "Uniform", "avg": "AVG", "ktp": "KTP", "nktp": "NKTP"}
LOG_COLUMNS = ["epoch", "knot_loss", "param_loss", "ordering_loss", "total_loss",
               "val_knot_loss", "val_param_loss", "val_ordering_loss", "val_total_loss"]


class UsageError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def sub_seed(seed, name):
    """Named, reproducible child seed of the global ``--seed``."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


def thread_count():
    raw = os.environ.get("SPLINEGEN_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise UsageError(f"SPLINEGEN_THREADS must be an integer, got {raw!r}")


def _torch():
    import torch

    torch.set_num_threads(thread_count())
    return torch


def atomic_write(path, data, mode="w"):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({"encoding": "utf-8"} if "b" not in mode else {})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, ensure_ascii=False, default=_json_default) + "\n"
    if path:
        atomic_write(path, text)
    else:
        sys.stdout.write(text)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def csv_text(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: _csv_cell(r.get(c, "")) for c in columns})
    return buf.getvalue()


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


def load_points(path):
    """Read an (m, 3) point array from .npy, .json or whitespace/comma separated text."""
    ext = os.path.splitext(path)[1].lower()
    try:
        if ext == ".npy":
            pts = np.load(path)
        elif ext == ".json":
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
            pts = np.asarray(data["points"] if isinstance(data, dict) else data, dtype=float)
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read().replace(",", " ")
            pts = np.loadtxt(io.StringIO(text), ndmin=2)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read points from {path}: {exc}")
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise UsageError(f"{path}: expected an (m, 3) point array, got shape {pts.shape}")
    if pts.shape[1] == 2:
        pts = np.hstack([pts, np.zeros((pts.shape[0], 1))])
    return pts


PLANES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}


def render_svg(curve, points, plane="xy", size=480, margin=20):
    """SVG of the fitted curve (polyline) and the data points, projected to ``plane``."""
    a, b = PLANES[plane]
    dense = eval_curve(curve, np.linspace(0.0, 1.0, 400))
    both = np.vstack([dense, points])[:, [a, b]]
    lo = both.min(axis=0)
    extent = max((both.max(axis=0) - lo).max(), 1e-12)
    scale = (size - 2 * margin) / extent

    def xy(p):
        # flip the vertical axis so +y points up
        return margin + (p[a] - lo[0]) * scale, size - margin - (p[b] - lo[1]) * scale

    poly = " ".join(f"{x:.2f},{y:.2f}" for x, y in map(xy, dense))
    dots = "\n".join(f'  <circle cx="{x:.2f}" cy="{y:.2f}" r="2" fill="#c33"/>' for x, y in map(xy, points))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n'
            f'  <rect width="100%" height="100%" fill="white"/>\n'
            f'  <polyline points="{poly}" fill="none" stroke="#236" stroke-width="1.5"/>\n'
            f"{dots}\n</svg>\n")


# -- commands ------------------------------------------------------------------

def cmd_dataset(args):
    cfg = GenConfig(
        degree=args.degree,
        ctrl_range=(args.ctrl_min, args.ctrl_max),
        sample_range=(args.samples_min, args.samples_max),
        knot_distribution=args.knot_distribution,
        planar_fraction=args.planar_fraction,
        sampling=args.sampling,
    )
    records, stats = generate_dataset(cfg, args.count, sub_seed(args.seed, "dataset"), with_stats=True)
    write_dataset(args.out, records)
    dump_json({"out": args.out, **stats, "config": asdict(cfg)})
    return 0


def cmd_fit(args):
    points = load_points(args.points)
    if not args.degree + 1 <= args.ctrl <= len(points):
        raise UsageError(f"--ctrl must be in [{args.degree + 1}, {len(points)}] for {len(points)} points")
    curve, params, report = classical_fit(points, args.degree, args.ctrl, args.param_method, args.knot_method,
                                          subsample_avg=True)
    dump_json({"curve": curve.to_dict(), "params": params, "report": report.to_dict()}, args.out)
    if args.plot:
        atomic_write(args.plot, render_svg(curve, points, args.plane))
    return 0


def _train_config(args, seed):
    from .model import TrainConfig

    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                       pretrain_epochs=args.pretrain_epochs, masking=not args.no_masking, seed=seed)


def _optimizer_tensors(opt):
    out = {}
    for key in ("m", "v"):
        for i, t in enumerate(opt.state.get(key, [])):
            out[f"optim.{key}.{i}"] = t
    return out


def _restore_optimizer(opt, tensors, t):
    if t:
        opt.state = {"t": t,
                     "m": [tensors[f"optim.m.{i}"].to(p.dtype) for i, p in enumerate(opt.params)],
                     "v": [tensors[f"optim.v.{i}"].to(p.dtype) for i, p in enumerate(opt.params)]}


def cmd_train(args):
    torch = _torch()
    from . import nn as snn
    from .model import Example, ModelConfig, SplineGen, train

    records = read_dataset(args.dataset)
    train_recs, val_recs = train_val_split(records, args.train_ratio, sub_seed(args.seed, "split"))
    train_set = [Example.from_record(r) for r in train_recs]
    val_set = [Example.from_record(r) for r in val_recs]
    history, start = [], 0
    if args.resume:
        tensors, meta = snn.load_checkpoint(args.resume)
        model = SplineGen(ModelConfig(**meta["model_config"]))
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim.")})
        history = meta.get("history", [])
        start = int(meta.get("epoch", 0))
        opt = snn.Adam(model.parameters(), lr=args.lr)
        _restore_optimizer(opt, tensors, meta.get("optim_t", 0))
        log.info("resuming from %s at epoch %d", args.resume, start)
    else:
        torch.manual_seed(sub_seed(args.seed, "init"))
        model = SplineGen(ModelConfig(
            d_emb=args.d_emb, d_attn=args.d_attn, n_heads=args.heads, n_layers=args.layers,
            degree=records[0].curve.degree if records else 3,
            cross_attention=not args.no_cross_attention, shared_encoder=not args.no_shared_encoder))
        opt = snn.Adam(model.parameters(), lr=args.lr)
    cfg = _train_config(args, sub_seed(args.seed, "train"))

    def on_epoch(row):
        history.append(row)
        rows = [{"epoch": r["epoch"],
                 "knot_loss": r["train_knot"], "param_loss": r["train_param"],
                 "ordering_loss": r["train_ordering"], "total_loss": r["train_total"],
                 "val_knot_loss": r["val_knot"], "val_param_loss": r["val_param"],
                 "val_ordering_loss": r["val_ordering"], "val_total_loss": r["val_total"]} for r in history]
        if args.log:
            atomic_write(args.log, csv_text(rows, LOG_COLUMNS))
        meta = {"model_config": asdict(model.cfg), "train_config": asdict(cfg), "epoch": row["epoch"],
                "history": history, "optim_t": opt.state.get("t", 0)}
        snn.save_checkpoint(args.checkpoint, {**model.state_dict(), **_optimizer_tensors(opt)}, meta)
        log.info("epoch %d: val total %.4f", row["epoch"], row["val_total"])

    train(model, train_set, val_set, cfg, on_epoch=on_epoch, start_epoch=start, opt=opt)
    dump_json({"checkpoint": args.checkpoint, "epochs": len(history),
               "final": history[-1] if history else None})
    return 0


def _load_model(path):
    _torch()
    from .model import SplineGen

    model, meta = SplineGen.load(path)
    model.eval()
    return model, meta


def cmd_finetune(args):
    from .pinn import FinetuneConfig, pinn_finetune

    model, _ = _load_model(args.checkpoint)
    records = read_dataset(args.dataset)
    if args.limit:
        records = records[: args.limit]
    cfg = FinetuneConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                         freeze_encoder=args.freeze_encoder, seed=sub_seed(args.seed, "finetune"))
    report = pinn_finetune(model, records, cfg, checkpoint=args.out)
    if not cfg.epochs:
        model.save(args.out)
    dump_json(report.to_dict())
    return 0


def fit_records_with_model(model, point_sets, batch_size=32):
    """Model inference plus least-squares fit for each point set: list of (result, curve, report)."""
    from .model import sanitize_knots

    p = model.cfg.degree
    out = []
    for s in range(0, len(point_sets), batch_size):
        chunk = point_sets[s: s + batch_size]
        for pts, res in zip(chunk, model.infer(chunk)):
            interior = sanitize_knots(res["knots"], p, len(pts))
            with warnings.catch_warnings():
                # the report carries the flag; one warning per curve is noise
                warnings.simplefilter("ignore", IllConditionedWarning)
                curve, report = least_squares_fit(pts, np.clip(res["params"], 0.0, 1.0), clamped_knots(interior, p), p)
            out.append((res, curve, report))
    return out


def cmd_infer(args):
    model, _ = _load_model(args.checkpoint)
    points = load_points(args.points)
    ((res, curve, report),) = fit_records_with_model(model, [points])
    dump_json({
        "knots": res["knots"],
        "params": res["params"],
        "indices": res["indices"],
        "truncated": res["truncated"],
        "curve": curve.to_dict(),
        "report": report.to_dict(),
    }, args.out)
    if args.plot:
        atomic_write(args.plot, render_svg(curve, points, args.plane))
    return 0


def _classical_cell(job):
    points, p, n_ctrl, pm, km = job
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IllConditionedWarning)
            r = classical_fit(points, p, n_ctrl, pm, km, subsample_avg=True)[2]
        return r.max_error, r.mse_error, r.hausdorff
    except (ValueError, np.linalg.LinAlgError) as exc:
        log.warning("%s+%s failed: %s", pm, km, exc)
        return None


def _aggregate(label, metrics):
    ok = [m for m in metrics if m is not None and all(map(math.isfinite, m))]
    arr = np.array(ok) if ok else np.full((1, 3), math.nan)
    return {"method": label, "max": float(arr[:, 0].mean()), "mse": float(arr[:, 1].mean()),
            "hausdorff": float(arr[:, 2].mean()), "curves": len(ok), "failures": len(metrics) - len(ok)}


def bench_rows(records, model=None, workers=1):
    """Mean Max / MSE / Hausdorff per method over ``records``.

    Classical methods see the points in curve order (they need an ordered
    polyline) and the ground-truth control-point count.  The model sees the
    shuffled points.
    """
    rows = []
    for pm in BENCH_PARAMS:
        for km in BENCH_KNOTS:
            jobs = [(r.ordered_points, r.curve.degree, r.curve.n_ctrl, pm, km) for r in records]
            if workers > 1:
                with ProcessPoolExecutor(workers) as ex:
                    metrics = list(ex.map(_classical_cell, jobs, chunksize=16))
            else:
                metrics = [_classical_cell(j) for j in jobs]
            rows.append(_aggregate(f"{pm.value.capitalize()}+{KNOT_LABELS[km.value]}", metrics))
    if model is not None:
        metrics = [(r.max_error, r.mse_error, r.hausdorff)
                   for _, _, r in fit_records_with_model(model, [rec.samples for rec in records])]
        rows.append(_aggregate("SplineGen", metrics))
    return rows


def cmd_bench(args):
    records = read_dataset(args.dataset)
    if args.split == "val":
        records = train_val_split(records, args.train_ratio, sub_seed(args.seed, "split"))[1]
    if args.limit:
        records = records[: args.limit]
    model = _load_model(args.checkpoint)[0] if args.checkpoint else None
    text = csv_text(bench_rows(records, model, thread_count()), BENCH_COLUMNS)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args):
    _torch()
    from .gradcheck import check_neural, check_pinn, format_table

    results = check_neural(args.instances, args.seed) + check_pinn(args.instances, args.seed, args.points, args.ctrl)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAILED {r.name}: max relative error {r.max_rel_error:.3e} > {r.tolerance:g}", file=sys.stderr)
    return 1 if failed else 0


# -- argument parsing ----------------------------------------------------------

def _positive_int(s):
    v = int(s)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def build_parser():
    ap = argparse.ArgumentParser(prog="splinegen", description="B-spline fitting of unorganized points.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
        return p

    p = common(sub.add_parser("dataset", help="generate a synthetic dataset"))
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive_int, default=2000)
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--ctrl-min", type=int, default=5)
    p.add_argument("--ctrl-max", type=int, default=10)
    p.add_argument("--samples-min", type=int, default=60)
    p.add_argument("--samples-max", type=int, default=120)
    p.add_argument("--knot-distribution", choices=["uniform", "beta"], default="uniform")
    p.add_argument("--planar-fraction", type=float, default=0.3)
    p.add_argument("--sampling", choices=["random", "equispaced"], default="random")
    p.set_defaults(func=cmd_dataset)

    p = common(sub.add_parser("fit", help="classical least-squares fit of one point set"))
    p.add_argument("points", help="points file (.npy, .json, .csv or .txt; points in curve order)")
    p.add_argument("--param-method", choices=[m.value for m in ParamMethod], default="centripetal")
    p.add_argument("--knot-method", choices=[m.value for m in KnotMethod], default="ktp")
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--ctrl", type=int, default=8, help="number of control points")
    p.add_argument("--out", help="JSON output path (default stdout)")
    p.add_argument("--plot", help="write an SVG of the fit to this path")
    p.add_argument("--plane", choices=list(PLANES), default="xy")
    p.set_defaults(func=cmd_fit)

    p = common(sub.add_parser("train", help="train the sequence model"))
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint written after every epoch")
    p.add_argument("--log", help="CSV loss log")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--pretrain-epochs", type=int, default=1)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--train-ratio", type=float, default=0.8)
    p.add_argument("--d-emb", type=int, default=64)
    p.add_argument("--d-attn", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--no-cross-attention", action="store_true", help="ablation: drop internal cross-attention")
    p.add_argument("--no-shared-encoder", action="store_true", help="ablation: separate simple encoders")
    p.add_argument("--no-masking", action="store_true", help="ablation: no point or embedding masking")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("finetune", help="fine-tune through the differentiable fitting layer"))
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="fine-tuned checkpoint path")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--limit", type=int, default=0, help="use only the first N records")
    p.add_argument("--freeze-encoder", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = common(sub.add_parser("infer", help="predict knots and parameters, then fit"))
    p.add_argument("checkpoint")
    p.add_argument("points", help="points file (any order)")
    p.add_argument("--out", help="JSON output path (default stdout)")
    p.add_argument("--plot", help="write an SVG of the fit to this path")
    p.add_argument("--plane", choices=list(PLANES), default="xy")
    p.set_defaults(func=cmd_infer)

    p = common(sub.add_parser("bench", help="compare methods over a dataset"))
    p.add_argument("dataset")
    p.add_argument("--checkpoint", help="add a row for this trained model")
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.add_argument("--split", choices=["all", "val"], default="all",
                   help="'val' uses the validation part of the split made by 'train'")
    p.add_argument("--train-ratio", type=float, default=0.8)
    p.add_argument("--limit", type=int, default=0, help="use only the first N records")
    p.set_defaults(func=cmd_bench)

    p = common(sub.add_parser("gradcheck", help="finite-difference gradient checks"))
    p.add_argument("--instances", type=_positive_int, default=50)
    p.add_argument("--points", type=int, default=20, help="points per fitting instance")
    p.add_argument("--ctrl", type=int, default=8, help="control points per fitting instance")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        ap.error(str(exc))
    except (OSError, ValueError) as exc:
        print(f"splinegen {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
