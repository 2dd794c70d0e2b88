"""Command-line surface: gen-data, train, eval, bench, sweep-mu.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
Every command that writes artifacts also serializes the run configuration
(JSON) next to them so the run can be regenerated from the corpus alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import data as data_mod
from . import distill, metrics, networks
from .data import FormatError
from .distill import ConfigurationError, DistillConfig
from .tensor import NumericError, ShapeError


class UsageError(ValueError):
    pass


def _write_csv(path, lines):
    Path(path).write_text("\n".join(lines) + "\n")


def _write_run_config(path, args, command):
    cfg = {"command": command}
    cfg.update({k: v for k, v in vars(args).items() if k != "func"})
    Path(path).write_text(json.dumps(cfg, indent=2, default=str) + "\n")


# ---- gen-data ----------------------------------------------------------------

def cmd_gen_data(args):
    if args.frames < 2:
        raise UsageError("--frames must be >= 2 (training needs frame pairs)")
    if args.clips < 1:
        raise UsageError("--clips must be >= 1")
    data_mod.generate_synthetic_corpus(args.out, args.clips, args.frames, args.res, args.seed)
    _write_run_config(Path(args.out) / "run_config.json", args, "gen-data")
    print(f"wrote {args.clips} clips x {args.frames} frames at {args.res}x{args.res} to {args.out}")
    return 0


# ---- train -------------------------------------------------------------------

def _load_samples(data_dir, resolution=None):
    clips = data_mod.load_corpus(data_dir)
    meta = data_mod.corpus_meta(data_dir)
    if resolution is not None and meta.get("resolution") not in (None, resolution):
        raise FormatError(
            f"corpus resolution {meta['resolution']} does not match requested {resolution}")
    return clips


def cmd_train(args):
    config = DistillConfig(mu=args.mu, resolution=args.res, lr=args.lr,
                           batch=args.batch, epochs=args.epochs, seed=args.seed)
    clips = _load_samples(args.data, args.res)
    train_clips, _ = distill.split_clips(clips, args.seed)
    samples = distill.make_samples(train_clips)
    widths = networks.LayerTable()
    if args.calibrated:
        networks.build_spatiotemporal(widths, calibrated=True)

    log = print if not args.quiet else None
    if args.phase in ("student-spatial", "student-temporal"):
        kind = args.phase.split("-")[1]
        weights, history = distill.train_student(kind, samples, config,
                                                 widths=widths, progress=log)
    elif args.phase == "fusion":
        if args.random_streams:
            weights, history = distill.train_fusion(samples, None, None, config,
                                                    widths=widths, random_streams=True,
                                                    progress=log)
        else:
            if not args.weights_spatial or not args.weights_temporal:
                raise UsageError("phase fusion requires --weights-spatial and "
                                 "--weights-temporal (or --random-streams)")
            sw = data_mod.load_weights(args.weights_spatial)
            tw = data_mod.load_weights(args.weights_temporal)
            weights, history = distill.train_fusion(samples, sw, tw, config,
                                                    widths=widths, progress=log)
    else:
        raise UsageError(f"unknown phase {args.phase!r}")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save_weights(out, weights)
    _write_csv(out.with_suffix(".history.csv"),
               ["epoch,mean_loss"] + [f"{i + 1},{v:.8f}" for i, v in enumerate(history)])
    _write_run_config(out.with_suffix(".run.json"), args, "train")
    print(f"wrote weights to {out}")
    return 0


# ---- eval --------------------------------------------------------------------

def _standardize(m):
    s = m.std()
    return (m - m.mean()) / s if s > 0 else m - m.mean()


def cmd_eval(args):
    clips = _load_samples(args.data)
    meta = data_mod.corpus_meta(args.data)
    run_json = Path(args.weights).with_suffix(".run.json") if args.weights else None
    if run_json and run_json.exists() and meta.get("resolution") is not None:
        trained_res = json.loads(run_json.read_text()).get("res")
        if trained_res is not None and trained_res != meta["resolution"]:
            raise FormatError(f"weights were trained at resolution {trained_res} but the "
                              f"corpus is {meta['resolution']}")

    train_clips, val_clips = distill.split_clips(clips, args.seed)
    chosen = {"train": train_clips, "val": val_clips, "all": clips}[args.split]
    samples = distill.make_samples(chosen)

    if args.gt_as_pred:
        preds = np.stack([s.density for s in samples])
    else:
        if not args.weights:
            raise UsageError("eval requires --weights unless --gt-as-pred is set")
        weights = data_mod.load_weights(args.weights, requires_grad=False)
        preds = distill.predict(weights, samples)

    all_fix = [s.fixations for s in samples]
    rows = []
    for i, s in enumerate(samples):
        pool = [f for j, fl in enumerate(all_fix) if j != i for f in fl]
        rows.append(metrics.report(preds[i], s.density, s.fixations, pool,
                                   seed=args.seed + i))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["frame,auc,sauc,nss,sim,cc"]
    for i, r in enumerate(rows):
        lines.append(f"{i}," + ",".join(f"{v:.9f}" for v in r.as_row()))
    means = np.mean([r.as_row() for r in rows], axis=0)
    lines.append("mean," + ",".join(f"{v:.9f}" for v in means))
    _write_csv(out / "metrics.csv", lines)

    # corpus ROC: per-frame standardized scores pooled into one curve
    pos, neg = [], []
    for i, s in enumerate(samples):
        z = _standardize(preds[i])
        p, n = metrics._split_scores(z, s.fixations)
        pos.append(p)
        neg.append(n)
    curve = metrics._roc_points(np.concatenate(pos), np.concatenate(neg))
    _write_csv(out / "roc.csv", ["fpr,tpr"] + [f"{f:.9f},{t:.9f}" for f, t in curve])
    _write_run_config(out / "run_config.json", args, "eval")

    names = ["auc", "sauc", "nss", "sim", "cc"]
    print("corpus means: " + "  ".join(f"{k}={v:.4f}" for k, v in zip(names, means)))
    return 0


# ---- bench -------------------------------------------------------------------

def cmd_bench(args):
    widths = networks.LayerTable()
    spec = networks.build_spatiotemporal(widths, calibrated=args.calibrated)
    if args.weights:
        weights = data_mod.load_weights(args.weights, requires_grad=False)
    else:
        weights = networks.init_weights(spec, 0)
    res_list = [int(r) for r in args.res_list.split(",")]
    report = bench_mod.run_bench(spec, weights, res_list=res_list,
                                 iters=args.iters, warmup=args.warmup)
    lines = report.csv_lines()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_csv(Path(args.out) / "bench.csv", lines)
        _write_run_config(Path(args.out) / "run_config.json", args, "bench")
    print("\n".join(lines))
    return 0


# ---- sweep-mu ----------------------------------------------------------------

def cmd_sweep_mu(args):
    grid = [float(v) for v in args.grid.split(",")]
    for v in grid:
        if not 0.0 <= v <= 1.0:
            raise UsageError(f"grid value {v} outside [0,1]")
    config = DistillConfig(mu=0.5, resolution=args.res, lr=args.lr,
                           batch=args.batch, epochs=args.epochs, seed=args.seed)
    clips = _load_samples(args.data, args.res)
    train_clips, val_clips = distill.split_clips(clips, args.seed)
    rows = distill.sweep_mu(distill.make_samples(train_clips),
                            distill.make_samples(val_clips),
                            grid, config, repeats=args.repeats,
                            progress=print if not args.quiet else None)
    lines = ["mu,nss_mean,nss_std"] + [f"{m},{a:.6f},{s:.6f}" for m, a, s in rows]
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_csv(Path(args.out) / "sweep_mu.csv", lines)
        _write_run_config(Path(args.out) / "run_config.json", args, "sweep-mu")
    print("\n".join(lines))
    return 0


# ---- parser ------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="minisal",
                                description="compact saliency distillation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic aerial clip corpus")
    g.add_argument("--clips", type=int, required=True)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--res", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training phase")
    t.add_argument("--phase", required=True,
                   choices=["student-spatial", "student-temporal", "fusion"])
    t.add_argument("--mu", type=float, default=0.5)
    t.add_argument("--res", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--epochs", type=int, default=2)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data", required=True)
    t.add_argument("--weights-spatial", dest="weights_spatial")
    t.add_argument("--weights-temporal", dest="weights_temporal")
    t.add_argument("--random-streams", action="store_true",
                   help="fusion phase only: skip phase-1 weights (ablation)")
    t.add_argument("--calibrated", action="store_true",
                   help="fail if the layer table misses the parameter budget")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate weights over a corpus split")
    e.add_argument("--weights")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "val", "all"], default="val")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--gt-as-pred", dest="gt_as_pred", action="store_true",
                   help="score the ground-truth density as if it were a prediction")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="forward-speed and memory accounting")
    b.add_argument("--weights")
    b.add_argument("--res-list", dest="res_list", default="32,64,128,256")
    b.add_argument("--iters", type=int, default=500)
    b.add_argument("--warmup", type=int, default=50)
    b.add_argument("--calibrated", action="store_true")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep-mu", help="held-out NSS across soft-loss weights")
    s.add_argument("--grid", default="0.0,0.25,0.5,0.75,1.0")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--res", type=int, default=32)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--epochs", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--data", required=True)
    s.add_argument("--quiet", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep_mu)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, FileNotFoundError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
