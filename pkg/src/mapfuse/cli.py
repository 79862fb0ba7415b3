"""Command line entry point: generate | train | eval | ablate | bench-scan | plot."""

from __future__ import annotations

import os
import sys

# BLAS pools read these at import time, so they are set before numpy loads.
_threads = "1" if "--deterministic" in sys.argv else os.environ.get("MM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, NumericError

log = logging.getLogger("mapfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def worker_count() -> int:
    try:
        n = int(os.environ.get("MM_THREADS", "1"))
    except ValueError:
        raise ContractError("MM_THREADS must be an integer")
    return max(1, n)


def _config(path):
    from .config import RunConfig, load_config
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config {p} does not exist")
    return load_config(p)


def _require(path, what="file") -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


# ---------------------------------------------------------------- generate

def _gen_one(args):
    from .synthworld import generate_scenario
    seed, gen = args
    return generate_scenario(seed, gen)


def cmd_generate(args) -> int:
    from .synthworld import CLASS_NAMES, write_dataset
    cfg = _config(args.config)
    gen = cfg.gen
    if args.count < 1:
        raise ContractError("--count must be at least 1")
    seeds = [args.seed * 100_003 + i for i in range(args.count)]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            scenarios = list(pool.map(_gen_one, [(s, gen) for s in seeds]))
    else:
        scenarios = [_gen_one((s, gen)) for s in seeds]
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        raise FileNotFoundError(f"output directory {out.parent} does not exist")
    write_dataset(out, scenarios, gen)
    counts = np.array([[sum(1 for e in sc.elements if int(e.cls) == c) for c in range(3)]
                       for sc in scenarios])
    vis = np.array([len(fr.gt) for sc in scenarios for fr in sc.frames])
    print(f"wrote {len(scenarios)} scenarios x {gen.frames} frames to {out}")
    for c, name in enumerate(CLASS_NAMES):
        print(f"  {name}: world elements per scenario min {counts[:, c].min()} "
              f"mean {counts[:, c].mean():.2f} max {counts[:, c].max()}")
    print(f"  visible ground truth per frame: mean {vis.mean():.2f} max {vis.max()}")
    return EXIT_OK


# ---------------------------------------------------------------- train / eval

def _check_geometry(cfg, ds, origin):
    m = cfg.model
    if (ds.H, ds.W, ds.c_obs, ds.points) != (m.H, m.W, m.c_obs, m.P):
        raise ContractError(f"{origin}: dataset geometry {(ds.H, ds.W, ds.c_obs, ds.points)} does not "
                            f"match model {(m.H, m.W, m.c_obs, m.P)}")


def _append_rows(path: Path, rows) -> None:
    from .evaluation import METRICS_HEADER
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r)


def cmd_train(args) -> int:
    from .evaluation import evaluate
    from .model import MapNet, apply_state, load_checkpoint, model_state, save_checkpoint, ModelConfig
    from .optim import AdamW
    from .synthworld import read_dataset
    from .train import train

    cfg = _config(args.config)
    ds = read_dataset(_require(args.data, "dataset"))
    _check_geometry(cfg, ds, args.data)
    eval_ds = None
    if args.eval_data:
        eval_ds = read_dataset(_require(args.eval_data, "dataset"))
        _check_geometry(cfg, eval_ds, args.eval_data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = MapNet(replace(cfg.model))
    tcfg = cfg.train_config()
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    opt = AdamW(list(model.named_parameters()), tcfg.optim)
    start = 0
    if args.resume:
        tensors, meta = load_checkpoint(_require(args.resume, "checkpoint"))
        if ModelConfig.from_dict(meta.get("model", {})) != cfg.model:
            raise FormatError(f"{args.resume}: checkpoint model configuration differs from the run config")
        apply_state(model, tensors, args.resume)
        opt.load_state(tensors)
        start = int(meta.get("epoch", 0))
    metrics = out_dir / "metrics.csv"

    def on_epoch(stats, opt_):
        ep = stats.epoch + 1
        meta = {"model": cfg.model.to_dict(), "run": cfg.to_flat(), "epoch": ep}
        state = {**model_state(model), **opt_.state()}
        save_checkpoint(out_dir / f"epoch{ep:03d}.mmckpt", state, meta)
        save_checkpoint(out_dir / "last.mmckpt", state, meta)
        nan = float("nan")
        rows = [[args.tag, f"train@{ep}"] + [f"{v:.4f}" for v in
                (nan, nan, nan, nan, stats.loss_pts, stats.loss_cls, stats.loss_total)]]
        if eval_ds is not None:
            res = evaluate(model, eval_ds.scenarios, cfg.eval, cfg.loss)
            rows.append(res.row(args.tag, f"eval@{ep}"))
            print(f"epoch {ep}: loss {stats.loss_total:.4f} eval mAP {res.mAP:.4f}", flush=True)
        else:
            print(f"epoch {ep}: loss {stats.loss_total:.4f}", flush=True)
        _append_rows(metrics, rows)

    try:
        train(model, ds.scenarios, tcfg, opt, start_epoch=start, on_epoch=on_epoch)
    except NumericError as exc:
        dump = out_dir / "nan_dump.json"
        dump.write_text(json.dumps({"error": str(exc)}, indent=2))
        raise
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import EvalConfig, evaluate
    from .model import load_model
    from .synthworld import read_dataset

    model, _, meta = load_model(_require(args.ckpt, "checkpoint"))
    ds = read_dataset(_require(args.data, "dataset"))
    m = model.cfg
    if (ds.H, ds.W, ds.c_obs, ds.points) != (m.H, m.W, m.c_obs, m.P):
        raise ContractError(f"dataset geometry {(ds.H, ds.W, ds.c_obs, ds.points)} does not match "
                            f"checkpoint {(m.H, m.W, m.c_obs, m.P)}")
    eval_cfg = _config(args.config).eval if args.config else EvalConfig()
    res = evaluate(model, ds.scenarios, eval_cfg, mode=args.mode)
    _append_rows(Path(args.report), [res.row(args.tag, args.split)])
    print(" ".join(f"AP_{k}={v:.4f}" for k, v in res.ap.items()) + f" mAP={res.mAP:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- ablate / bench / plot

def cmd_ablate(args) -> int:
    from .ablation import bar_chart, run_ablation, write_rows
    from .synthworld import read_dataset

    cfg = _config(args.config)
    ds = read_dataset(_require(args.data, "dataset"))
    _check_geometry(cfg, ds, args.data)
    if args.eval_data:
        ev = read_dataset(_require(args.eval_data, "dataset"))
        _check_geometry(cfg, ev, args.eval_data)
        train_set, eval_set = ds.scenarios, ev.scenarios
    else:
        need = cfg.train_scenarios + cfg.eval_scenarios
        if len(ds.scenarios) < need:
            raise ContractError(f"{args.data} holds {len(ds.scenarios)} scenarios; the split needs {need}")
        train_set = ds.scenarios[:cfg.train_scenarios]
        eval_set = ds.scenarios[len(ds.scenarios) - cfg.eval_scenarios:]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(args.what, cfg, train_set, eval_set, out_dir / "cache")
    write_rows(out_dir / f"ablation_{args.what}.csv", rows)
    bar_chart(out_dir / f"ablation_{args.what}.svg", [t for t, _ in rows], [r.mAP for _, r in rows],
              title=f"{args.what} ablation")
    for tag, res in rows:
        print(f"{tag:>28s}  mAP {res.mAP:.4f}")
    return EXIT_OK


def cmd_bench_scan(args) -> int:
    from . import autodiff as ad
    from .ssm import MODES, dss_forward, init_dss

    modes = MODES if args.mode == "all" else (args.mode,)
    rng = np.random.default_rng(args.seed)
    dtype = np.float64
    p = init_dss(rng, args.channels, args.state, dtype)
    u = ad.Array(rng.uniform(-1, 1, size=(args.len, args.channels)), dtype=dtype)
    reference = dss_forward(u, p, "recurrence").data
    rows = []
    for mode in modes:
        out = dss_forward(u, p, mode).data
        tol = 1e-10 if mode != "kernel" else 1e-8
        diff = float(np.abs(out - reference).max())
        if diff > tol * max(1.0, float(np.abs(reference).max())):
            raise NumericError(f"{mode} disagrees with recurrence by {diff:.3e}")
        times = []
        for _ in range(args.reps):
            t0 = time.perf_counter_ns()
            dss_forward(u, p, mode)
            times.append(time.perf_counter_ns() - t0)
        ns = float(np.median(times)) / (args.len * args.channels)
        rows.append([mode, args.len, args.channels, f"{ns:.3f}", f"{float(out.sum()):.10e}"])
    out_file = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out_file)
        w.writerow(["mode", "len", "channels", "ns_per_elem", "checksum"])
        w.writerows(rows)
    finally:
        if args.out:
            out_file.close()
    return EXIT_OK


def cmd_plot(args) -> int:
    from .ablation import bar_chart
    path = _require(args.csv, "CSV")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or args.column not in rows[0]:
        raise FormatError(f"{path}: no column {args.column!r}")
    tags = [f"{r['tag']}:{r['split']}" if args.with_split else r["tag"] for r in rows]
    bar_chart(args.out, tags, [float(r[args.column]) for r in rows], title=args.title, ylabel=args.column)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mapfuse", description=__doc__)
    ap.add_argument("--verbose", "-v", action="store_true")
    ap.add_argument("--deterministic", action="store_true",
                    help="single-threaded numerics (results are seed-deterministic either way)")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="write a synthetic MMSYN1 dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=64)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model; writes MMCKPT1 checkpoints and metrics.csv")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume")
    t.add_argument("--epochs", type=int)
    t.add_argument("--tag", default="train")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint; appends one CSV row")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config")
    e.add_argument("--tag", default="eval")
    e.add_argument("--split", default="eval")
    e.add_argument("--mode", choices=("recurrence", "scan", "kernel"))
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="retrain variants and compare")
    a.add_argument("--what", required=True, choices=("fusion", "scanning", "matching", "memory", "ssm-mode"))
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data")
    a.add_argument("--out-dir", default="ablation")
    a.set_defaults(fn=cmd_ablate)

    b = sub.add_parser("bench-scan", help="time dss_forward per evaluation mode")
    b.add_argument("--len", type=int, default=65536)
    b.add_argument("--channels", type=int, default=8)
    b.add_argument("--state", type=int, default=16)
    b.add_argument("--mode", choices=("all", "recurrence", "scan", "kernel"), default="all")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(fn=cmd_bench_scan)

    p = sub.add_parser("plot", help="bar chart (SVG) of one column of a metrics CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--column", default="mAP")
    p.add_argument("--title", default="")
    p.add_argument("--with-split", action="store_true")
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ContractError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
