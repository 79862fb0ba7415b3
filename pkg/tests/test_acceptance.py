"""Acceptance suite: one test per criterion, each recorded for the terminal summary."""

import copy
import csv
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mapfuse import autodiff as ad
from mapfuse.ablation import trained_model, write_rows
from mapfuse.assignment import brute_force, solve
from mapfuse.bev_fusion import fuse_bev, fused_input, init_bev_fusion
from mapfuse.config import desk_config
from mapfuse.evaluation import evaluate
from mapfuse.geometry import Pose
from mapfuse.instance_fusion import fuse_instances, init_instance_fusion
from mapfuse.loss import map_loss, total_loss
from mapfuse.memory import MemoryBank
from mapfuse.model import MapNet, load_checkpoint, load_model, model_state, save_checkpoint
from mapfuse.scans import (DIRECTIONS, InstanceLayout, build_instance_sequence, cells_to_grid,
                           instance_order, scan_bev, unscan_bev)
from mapfuse.ssm import MODES, dss_forward, gss_block, init_dss, init_gss
from mapfuse.synthworld import generate_dataset, generate_scenario, quantize, read_dataset, write_dataset
from tests.conftest import record, tiny_config

TRAIN_SEEDS = range(1000, 1064)
EVAL_SEEDS = range(5000, 5016)


# ---------------------------------------------------------------- 1

def _primitive_cases(rng):
    def leaf(*shape, lo=-2.0, hi=2.0):
        return ad.parameter(rng.uniform(lo, hi, size=shape))

    x, pos, w = leaf(3, 4), leaf(3, 4, lo=0.5, hi=2.0), rng.normal(size=(3, 4))
    row = leaf(1, 4, lo=0.6, hi=2.1)
    cases = {}
    for name, op in [("neg", ad.neg), ("exp", ad.exp), ("square", ad.square), ("sigmoid", ad.sigmoid),
                     ("softplus", ad.softplus), ("tanh", ad.tanh), ("gelu", ad.gelu),
                     ("smooth_l1", lambda a: ad.smooth_l1(a, 1.0))]:
        cases[name] = (lambda op=op: ad.sum_(op(x) * w), [x])
    for name, op in [("log", ad.log), ("sqrt", ad.sqrt), ("abs", ad.abs_), ("relu", ad.relu)]:
        cases[name] = (lambda op=op: ad.sum_(op(pos) * w), [pos])
    for name, op in [("add", ad.add), ("sub", ad.sub), ("mul", ad.mul), ("div", ad.div),
                     ("minimum", ad.minimum)]:
        cases[name] = (lambda op=op: ad.sum_(op(pos, row) * w), [pos, row])
    t3 = leaf(2, 3, 4)
    w43 = rng.normal(size=(4, 3))
    cases["mean/transpose"] = (lambda: ad.sum_(ad.transpose(ad.mean(t3, axis=0), (1, 0)) * w43), [t3])
    cases["reshape/sum"] = (lambda: ad.sum_(ad.sum_(ad.reshape(t3, (6, 4)), axis=0) * np.arange(4.0)), [t3])
    idx = np.array([2, 0, 0, 1])
    w44 = rng.normal(size=(4, 4))
    cases["take_rows"] = (lambda: ad.sum_(ad.take_rows(x, idx) * w44), [x])
    cases["getitem"] = (lambda: ad.sum_(ad.getitem(x, (slice(0, 2), 1)) * np.array([1.0, -3.0])), [x])
    a, b = leaf(2, 4), leaf(3, 4)
    w54 = rng.normal(size=(5, 4))
    cases["concat"] = (lambda: ad.sum_(ad.concat([a, b], axis=0) * w54), [a, b])
    c = leaf(2, 4)
    w224 = rng.normal(size=(2, 2, 4))
    cases["stack"] = (lambda: ad.sum_(ad.stack([a, c], axis=1) * w224), [a, c])
    m1, m2 = leaf(2, 3, 4), leaf(4, 5)
    w235 = rng.normal(size=(2, 3, 5))
    cases["matmul"] = (lambda: ad.sum_((m1 @ m2) * w235), [m1, m2])
    s = leaf(3, 5)
    w35 = rng.normal(size=(3, 5))
    cases["softmax"] = (lambda: ad.sum_(ad.softmax(s, axis=-1) * w35), [s])
    g, bb = leaf(5, lo=0.5, hi=1.5), leaf(5)
    cases["layernorm"] = (lambda: ad.sum_(ad.layernorm(s, g, bb) * w35), [s, g, bb])
    cx, cw, cb = leaf(2, 4, 5), leaf(3, 2, 3, 3), leaf(3)
    wc = rng.normal(size=(3, 4, 5))
    cases["conv2d"] = (lambda: ad.sum_(ad.conv2d(cx, cw, cb) * wc), [cx, cw, cb])
    za, zb = leaf(3, 2), leaf(3, 2, lo=0.5, hi=1.5)
    w32 = rng.normal(size=(3, 2))
    cases["cmul"] = (lambda: ad.sum_(ad.cmul(za, zb) * w32), [za, zb])
    cases["cdiv"] = (lambda: ad.sum_(ad.cdiv(za, zb) * w32), [za, zb])
    cases["cexp"] = (lambda: ad.sum_(ad.cexp(za) * w32), [za])
    p = init_dss(rng, 2, 3)
    u = leaf(6, 2)
    wd = rng.normal(size=(6, 2))
    for mode in MODES:
        cases[f"dss[{mode}]"] = (lambda mode=mode: ad.sum_(dss_forward(u, p, mode) * wd),
                                 [u, p.log_neg_re, p.lam_im, p.log_dt, p.w, p.d_skip])
    return cases


def _block_cases(rng):
    cases = {}
    gp = init_gss(rng, 4, state_size=4)
    S = ad.parameter(rng.normal(size=(7, 4)))
    w74 = rng.normal(size=(7, 4))
    cases["gss_block"] = (lambda: ad.sum_(gss_block(S, gp) * w74),
                          [S] + [a for _, a in gp.named()])
    # four channels: a two-channel layernorm is nearly a sign function and too curved for eps=1e-3
    bp = init_bev_fusion(rng, 4, 1, state_size=2, alpha=1.0, beta=2.0)
    hist, F = ad.parameter(rng.normal(size=(4, 3, 3))), ad.parameter(rng.normal(size=(4, 3, 3)))
    w433 = rng.normal(size=(4, 3, 3))
    cases["fuse_bev"] = (lambda: ad.sum_(fuse_bev([hist], F, bp) * w433),
                         [hist, F] + [a for _, a in bp.named()])
    ip = init_instance_fusion(rng, 4, state_size=2)
    Q, H = ad.parameter(rng.normal(size=(3, 4))), ad.parameter(rng.normal(size=(3, 4)))
    w34 = rng.normal(size=(3, 4))
    cases["fuse_instances"] = (lambda: ad.sum_(fuse_instances([H], Q, ip) * w34),
                               [Q, H] + [a for _, a in ip.named()])
    m = MapNet(tiny_config())
    obs = rng.normal(size=(3, 6, 10))
    w8 = rng.normal(size=(8, 6, 10))
    cases["encoder"] = (lambda: ad.sum_(m.encode(obs) * w8), [m["enc0.w"], m["enc1.w"], m["enc1.b"]])
    Fd = ad.Array(rng.normal(size=(8, 6, 10)))
    w416 = rng.normal(size=(4, 16))
    cases["decoder"] = (lambda: ad.sum_(m.decode(Fd) * w416),
                        [m[n] for n in ("queries", "mem.w", "dec0.q.w", "dec0.k.w", "dec1.v.w", "dec1.ff2.w")])
    Qh = ad.parameter(rng.normal(size=(4, 16)))
    gts = [(1, rng.uniform(-4, 4, (4, 2))), (0, rng.uniform(-4, 4, (4, 2)))]
    cases["heads+loss"] = (lambda: map_loss(*_logits_points(m, Qh), gts).total,
                           [Qh, m["cls.w"], m["pts1.w"], m["pts2.w"], m["ref"]])
    return cases


def _logits_points(m, Q):
    out = m.heads(Q)
    return out.logits, out.points


def _full_step_error(rng) -> float:
    m = MapNet(tiny_config())
    obs = [rng.normal(size=(3, 6, 10)) for _ in range(3)]
    poses = [Pose(0, 0, 0), Pose(1.3, 0.2, 0.05), Pose(2.9, 0.1, 0.1)]
    gts = [(0, rng.uniform(-5, 3, (4, 2))), (2, rng.uniform(-5, 3, (4, 2)))]
    bank0 = MemoryBank(2)
    with ad.no_grad():
        for o, p in zip(obs[:2], poses[:2]):
            m.step(bank0, o, p)

    def run():
        a, b = m.step(copy.deepcopy(bank0), obs[2], poses[2])
        return total_loss(a, b, gts).total

    params = m.parameters()
    for p in params:
        p.grad = None
    with ad.Tape() as tape:
        loss = run()
    ad.backward(tape, loss)
    picks = rng.choice(len(params), size=20, replace=False)
    an, nu = [], []
    for i in picks:
        p = params[i]
        j = int(rng.integers(0, p.size))
        an.append(0.0 if p.grad is None else p.grad.reshape(-1)[j])
        nu.append(ad.numerical_grad(run, p, 1e-3, [j], order=4).reshape(-1)[j])
    return ad.relative_error(np.array(an), np.array(nu))


def test_criterion_1_gradient_soundness():
    t0 = time.time()
    rng = np.random.default_rng(1)
    prim = {k: ad.gradcheck(fn, ps) for k, (fn, ps) in _primitive_cases(rng).items()}
    block = {k: ad.gradcheck(fn, ps, eps=1e-3, order=4, max_entries=25)
             for k, (fn, ps) in _block_cases(rng).items()}
    full = _full_step_error(rng)
    elapsed = time.time() - t0
    worst_p = max(prim, key=prim.get)
    worst_b = max(block, key=block.get)
    ok = prim[worst_p] < 1e-5 and block[worst_b] < 1e-4 and full < 1e-3 and elapsed < 300
    record(1, ok, f"{len(prim)} primitives worst {prim[worst_p]:.1e} ({worst_p}); {len(block)} blocks "
                  f"worst {block[worst_b]:.1e} ({worst_b}); full step {full:.1e}; {elapsed:.0f}s")
    assert ok, (prim, block, full, elapsed)


# ---------------------------------------------------------------- 2

def test_criterion_2_ssm_mode_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(2)
    worst = 0.0
    lengths = []
    for draw in range(100):
        L = 4096 if draw == 0 else int(rng.integers(1, 4097))
        lengths.append(L)
        H, n = int(rng.integers(1, 5)), int(rng.integers(1, 17))
        p = init_dss(rng, H, n)
        u = ad.Array(rng.uniform(-1, 1, size=(L, H)))
        rec = dss_forward(u, p, "recurrence").data
        for mode in ("scan", "kernel"):
            worst = max(worst, float(np.abs(dss_forward(u, p, mode).data - rec).max()))
    elapsed = time.time() - t0
    ok = worst < 1e-8 and elapsed < 60
    record(2, ok, f"100 draws, L up to {max(lengths)}: max |diff| {worst:.1e}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_assignment_optimality():
    t0 = time.time()
    rng = np.random.default_rng(3)
    bad_cost = bad_shift = 0
    for trial in range(1000):
        n, m = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        c = rng.uniform(-10, 10, size=(n, m))
        a = solve(c)
        if abs(a.cost - brute_force(c).cost) > 1e-9:
            bad_cost += 1
        shifted = c.copy()
        if n <= m:
            shifted[rng.integers(0, n)] += rng.uniform(-20, 20)      # every row is assigned
        if n >= m:
            shifted[:, rng.integers(0, m)] += rng.uniform(-20, 20)   # every column is assigned
        if not np.array_equal(solve(shifted).cols, a.cols):
            bad_shift += 1
    elapsed = time.time() - t0
    ok = bad_cost == 0 and bad_shift == 0 and elapsed < 60
    record(3, ok, f"1000 matrices up to 7x7: {bad_cost} cost mismatches, {bad_shift} shift changes; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_scan_bijectivity():
    t0 = time.time()
    rng = np.random.default_rng(4)
    failures = 0
    for _ in range(1000):
        c, h, w = (int(v) for v in rng.integers(1, 13, size=3))
        F = rng.normal(size=(c, h, w))
        for d in DIRECTIONS:
            S = scan_bev(ad.Array(F), d)
            if S.shape != (h * w, c) or not np.array_equal(unscan_bev(S, d, h, w).data, F):
                failures += 1
        frames, n_q = int(rng.integers(1, 8)), int(rng.integers(1, 12))
        window = [ad.Array(rng.normal(size=(n_q, c))) for _ in range(frames)]
        stacked = np.concatenate([q.data for q in window])
        for layout in InstanceLayout:
            seq = build_instance_sequence(window, layout).data
            back = np.empty_like(seq)
            back[instance_order(frames, n_q, layout)] = seq
            if not np.array_equal(back, stacked):
                failures += 1
    elapsed = time.time() - t0
    ok = failures == 0 and elapsed < 60
    record(4, ok, f"1000 shapes x 4 scans + 2 layouts: {failures} failures; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_residual_identity():
    rng = np.random.default_rng(5)
    checks = {}
    gp = init_gss(rng, 8, state_size=4)
    gp.W_o.data[:] = 0
    S = ad.Array(rng.normal(size=(33, 8)))
    checks["gss_block"] = all(np.array_equal(gss_block(S, gp, m).data, S.data) for m in MODES)

    bp = init_bev_fusion(rng, 4, 2, state_size=4)
    for blk in bp.gss.values():
        blk.W_o.data[:] = 0
    window = [ad.Array(rng.normal(size=(4, 5, 7))) for _ in range(2)]
    F_t = ad.Array(rng.normal(size=(4, 5, 7)))
    ref = cells_to_grid(fused_input(window, F_t, bp), 5, 7).data
    checks["fuse_bev"] = all(np.array_equal(fuse_bev(window, F_t, bp, m).data, ref) for m in MODES)

    ip = init_instance_fusion(rng, 8, state_size=4)
    for blk in ip.gss.values():
        blk.W_o.data[:] = 0
    Q = ad.Array(rng.normal(size=(6, 8)))
    hist = [ad.Array(rng.normal(size=(6, 8))) for _ in range(3)]
    # two layouts are averaged, (Q + Q) / 2 is exact in binary floating point
    checks["fuse_instances"] = all(np.array_equal(fuse_instances(hist, Q, ip, m).data, Q.data) for m in MODES)
    ok = all(checks.values())
    record(5, ok, ", ".join(f"{k} {'exact' if v else 'differs'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------- 6, 7, 8

@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Fixed-seed desk benchmark; trained variants are cached by configuration hash."""
    cfg = desk_config()
    cache = Path(os.environ.get("MAPFUSE_ACCEPTANCE_CACHE") or tmp_path_factory.mktemp("desk_cache"))
    train_set = generate_dataset(TRAIN_SEEDS, cfg.gen)
    eval_set = generate_dataset(EVAL_SEEDS, cfg.gen)
    results = {}

    def run(tag, **overrides):
        if tag not in results:
            vcfg = cfg.with_model(**overrides)
            vcfg.validate()
            t0 = time.time()
            model, history = trained_model(vcfg, train_set, cache)
            res = evaluate(model, eval_set, cfg.eval, cfg.loss)
            results[tag] = (res, time.time() - t0, history)
        return results[tag][0]

    return cfg, run, results


def test_criterion_6_fusion_trend(desk):
    cfg, run, results = desk
    none = run("none", bmf=False, imf=False)
    bmf = run("BMF", bmf=True, imf=False)
    imf = run("IMF", bmf=False, imf=True)
    both = run("both", bmf=True, imf=True)
    ok = both.mAP >= none.mAP + 0.05 and bmf.mAP >= none.mAP and imf.mAP >= none.mAP
    minutes = sum(results[t][1] for t in ("none", "BMF", "IMF", "both")) / 60
    record(6, ok, f"mAP none {none.mAP:.4f}, BMF {bmf.mAP:.4f}, IMF {imf.mAP:.4f}, both {both.mAP:.4f} "
                  f"(need both >= none + 0.05, singles >= none); {minutes:.0f} min, "
                  f"{len(TRAIN_SEEDS)}/{len(EVAL_SEEDS)} scenarios, {cfg.epochs} epochs")
    assert ok


def test_criterion_7_memory_trend(desk):
    _, run, results = desk
    n4 = run("both", bmf=True, imf=True)
    n1 = run("N=1", N=1)
    ok = n4.mAP >= n1.mAP
    record(7, ok, f"mAP N=1 {n1.mAP:.4f}, N=4 {n4.mAP:.4f}")
    assert ok


def test_criterion_8_matching_harness(desk, tmp_path):
    _, run, results = desk
    t0 = time.time()
    rows = [(cost, run("both" if cost == "l2" else cost, match_cost=cost))
            for cost in ("chamfer", "cosine", "l2")]
    path = tmp_path / "ablation_matching.csv"
    write_rows(path, rows)
    with open(path) as fh:
        parsed = list(csv.DictReader(fh))
    finite = all(np.isfinite(float(r["mAP"])) for r in parsed)
    ok = [r["tag"] for r in parsed] == ["chamfer", "cosine", "l2"] and finite
    order = " > ".join(t for t, _ in sorted(rows, key=lambda tr: -tr[1].mAP))
    record(8, ok, "mAP " + ", ".join(f"{t} {r.mAP:.4f}" for t, r in rows) + f"; order {order} (reported only)")
    assert ok


@pytest.mark.xfail(strict=True, reason="desk training loss only falls to about 0.73x of epoch 1 by epoch 5")
def test_desk_loss_halves_by_epoch_5(desk):
    _, run, results = desk
    run("both", bmf=True, imf=True)
    history = results["both"][2]
    assert len(history) >= 5, "cached run carries no loss history"
    ratio = history[4] / history[0]
    print(f"epoch-5 / epoch-1 training loss: {ratio:.3f}")
    assert ratio < 0.5


# ---------------------------------------------------------------- 9

def test_criterion_9_detach_contract():
    rng = np.random.default_rng(9)
    m = MapNet(tiny_config())
    obs = [ad.parameter(rng.normal(size=(3, 6, 10))) for _ in range(3)]
    poses = [Pose(0.0, 0.0, 0.0), Pose(0.8, 0.1, 0.03), Pose(1.7, 0.1, 0.05)]
    gts = [(1, rng.uniform(-4, 4, (4, 2))), (2, rng.uniform(-4, 4, (4, 2)))]
    bank = MemoryBank(2)
    with ad.Tape() as tape:
        outs = [m.step(bank, o, p) for o, p in zip(obs, poses)]
        loss = total_loss(*outs[2], gts).total
    ad.backward(tape, loss)
    stored = [e.feature for e in bank.bev] + [e.queries.queries for e in bank.ins]
    producer_norm = sum(0.0 if o.grad is None else float(np.linalg.norm(o.grad)) for o in obs[:2])
    live = obs[2].grad is not None and float(np.linalg.norm(obs[2].grad)) > 0
    detached = not any(a.requires_grad for a in stored)

    # parameter gradients equal those of the same frame with the history replayed under no_grad
    grads = {n: None if p.grad is None else p.grad.copy() for n, p in m.named_parameters()}
    for p in m.parameters():
        p.grad = None
    bank2 = MemoryBank(2)
    with ad.no_grad():
        for o, p in zip(obs[:2], poses[:2]):
            m.step(bank2, o.data, p)
    with ad.Tape() as tape:
        loss2 = total_loss(*m.step(bank2, obs[2], poses[2]), gts).total
    ad.backward(tape, loss2)
    same = all((g is None and p.grad is None) or np.array_equal(g, p.grad)
               for (n, p), g in zip(m.named_parameters(), grads.values()))
    ok = producer_norm == 0.0 and live and detached and same
    record(9, ok, f"history producer grad norm {producer_norm}; current frame grad flows {live}; "
                  f"bank arrays detached {detached}; parameter grads match no-history replay {same}")
    assert ok


# ---------------------------------------------------------------- 10

_DET_CONFIG = {
    "gen.H": 6, "gen.W": 10, "gen.x_max": 6.0, "gen.y_max": 3.6, "gen.points": 4, "gen.frames": 3,
    "model.H": 6, "model.W": 10, "model.x_max": 6.0, "model.y_max": 3.6, "model.P": 4,
    "model.C": 8, "model.D": 16, "model.N_q": 8, "model.n": 4, "model.N": 2, "model.head_hidden": 8,
    "epochs": 2, "seed": 11,
}


def test_criterion_10_format_roundtrips(tmp_path):
    import json
    t0 = time.time()
    cfg = desk_config()
    scs = [generate_scenario(s, replace(cfg.gen, frames=4)) for s in (21, 22, 23)]
    ds_path = tmp_path / "d.mmsyn"
    write_dataset(ds_path, scs, replace(cfg.gen, frames=4))
    ds = read_dataset(ds_path)
    ds_ok = True
    for a, b in zip(quantize(scs), ds.scenarios):
        ds_ok &= a.seed == b.seed
        ds_ok &= all(x.cls == y.cls and np.array_equal(x.points, y.points) for x, y in zip(a.elements, b.elements))
        for f, g in zip(a.frames, b.frames):
            ds_ok &= f.pose == g.pose and np.array_equal(f.raster, g.raster)
            ds_ok &= all(c1 == c2 and np.array_equal(p1, p2) for (c1, p1), (c2, p2) in zip(f.gt, g.gt))
    again = tmp_path / "d2.mmsyn"
    write_dataset(again, ds.scenarios, replace(cfg.gen, frames=4))
    ds_ok &= again.read_bytes() == ds_path.read_bytes()

    model = MapNet(cfg.model)
    ck = tmp_path / "m.mmckpt"
    save_checkpoint(ck, model_state(model), {"model": cfg.model.to_dict(), "epoch": 0})
    m2, tensors, _ = load_model(ck)
    ck_ok = all(np.array_equal(p.data, q.data) for p, q in zip(model.parameters(), m2.parameters()))
    ck2 = tmp_path / "m2.mmckpt"
    save_checkpoint(ck2, tensors, load_checkpoint(ck)[1])
    ck_ok &= ck.read_bytes() == ck2.read_bytes()

    conf = tmp_path / "det.json"
    conf.write_text(json.dumps(_DET_CONFIG))
    data = tmp_path / "det.mmsyn"
    cli = [sys.executable, "-m", "mapfuse", "--deterministic"]
    subprocess.run(cli + ["generate", "--config", str(conf), "--out", str(data), "--count", "6"], check=True,
                   capture_output=True)
    blobs = []
    for run in ("a", "b"):
        subprocess.run(cli + ["train", "--config", str(conf), "--data", str(data), "--out-dir",
                              str(tmp_path / run)], check=True, capture_output=True)
        blobs.append((tmp_path / run / "last.mmckpt").read_bytes())
    det_ok = blobs[0] == blobs[1]
    elapsed = time.time() - t0
    ok = ds_ok and ck_ok and det_ok and elapsed < 600
    record(10, ok, f"MMSYN1 bit-exact {ds_ok}; MMCKPT1 bit-exact {ck_ok}; "
                   f"two deterministic trainings byte-identical {det_ok}; {elapsed:.0f}s")
    assert ok
