import copy

import numpy as np
import pytest

from mapfuse import autodiff as ad
from mapfuse.bev_fusion import fuse_bev
from mapfuse.errors import ContractError, DimensionError, FormatError
from mapfuse.geometry import Pose
from mapfuse.instance_fusion import fuse_instances
from mapfuse.loss import total_loss
from mapfuse.memory import MemoryBank
from mapfuse.model import (MapNet, ModelConfig, cross_attention, load_checkpoint, load_model,
                           model_state, positional_encoding, save_checkpoint)
from tests.conftest import tiny_config


def _obs(rng, cfg):
    return rng.normal(size=(cfg.c_obs, cfg.H, cfg.W))


def test_encoder_shapes_and_zero_input():
    cfg = ModelConfig()
    m = MapNet(cfg)
    F = m.encode(np.zeros((3, 50, 100)))
    assert F.shape == (cfg.C, 50, 100) and F.dtype == np.float32
    assert np.all(np.isfinite(F.data))
    np.testing.assert_array_equal(F.data, m.encode(np.zeros((3, 50, 100))).data)
    with pytest.raises(DimensionError):
        m.encode(np.zeros((3, 50, 99)))


def test_encoder_gradients(rng):
    m = MapNet(tiny_config())
    obs = _obs(rng, m.cfg)
    wt = rng.normal(size=(8, 6, 10))
    params = [m["enc0.w"], m["enc0.b"], m["enc1.w"], m["enc1.b"]]
    err = ad.gradcheck(lambda: ad.sum_(m.encode(obs) * wt), params, eps=1e-4, order=4, max_entries=30)
    assert err < 1e-4, err


def test_single_cell_attention(rng):
    Q = ad.Array(rng.normal(size=(5, 4)))
    M = ad.Array(rng.normal(size=(1, 4)))
    Wq, Wk, Wv = (ad.Array(rng.normal(size=(4, 4))) for _ in range(3))
    out = cross_attention(Q, M, Wq, Wk, Wv).data
    np.testing.assert_allclose(out, np.repeat(M.data @ Wv.data, 5, axis=0), atol=1e-14)


def test_decoder_shape_and_gradients(rng):
    m = MapNet(tiny_config())
    F = ad.Array(rng.normal(size=(8, 6, 10)))
    assert m.decode(F).shape == (4, 16)
    wt = rng.normal(size=(4, 16))
    names = ["queries", "mem.w", "dec0.q.w", "dec0.k.w", "dec0.v.w", "dec0.o.w", "dec1.ff1.w",
             "dec1.ln2.g"]
    err = ad.gradcheck(lambda: ad.sum_(m.decode(F) * wt), [m[n] for n in names], eps=1e-4,
                       order=4, max_entries=20)
    assert err < 1e-4, err


def test_heads_stay_in_range(rng):
    m = MapNet(tiny_config())
    out = m.heads(ad.Array(rng.normal(size=(4, 16)) * 50))
    assert out.logits.shape == (4, 4) and out.points.shape == (4, 4, 2)
    assert np.all(np.abs(out.points.data[..., 0]) <= 6.0)
    assert np.all(np.abs(out.points.data[..., 1]) <= 3.6)


def test_positional_encoding():
    pe = positional_encoding(3, 5, 8)
    assert pe.shape == (15, 8) and np.all(np.abs(pe) <= 1)
    assert len({tuple(r) for r in np.round(pe, 12)}) == 15
    with pytest.raises(ContractError):
        positional_encoding(3, 5, 6)


def test_cold_start_equals_replicated_history(rng):
    m = MapNet(tiny_config(N=3))
    obs = _obs(rng, m.cfg)
    pose = Pose(2.0, -1.0, 0.3)
    out_o, out_f = m.step(MemoryBank(3), obs, pose)
    # the same frame computed by hand with the current frame in every history slot
    F_t = m.encode(obs)
    F_ref = fuse_bev([F_t] * 3, F_t, m.bmf)
    Q_t = m.decode(F_ref)
    Q_ref = fuse_instances([Q_t] * 3, Q_t, m.imf)
    np.testing.assert_array_equal(out_o.logits.data, m.heads(Q_t).logits.data)
    np.testing.assert_array_equal(out_f.points.data, m.heads(Q_ref).points.data)
    np.testing.assert_array_equal(out_f.logits.data, m.heads(Q_ref).logits.data)


def test_repeated_static_frames_are_deterministic(rng):
    cfg = tiny_config(N=4)
    obs = _obs(rng, cfg)
    runs = []
    for _ in range(2):
        m = MapNet(cfg)
        bank = MemoryBank(4)
        outs = [m.step(bank, obs, Pose()) for _ in range(2)]
        assert len(bank) == 2
        runs.append(outs[1][1])
    assert np.all(np.isfinite(runs[0].points.data))
    np.testing.assert_array_equal(runs[0].points.data, runs[1].points.data)
    np.testing.assert_array_equal(runs[0].logits.data, runs[1].logits.data)


def test_no_history_variant_ignores_bank(rng):
    cfg = tiny_config(bmf=False, imf=False)
    m = MapNet(cfg)
    obs = [_obs(rng, cfg) for _ in range(3)]
    bank = MemoryBank(cfg.N)
    outs = [m.step(bank, o, Pose(float(i))) for i, o in enumerate(obs)]
    alone = m.step(MemoryBank(cfg.N), obs[2], Pose(2.0))
    np.testing.assert_array_equal(outs[2][1].points.data, alone[1].points.data)


@pytest.mark.parametrize("cost", ["l2", "cosine", "chamfer"])
def test_match_costs_run(cost, rng):
    cfg = tiny_config(match_cost=cost)
    m = MapNet(cfg)
    outs = m.rollout([_obs(rng, cfg) for _ in range(3)], [Pose(0.4 * i) for i in range(3)])
    assert all(np.all(np.isfinite(o[1].points.data)) for o in outs)


def test_full_step_gradients(rng):
    """Third frame of a rollout; the bank contents are constants, as stored history is detached."""
    m = MapNet(tiny_config())
    obs = [_obs(rng, m.cfg) for _ in range(3)]
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
    analytic, numeric = [], []
    for i in picks:
        p = params[i]
        j = int(rng.integers(0, p.size))
        g = np.zeros(p.shape) if p.grad is None else p.grad
        analytic.append(g.reshape(-1)[j])
        numeric.append(ad.numerical_grad(run, p, 1e-3, [j], order=4).reshape(-1)[j])
    err = ad.relative_error(np.array(analytic), np.array(numeric))
    assert err < 1e-3, err


def test_history_inputs_receive_no_gradient(rng):
    m = MapNet(tiny_config())
    obs = [ad.parameter(_obs(rng, m.cfg)) for _ in range(3)]
    poses = [Pose(0.5 * i, 0.0, 0.02 * i) for i in range(3)]
    gts = [(1, rng.uniform(-4, 4, (4, 2)))]
    bank = MemoryBank(2)
    with ad.Tape() as tape:
        outs = [m.step(bank, o, p) for o, p in zip(obs, poses)]
        loss = total_loss(*outs[2], gts).total
    ad.backward(tape, loss)
    assert obs[0].grad is None and obs[1].grad is None
    assert obs[2].grad is not None and np.abs(obs[2].grad).max() > 0


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config(dtype="float32")
    m = MapNet(cfg)
    path = tmp_path / "m.mmckpt"
    extra = {"optim/t": np.array([3.0])}
    save_checkpoint(path, {**model_state(m), **extra}, {"model": cfg.to_dict(), "epoch": 3})
    m2, tensors, meta = load_model(path)
    assert meta["epoch"] == 3 and m2.cfg == cfg
    for (n1, a), (n2, b) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and np.array_equal(a.data, b.data)
    assert np.array_equal(tensors["optim/t"], [3.0])
    path2 = tmp_path / "m2.mmckpt"
    save_checkpoint(path2, tensors, meta)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_errors(tmp_path):
    cfg = tiny_config(dtype="float32")
    path = tmp_path / "m.mmckpt"
    save_checkpoint(path, model_state(MapNet(cfg)), {"model": cfg.to_dict()})
    blob = path.read_bytes()
    bad = tmp_path / "bad"
    for payload in (b"X" + blob[1:], blob[:-3], blob + b"!"):
        bad.write_bytes(payload)
        with pytest.raises(FormatError):
            load_checkpoint(bad)
    save_checkpoint(bad, model_state(MapNet(cfg)), {"model": tiny_config(dtype="float32", C=4).to_dict()})
    with pytest.raises(FormatError):
        load_model(bad)
    save_checkpoint(bad, model_state(MapNet(cfg)), {})
    with pytest.raises(FormatError):
        load_model(bad)


def test_config_roundtrip_and_validation():
    cfg = ModelConfig(N=2, bmf=False, bev_scan="vertical")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(N=-1), dict(bev_scan="diagonal"), dict(match_cost="iou"), dict(N_q=0),
                dict(ssm_mode="fft")):
        with pytest.raises(ContractError):
            ModelConfig(**bad).validate()
