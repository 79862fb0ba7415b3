"""Desk-scale map network: conv encoder, cross-attention decoder, heads, and the per-frame step."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Array
from .bev_fusion import BevFusionParams, align_history, fuse_bev, init_bev_fusion
from .errors import ContractError, DimensionError, FormatError, NumericError
from .geometry import BevGeometry, Pose
from .instance_fusion import (LAYOUT_SETS, InstanceFusionParams, align_queries, chamfer_cost,
                              cosine_cost, fuse_instances, init_instance_fusion, match_cost)
from .memory import MemoryBank, QuerySet
from .scans import DIRECTION_SETS, grid_to_cells
from .ssm import MODES, expanded_widths

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    C: int = 16
    H: int = 50
    W: int = 100
    N: int = 4
    N_q: int = 20
    D: int = 64
    P: int = 20
    n: int = 16
    alpha: float = 0.5
    beta: float = 4.0
    K: int = 3
    dec_layers: int = 2
    head_hidden: int = 64
    c_obs: int = 3
    enc_layers: int = 2
    x_max: float = 30.0
    y_max: float = 15.0
    seed: int = 0
    dtype: str = "float32"
    bmf: bool = True
    imf: bool = True
    bev_scan: str = "multi"
    ins_scan: str = "spatial-temporal"
    share_directions: bool = False
    match_cost: str = "l2"
    ssm_mode: str = "scan"

    def validate(self) -> None:
        for name in ("C", "H", "W", "N_q", "D", "P", "n", "K", "dec_layers", "head_hidden",
                     "c_obs", "enc_layers"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.N < 0:
            raise ContractError("memory size N must be non-negative")
        if self.x_max <= 0 or self.y_max <= 0:
            raise ContractError("perception range must be positive")
        if not 2 <= self.enc_layers <= 3:
            raise ContractError("encoder has 2 or 3 conv layers")
        expanded_widths(self.C, self.alpha, self.beta)
        expanded_widths(self.D, self.alpha, self.beta)
        if self.dtype not in _DTYPES:
            raise ContractError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.bev_scan not in DIRECTION_SETS:
            raise ContractError(f"bev_scan must be one of {sorted(DIRECTION_SETS)}")
        if self.ins_scan not in LAYOUT_SETS:
            raise ContractError(f"ins_scan must be one of {sorted(LAYOUT_SETS)}")
        if self.match_cost not in COST_FNS:
            raise ContractError(f"match_cost must be one of {sorted(COST_FNS)}")
        if self.ssm_mode not in MODES:
            raise ContractError(f"ssm_mode must be one of {MODES}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def geometry(self) -> BevGeometry:
        return BevGeometry(self.H, self.W, self.x_max, self.y_max)

    @property
    def bev_history(self) -> int:
        return self.N if self.bmf else 0

    @property
    def ins_history(self) -> int:
        return self.N if self.imf else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


COST_FNS = {"l2": match_cost, "cosine": cosine_cost, "chamfer": chamfer_cost}


@dataclass
class FrameOutput:
    logits: Array        # N_q x (K+1), last column is "no object"
    points: Array        # N_q x P x 2, ego metric coordinates
    bev: Array | None = None
    queries: Array | None = None


class MapNet:
    """Parameters plus the forward pieces; the memory bank lives outside."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        self.params: dict[str, Array] = {}

        def add(name, data):
            self.params[name] = ad.parameter(data, dt, name=name)
            return self.params[name]

        def lin(name, fan_in, fan_out, scale=1.0, bias=True):
            add(name + ".w", rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out)))
            if bias:
                add(name + ".b", np.zeros(fan_out))

        C, D = cfg.C, cfg.D
        cin = cfg.c_obs
        for i in range(cfg.enc_layers):
            add(f"enc{i}.w", rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(C, cin, 3, 3)))
            add(f"enc{i}.b", np.zeros(C))
            cin = C

        directions = DIRECTION_SETS[cfg.bev_scan]
        self.bmf: BevFusionParams = init_bev_fusion(
            rng, C, cfg.bev_history, alpha=cfg.alpha, beta=cfg.beta, state_size=cfg.n,
            directions=directions, shared=cfg.share_directions, dtype=dt)
        self.imf: InstanceFusionParams = init_instance_fusion(
            rng, D, alpha=cfg.alpha, beta=cfg.beta, state_size=cfg.n,
            layouts=LAYOUT_SETS[cfg.ins_scan], dtype=dt)
        for name, arr in self.bmf.named("bmf."):
            self.params[name] = arr
        for name, arr in self.imf.named("imf."):
            self.params[name] = arr

        add("queries", rng.normal(0.0, 1.0, size=(cfg.N_q, D)))
        lin("mem", C, D)
        for l in range(cfg.dec_layers):
            for k in ("q", "k", "v", "o"):
                lin(f"dec{l}.{k}", D, D, bias=(k == "o"))
            add(f"dec{l}.ln1.g", np.ones(D))
            add(f"dec{l}.ln1.b", np.zeros(D))
            lin(f"dec{l}.ff1", D, 2 * D)
            lin(f"dec{l}.ff2", 2 * D, D)
            add(f"dec{l}.ln2.g", np.ones(D))
            add(f"dec{l}.ln2.b", np.zeros(D))
        lin("cls", D, cfg.K + 1, scale=0.1)
        self.params["cls.b"].data[:] = -np.log((1 - 0.01) / 0.01)
        lin("pts1", D, cfg.head_hidden)
        lin("pts2", cfg.head_hidden, 2 * cfg.P, scale=0.1)
        add("ref", reference_init(rng, cfg.N_q, cfg.P))
        self._pos = positional_encoding(cfg.H, cfg.W, D).astype(dt)
        self._extent = np.array([cfg.x_max, cfg.y_max], dtype=dt)

    # -- parameter access
    def named_parameters(self) -> Iterator[tuple[str, Array]]:
        for k in sorted(self.params):
            yield k, self.params[k]

    def parameters(self) -> list[Array]:
        return [p for _, p in self.named_parameters()]

    def __getitem__(self, name: str) -> Array:
        return self.params[name]

    # -- pieces
    def encode(self, obs) -> Array:
        if not (isinstance(obs, Array) and obs.requires_grad and obs.dtype == self.cfg.np_dtype):
            # plain data; a differentiable input of the right dtype keeps its graph
            obs = ad.as_array(np.asarray(obs.data if isinstance(obs, Array) else obs, dtype=self.cfg.np_dtype))
        if obs.shape != (self.cfg.c_obs, self.cfg.H, self.cfg.W):
            raise DimensionError(f"observation {obs.shape} does not match "
                                 f"{(self.cfg.c_obs, self.cfg.H, self.cfg.W)}")
        x = obs
        for i in range(self.cfg.enc_layers):
            x = ad.gelu(ad.conv2d(x, self[f"enc{i}.w"], self[f"enc{i}.b"]))
        return x

    def memory(self, F: Array) -> Array:
        """Flattened BEV cells projected to the decoder width plus a fixed position code."""
        cells = grid_to_cells(F)
        return cells @ self["mem.w"] + self["mem.b"] + self._pos

    def decode(self, F: Array) -> Array:
        M = self.memory(F)
        Q = self["queries"]
        for l in range(self.cfg.dec_layers):
            att = cross_attention(Q, M, self[f"dec{l}.q.w"], self[f"dec{l}.k.w"], self[f"dec{l}.v.w"])
            Q = ad.layernorm(Q + att @ self[f"dec{l}.o.w"] + self[f"dec{l}.o.b"],
                             self[f"dec{l}.ln1.g"], self[f"dec{l}.ln1.b"])
            h = ad.gelu(Q @ self[f"dec{l}.ff1.w"] + self[f"dec{l}.ff1.b"])
            Q = ad.layernorm(Q + h @ self[f"dec{l}.ff2.w"] + self[f"dec{l}.ff2.b"],
                             self[f"dec{l}.ln2.g"], self[f"dec{l}.ln2.b"])
        return Q

    def heads(self, Q: Array) -> FrameOutput:
        logits = Q @ self["cls.w"] + self["cls.b"]
        h = ad.gelu(Q @ self["pts1.w"] + self["pts1.b"])
        delta = (h @ self["pts2.w"] + self["pts2.b"]).reshape(Q.shape[0], self.cfg.P, 2)
        unit = ad.sigmoid(delta + self["ref"])
        points = (unit * 2.0 - 1.0) * self._extent
        return FrameOutput(logits, points, queries=Q)

    # -- full frame
    def step(self, bank: MemoryBank, obs, pose: Pose, timestamp: float | None = None):
        """One frame: returns (pre-fusion output, fused output); pushes the fused state."""
        cfg = self.cfg
        mode = cfg.ssm_mode
        geom = cfg.geometry
        F_t = self.encode(obs)
        if cfg.bev_history:
            history = align_history(bank.window_bev(F_t, pose), pose, geom)
        else:
            history = []
        F_ref = fuse_bev(history, F_t, self.bmf, mode)
        Q_t = self.decode(F_ref)
        out_orig = self.heads(Q_t)
        out_orig.bev = F_ref
        current = QuerySet(Q_t, out_orig.logits.data, out_orig.points.data)
        if cfg.ins_history:
            window = bank.window_ins(current, pose)
            aligned = self._align(window, current, pose)
        else:
            aligned = []
        Q_ref = fuse_instances(aligned, Q_t, self.imf, mode)
        out_fused = self.heads(Q_ref)
        out_fused.bev = F_ref
        bank.push(F_ref, QuerySet(Q_ref, out_fused.logits.data, out_fused.points.data), pose, timestamp)
        return out_orig, out_fused

    def _align(self, window, current: QuerySet, pose: Pose) -> list[Array]:
        if not np.all(np.isfinite(current.queries.data)):
            raise NumericError("non-finite instance queries")
        fn = COST_FNS[self.cfg.match_cost]
        if self.cfg.match_cost == "chamfer":
            hist = [pose.to_ego(p.to_world(qs.points)) for qs, p in window]
            perms = align_queries(hist, current.points, fn)
        else:
            perms = align_queries([qs.queries.data for qs, _ in window], current.queries.data, fn)
        return [ad.take_rows(qs.queries, perm) for (qs, _), perm in zip(window, perms)]

    def rollout(self, observations, poses, bank: MemoryBank | None = None):
        bank = bank if bank is not None else MemoryBank(self.cfg.N)
        return [self.step(bank, o, p) for o, p in zip(observations, poses)]


def reference_init(rng: np.random.Generator, n_q: int, p: int) -> np.ndarray:
    """Per-query reference polylines in logit space: random straight segments in the unit square."""
    centre = rng.uniform(0.2, 0.8, size=(n_q, 1, 2))
    angle = rng.uniform(0, np.pi, size=(n_q, 1))
    half = rng.uniform(0.1, 0.3, size=(n_q, 1))
    t = np.linspace(-1.0, 1.0, p)[None, :]
    pts = centre + np.stack([np.cos(angle), np.sin(angle)], axis=-1) * (half * t)[..., None]
    pts = np.clip(pts, 0.02, 0.98)
    return np.log(pts / (1 - pts))


def cross_attention(Q: Array, M: Array, Wq: Array, Wk: Array, Wv: Array) -> Array:
    """Single-head scaled dot-product attention of queries over memory rows."""
    q = Q @ Wq
    k = M @ Wk
    v = M @ Wv
    scores = (q @ k.T) * (1.0 / np.sqrt(q.shape[1]))
    return ad.softmax(scores, axis=-1) @ v


def positional_encoding(h: int, w: int, d: int) -> np.ndarray:
    """Fixed sinusoidal code of normalized cell coordinates; (h*w) x d."""
    if d % 4:
        raise ContractError("positional code needs a width divisible by 4")
    nf = d // 4
    ys = (np.arange(h) + 0.5) / h * 2 - 1
    xs = (np.arange(w) + 0.5) / w * 2 - 1
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    fx = np.geomspace(0.5, max(w / 4, 1.0), nf)
    fy = np.geomspace(0.5, max(h / 4, 1.0), nf)
    ax = np.pi * gx.reshape(-1, 1) * fx
    ay = np.pi * gy.reshape(-1, 1) * fy
    return np.concatenate([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=1)


# ---------------------------------------------------------------- MMCKPT1

CKPT_MAGIC = b"MMCKPT1\n"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float32 tensors after a small JSON metadata block."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(meta_bytes))
    buf += meta_bytes
    buf += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not an MMCKPT1 checkpoint")
    off = len(CKPT_MAGIC)
    try:
        version, meta_len = struct.unpack_from("<II", data, off)
        off += 8
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
        meta = json.loads(data[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return tensors, meta


def model_state(model: MapNet) -> dict[str, np.ndarray]:
    return {f"param/{k}": v.data for k, v in model.named_parameters()}


def load_model(path) -> tuple[MapNet, dict[str, np.ndarray], dict]:
    """Rebuild a model from a checkpoint; returns (model, all tensors, metadata)."""
    tensors, meta = load_checkpoint(path)
    if "model" not in meta:
        raise FormatError(f"{path}: checkpoint lacks a model configuration")
    try:
        cfg = ModelConfig.from_dict(meta["model"])
    except (ContractError, TypeError) as exc:
        raise FormatError(f"{path}: incompatible model configuration ({exc})") from exc
    model = MapNet(cfg)
    apply_state(model, tensors, str(path))
    return model, tensors, meta


def apply_state(model: MapNet, tensors: dict[str, np.ndarray], origin: str = "checkpoint") -> None:
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in tensors:
            raise FormatError(f"{origin}: missing parameter {name}")
        if tensors[key].shape != p.shape:
            raise FormatError(f"{origin}: parameter {name} has shape {tensors[key].shape}, "
                              f"model expects {p.shape}")
        p.data = tensors[key].astype(p.dtype)
    extra = {k for k in tensors if k.startswith("param/")} - {f"param/{n}" for n, _ in model.named_parameters()}
    if extra:
        raise FormatError(f"{origin}: unexpected parameters {sorted(extra)[:3]}")
