"""Deterministic synthetic driving worlds with occluded, noisy BEV rasters.

A world is a gently curving road: boundaries and lane dividers are lateral
offsets of a centerline, pedestrian crossings are short transverse segments.
The ego vehicle drives along one lane. Each frame is rendered into a
per-class raster, rectangular occluders blank part of it and Gaussian noise
is added on top. Occluders persist and drift between frames, so consecutive
frames reveal different parts of the map.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .geometry import BevGeometry, Pose, wrap_angle


class MapClass(IntEnum):
    PED_CROSSING = 0
    DIVIDER = 1
    BOUNDARY = 2


CLASS_NAMES = ("ped", "div", "bou")


@dataclass
class GenConfig:
    n_boundaries: tuple[int, int] = (2, 4)
    n_dividers: tuple[int, int] = (2, 6)
    n_crossings: tuple[int, int] = (1, 4)
    frames: int = 10
    H: int = 50
    W: int = 100
    x_max: float = 30.0
    y_max: float = 15.0
    points: int = 20
    lane_width: float = 3.5
    speed: tuple[float, float] = (3.0, 5.0)   # metres per frame
    max_curvature: float = 0.012
    occlusion: float = 0.4                    # expected occluded cell fraction
    occluders: int = 3
    occluder_width: tuple[float, float] = (0.5, 1.0)   # fraction of the grid width
    persistence: float = 0.8
    occluder_drift: float = 2.0               # cells per frame
    noise: float = 0.3
    min_length: float = 2.0                   # drop clipped GT pieces shorter than this

    @property
    def geometry(self) -> BevGeometry:
        return BevGeometry(self.H, self.W, self.x_max, self.y_max)

    def validate(self) -> None:
        for name in ("n_boundaries", "n_dividers", "n_crossings"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ContractError(f"{name} must be an ordered non-negative range")
        if self.n_boundaries[1] + self.n_dividers[1] + self.n_crossings[1] == 0:
            raise ContractError("configuration admits no map elements")
        if self.n_boundaries[0] < 2:
            raise ContractError("a road needs at least two boundaries")
        if self.frames < 1 or self.points < 2:
            raise ContractError("frames >= 1 and points >= 2 required")
        if not 0.0 <= self.occlusion < 1.0:
            raise ContractError("occlusion fraction must lie in [0, 1)")
        if self.occluders < 1 and self.occlusion > 0:
            raise ContractError("positive occlusion needs at least one occluder")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown generator keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class MapElement:
    cls: MapClass
    points: np.ndarray  # world frame, K x 2


@dataclass
class Frame:
    pose: Pose
    raster: np.ndarray                      # C_obs x H x W float32
    gt: list[tuple[int, np.ndarray]]        # (class, P x 2) in the ego frame


@dataclass
class Scenario:
    seed: int
    elements: list[MapElement]
    frames: list[Frame] = field(default_factory=list)


# ---------------------------------------------------------------- polylines

def polyline_length(pts: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def resample_polyline(pts: np.ndarray, n: int) -> np.ndarray:
    """``n`` points uniformly spaced in arc length; endpoints are kept."""
    pts = np.asarray(pts, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    first, last = pts[0].copy(), pts[-1].copy()
    if s[-1] == 0:
        # length underflows even when the endpoints differ by a subnormal
        out = np.repeat(pts[:1], n, axis=0)
    else:
        keep = np.concatenate([[True], seg > 0])
        s, pts = s[keep], pts[keep]
        t = np.linspace(0.0, s[-1], n)
        out = np.stack([np.interp(t, s, pts[:, 0]), np.interp(t, s, pts[:, 1])], axis=-1)
    out[0], out[-1] = first, last
    return out


def clip_polyline(pts: np.ndarray, x_max: float, y_max: float) -> list[np.ndarray]:
    """Pieces of a polyline lying inside the axis-aligned range rectangle."""
    pieces: list[np.ndarray] = []
    current: list[np.ndarray] = []
    for a, b in zip(pts[:-1], pts[1:]):
        seg = _clip_segment(a, b, x_max, y_max)
        if seg is None:
            if len(current) > 1:
                pieces.append(np.array(current))
            current = []
            continue
        p, q = seg
        if current and np.array_equal(current[-1], p):
            current.append(q)
        else:
            if len(current) > 1:
                pieces.append(np.array(current))
            current = [p, q]
        if not np.array_equal(q, b):
            pieces.append(np.array(current))
            current = []
    if len(current) > 1:
        pieces.append(np.array(current))
    return pieces


def _clip_segment(a, b, x_max, y_max):
    """Liang-Barsky clipping of segment a-b to |x| <= x_max, |y| <= y_max."""
    d = b - a
    t0, t1 = 0.0, 1.0
    for p, q in ((-d[0], a[0] + x_max), (d[0], x_max - a[0]),
                 (-d[1], a[1] + y_max), (d[1], y_max - a[1])):
        if p == 0:
            if q < 0:
                return None
            continue
        t = q / p
        if p < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
        if t0 > t1:
            return None
    return (a if t0 == 0.0 else a + t0 * d), (b if t1 == 1.0 else a + t1 * d)


# ---------------------------------------------------------------- world

def _centerline(rng: np.random.Generator, cfg: GenConfig, s_lo: float, s_hi: float,
                step: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smooth road centerline: returns (arc length, points, headings)."""
    s = np.arange(s_lo, s_hi + step, step)
    k = np.zeros_like(s)
    for _ in range(3):
        amp = rng.uniform(-1, 1) * cfg.max_curvature / 3
        wavelength = rng.uniform(60, 200)
        k += amp * np.sin(2 * np.pi * s / wavelength + rng.uniform(0, 2 * np.pi))
    i0 = int(np.argmin(np.abs(s)))
    heading = np.cumsum(k) * step
    heading -= heading[i0]
    xy = np.cumsum(np.stack([np.cos(heading), np.sin(heading)], axis=-1) * step, axis=0)
    xy -= xy[i0]
    return s, xy, heading


def _offset(xy: np.ndarray, heading: np.ndarray, d: float) -> np.ndarray:
    normal = np.stack([-np.sin(heading), np.cos(heading)], axis=-1)
    return xy + d * normal


def _element_counts(rng, cfg: GenConfig) -> tuple[int, int, int]:
    nb = int(rng.integers(cfg.n_boundaries[0], cfg.n_boundaries[1] + 1))
    nd = int(rng.integers(cfg.n_dividers[0], cfg.n_dividers[1] + 1))
    nc = int(rng.integers(cfg.n_crossings[0], cfg.n_crossings[1] + 1))
    return nb, nd, nc


def generate_world(rng: np.random.Generator, cfg: GenConfig, travel: float):
    nb, nd, nc = _element_counts(rng, cfg)
    margin = cfg.x_max + 15.0
    s, xy, heading = _centerline(rng, cfg, -margin, travel + margin)
    lanes = nd + 1
    half = lanes * cfg.lane_width / 2
    elements: list[MapElement] = []
    # Road edges, then extra boundaries (kerbs / medians) just outside them.
    offsets = [-half, half]
    for i in range(nb - 2):
        side = -1 if i % 2 == 0 else 1
        offsets.append(side * (half + rng.uniform(1.5, 4.0) + 2.0 * (i // 2)))
    for off in offsets:
        elements.append(MapElement(MapClass.BOUNDARY, _offset(xy, heading, off)))
    for j in range(1, lanes):
        off = -half + j * cfg.lane_width
        pts = _offset(xy, heading, off)
        # some dividers stop or start part way along the road
        if rng.random() < 0.4:
            cut = int(rng.integers(len(s) // 4, 3 * len(s) // 4))
            pts = pts[:cut] if rng.random() < 0.5 else pts[cut:]
        elements.append(MapElement(MapClass.DIVIDER, pts))
    s_cross = np.sort(rng.uniform(-0.5 * cfg.x_max, 0.6 * travel + 0.5 * cfg.x_max, size=nc))
    for sc in s_cross:
        i = int(np.argmin(np.abs(s - sc)))
        a = _offset(xy[i:i + 1], heading[i:i + 1], -half)[0]
        b = _offset(xy[i:i + 1], heading[i:i + 1], half)[0]
        elements.append(MapElement(MapClass.PED_CROSSING, np.linspace(a, b, 8)))
    lane = int(rng.integers(0, lanes))
    lane_offset = -half + (lane + 0.5) * cfg.lane_width
    return elements, (s, xy, heading), lane_offset


def ego_trajectory(rng, cfg: GenConfig, road, lane_offset: float) -> list[Pose]:
    s, xy, heading = road
    poses = []
    pos_s = 0.0
    speed = rng.uniform(*cfg.speed)
    lateral = 0.0
    for _ in range(cfg.frames):
        i = int(np.argmin(np.abs(s - pos_s)))
        p = _offset(xy[i:i + 1], heading[i:i + 1], lane_offset + lateral)[0]
        yaw = wrap_angle(float(heading[i]) + rng.normal(0.0, 0.01))
        poses.append(Pose(float(p[0]), float(p[1]), yaw))
        speed = float(np.clip(speed + rng.normal(0.0, 0.3), *cfg.speed))
        lateral = float(np.clip(0.8 * lateral + rng.normal(0.0, 0.15), -0.6, 0.6))
        pos_s += speed
    return poses


# ---------------------------------------------------------------- rendering

def ego_ground_truth(elements: list[MapElement], pose: Pose, cfg: GenConfig) -> list[tuple[int, np.ndarray]]:
    gts = []
    for el in elements:
        local = pose.to_ego(el.points)
        for piece in clip_polyline(local, cfg.x_max, cfg.y_max):
            if polyline_length(piece) >= cfg.min_length:
                gts.append((int(el.cls), resample_polyline(piece, cfg.points)))
    return gts


def rasterize(elements: list[MapElement], pose: Pose, cfg: GenConfig) -> np.ndarray:
    """Clean per-class raster (C_obs x H x W) of the map around ``pose``.

    Dense samples along each visible polyline are splatted bilinearly, so a
    line between two cell centers shows up in both with sub-cell weights.
    Values are clipped to [0, 1].
    """
    geom = cfg.geometry
    H, W = cfg.H, cfg.W
    out = np.zeros((len(MapClass), H * W))
    px, py = geom.pitch
    spacing = 0.25 * min(px, py)
    gain = spacing / min(px, py)
    for el in elements:
        local = pose.to_ego(el.points)
        for piece in clip_polyline(local, cfg.x_max, cfg.y_max):
            n = max(2, int(math.ceil(polyline_length(piece) / spacing)) + 1)
            idx = geom.to_index(resample_polyline(piece, n))
            c0 = np.floor(idx[:, 0]).astype(np.int64)
            r0 = np.floor(idx[:, 1]).astype(np.int64)
            fc, fr = idx[:, 0] - c0, idx[:, 1] - r0
            for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                                (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
                r = np.clip(r0 + dr, 0, H - 1)
                c = np.clip(c0 + dc, 0, W - 1)
                np.add.at(out[int(el.cls)], r * W + c, wgt * gain)
    return np.minimum(out, 1.0).reshape(len(MapClass), H, W).astype(np.float32)


class OccluderModel:
    """Rectangles on the grid torus; every cell is covered with the same probability.

    Each occluder covers a fixed number of cells ``a`` (its width is drawn per
    spawn, the height follows), and positions are uniform with wrap-around at
    the grid edges, so the expected occluded fraction is
    1 - (1 - a / (H W)) ** k. Between frames an occluder is kept with
    probability ``persistence`` and drifts, otherwise it respawns.
    """

    def __init__(self, cfg: GenConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.k = cfg.occluders if cfg.occlusion > 0 else 0
        self.area = 0.0
        if self.k:
            self.area = (1.0 - (1.0 - cfg.occlusion) ** (1.0 / self.k)) * cfg.H * cfg.W
        self.pos = np.zeros((self.k, 2))
        self.vel = np.zeros((self.k, 2))
        self.size = np.zeros((self.k, 2), dtype=np.int64)
        for i in range(self.k):
            self._respawn(i)

    def _respawn(self, i: int) -> None:
        cfg = self.cfg
        w = int(round(self.rng.uniform(*cfg.occluder_width) * cfg.W))
        w = int(np.clip(w, 1, cfg.W))
        h = int(np.clip(round(self.area / w), 1, cfg.H))
        self.size[i] = (h, w)
        self.pos[i] = (self.rng.uniform(0, cfg.H), self.rng.uniform(0, cfg.W))
        self.vel[i] = self.rng.uniform(-1, 1, size=2) * cfg.occluder_drift

    @property
    def expected_fraction(self) -> float:
        if not self.k:
            return 0.0
        a = self.area / (self.cfg.H * self.cfg.W)
        return 1.0 - (1.0 - a) ** self.k

    def step(self) -> None:
        for i in range(self.k):
            if self.rng.random() < self.cfg.persistence:
                self.pos[i] += self.vel[i]
            else:
                self._respawn(i)

    def mask(self) -> np.ndarray:
        """Boolean H x W, True where occluded."""
        H, W = self.cfg.H, self.cfg.W
        m = np.zeros((H, W), dtype=bool)
        for (r0, c0), (h, w) in zip(np.floor(self.pos).astype(np.int64), self.size):
            rows = (r0 + np.arange(h)) % H
            cols = (c0 + np.arange(w)) % W
            m[np.ix_(rows, cols)] = True
        return m


def render_observation(elements: list[MapElement], pose: Pose, occluders: OccluderModel | None,
                       rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    raster = rasterize(elements, pose, cfg)
    if occluders is not None and occluders.k:
        raster[:, occluders.mask()] = 0.0
    if cfg.noise > 0:
        raster += rng.normal(0.0, cfg.noise, size=raster.shape).astype(np.float32)
    return raster


def generate_scenario(seed: int, cfg: GenConfig | None = None) -> Scenario:
    cfg = cfg or GenConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    travel = cfg.frames * cfg.speed[1]
    elements, road, lane_offset = generate_world(rng, cfg, travel)
    poses = ego_trajectory(rng, cfg, road, lane_offset)
    render_rng = np.random.default_rng([seed, 1])
    occ = OccluderModel(cfg, render_rng)
    scenario = Scenario(seed=seed, elements=elements)
    for t, pose in enumerate(poses):
        if t:
            occ.step()
        raster = render_observation(elements, pose, occ, render_rng, cfg)
        scenario.frames.append(Frame(pose, raster, ego_ground_truth(elements, pose, cfg)))
    return scenario


def generate_dataset(seeds, cfg: GenConfig | None = None) -> list[Scenario]:
    return [generate_scenario(int(s), cfg) for s in seeds]


# ---------------------------------------------------------------- MMSYN1 container

MAGIC = b"MMSYN1\n"
VERSION = 1


def write_dataset(path, scenarios: list[Scenario], cfg: GenConfig) -> None:
    buf = bytearray(MAGIC)
    T = len(scenarios[0].frames) if scenarios else cfg.frames
    buf += struct.pack("<7I", VERSION, len(scenarios), T, cfg.H, cfg.W, len(MapClass), cfg.points)
    for sc in scenarios:
        if len(sc.frames) != T:
            raise FormatError("all scenarios in a dataset must have the same frame count")
        buf += struct.pack("<Q", sc.seed)
        buf += struct.pack("<I", len(sc.elements))
        for el in sc.elements:
            pts = np.asarray(el.points, dtype="<f4")
            buf += struct.pack("<BI", int(el.cls), len(pts))
            buf += pts.tobytes()
        for fr in sc.frames:
            buf += struct.pack("<3f", fr.pose.x, fr.pose.y, fr.pose.yaw)
            buf += np.asarray(fr.raster, dtype="<f4").tobytes()
            buf += struct.pack("<I", len(fr.gt))
            for cls, pts in fr.gt:
                buf += struct.pack("<B", cls)
                buf += np.asarray(pts, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


@dataclass
class Dataset:
    H: int
    W: int
    c_obs: int
    points: int
    frames: int
    scenarios: list[Scenario]


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: not an MMSYN1 dataset")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, data, off)
        off += struct.calcsize(fmt)
        return vals

    def take_f32(count):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float32)
        off += 4 * count
        return arr

    try:
        version, count, T, H, W, c_obs, P = take("<7I")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        scenarios = []
        for _ in range(count):
            (seed,) = take("<Q")
            (n_el,) = take("<I")
            elements = []
            for _ in range(n_el):
                cls, n = take("<BI")
                elements.append(MapElement(MapClass(cls), take_f32(2 * n).reshape(n, 2)))
            frames = []
            for _ in range(T):
                x, y, yaw = (float(v) for v in take_f32(3))
                raster = take_f32(c_obs * H * W).reshape(c_obs, H, W)
                (n_gt,) = take("<I")
                gt = []
                for _ in range(n_gt):
                    (cls,) = take("<B")
                    gt.append((cls, take_f32(2 * P).reshape(P, 2)))
                frames.append(Frame(Pose(x, y, yaw), raster, gt))
            scenarios.append(Scenario(seed, elements, frames))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated dataset ({exc})") from exc
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return Dataset(H, W, c_obs, P, T, scenarios)


def quantize(scenarios: list[Scenario]) -> list[Scenario]:
    """Round every stored float through float32, as the container does."""
    out = []
    for sc in scenarios:
        els = [MapElement(e.cls, np.asarray(e.points, np.float32)) for e in sc.elements]
        frames = []
        for fr in sc.frames:
            pose = Pose(*(float(np.float32(v)) for v in (fr.pose.x, fr.pose.y, fr.pose.yaw)))
            frames.append(Frame(pose, np.asarray(fr.raster, np.float32),
                                [(c, np.asarray(p, np.float32)) for c, p in fr.gt]))
        out.append(Scenario(sc.seed, els, frames))
    return out
