"""Planar ego poses, BEV grid geometry, and inverse bilinear warping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Array
from .errors import DimensionError


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Pose:
    """Ego pose in the world frame: position (x, y) and heading ``yaw``."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous map from ego coordinates to world coordinates."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m3 = self.matrix()
        m[:2, :2] = m3[:2, :2]
        m[:2, 3] = m3[:2, 2]
        return m

    def to_ego(self, pts: np.ndarray) -> np.ndarray:
        """World points (.., 2) expressed in this ego frame."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        d = np.asarray(pts, dtype=np.float64) - (self.x, self.y)
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        p = np.asarray(pts, dtype=np.float64)
        return np.stack([c * p[..., 0] - s * p[..., 1] + self.x,
                         s * p[..., 0] + c * p[..., 1] + self.y], axis=-1)


IDENTITY = Pose()


def relative_transform(pose_src: Pose, pose_dst: Pose) -> np.ndarray:
    """3x3 map taking frame-``dst`` coordinates into frame-``src`` coordinates.

    With ``src`` an earlier frame and ``dst`` the current one this is the
    sampling map used by :func:`warp`.
    """
    c, s = math.cos(pose_src.yaw), math.sin(pose_src.yaw)
    inv = np.array([[c, s, -(c * pose_src.x + s * pose_src.y)],
                    [-s, c, s * pose_src.x - c * pose_src.y],
                    [0.0, 0.0, 1.0]])
    return inv @ pose_dst.matrix()


def apply_transform(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64)
    return p @ T[:2, :2].T + T[:2, 2]


@dataclass(frozen=True)
class BevGeometry:
    """An H x W grid over x in [-x_max, x_max] (columns) and y in [-y_max, y_max] (rows)."""

    H: int = 50
    W: int = 100
    x_max: float = 30.0
    y_max: float = 15.0

    @property
    def pitch(self) -> tuple[float, float]:
        return 2 * self.x_max / self.W, 2 * self.y_max / self.H

    def cell_centers(self) -> np.ndarray:
        """H x W x 2 metric centers."""
        px, py = self.pitch
        xs = -self.x_max + (np.arange(self.W) + 0.5) * px
        ys = -self.y_max + (np.arange(self.H) + 0.5) * py
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def to_index(self, pts: np.ndarray) -> np.ndarray:
        """Metric (.., 2) -> continuous (col, row) index coordinates."""
        px, py = self.pitch
        p = np.asarray(pts, dtype=np.float64)
        return np.stack([(p[..., 0] + self.x_max) / px - 0.5,
                         (p[..., 1] + self.y_max) / py - 0.5], axis=-1)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts)
        return (np.abs(p[..., 0]) <= self.x_max) & (np.abs(p[..., 1]) <= self.y_max)


def _snap(v: np.ndarray) -> np.ndarray:
    r = np.round(v)
    return np.where(np.abs(v - r) < 1e-9, r, v)


def warp_matrix(geom: BevGeometry, T: np.ndarray) -> sp.csr_matrix:
    """Sparse (H*W target) x (H*W source) bilinear sampling matrix."""
    return _warp_matrix_cached(geom, tuple(np.asarray(T, dtype=np.float64).ravel()))


@lru_cache(maxsize=32)
def _warp_matrix_cached(geom: BevGeometry, t_flat: tuple) -> sp.csr_matrix:
    T = np.asarray(t_flat).reshape(3, 3)
    H, W = geom.H, geom.W
    src = geom.to_index(apply_transform(T, geom.cell_centers().reshape(-1, 2)))
    cs, rs = _snap(src[:, 0]), _snap(src[:, 1])
    c0, r0 = np.floor(cs).astype(np.int64), np.floor(rs).astype(np.int64)
    fc, fr = cs - c0, rs - r0
    rows, cols, vals = [], [], []
    target = np.arange(H * W)
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W) & (wgt > 0)
        rows.append(target[ok])
        cols.append(rr[ok] * W + cc[ok])
        vals.append(wgt[ok])
    m = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(H * W, H * W))
    m.sum_duplicates()
    return m


def warp(F: Array, T: np.ndarray, geom: BevGeometry) -> Array:
    """Resample a C x H x W feature into the frame described by ``T``.

    Each target cell center is mapped through ``T`` into source metric
    coordinates and bilinearly interpolated; samples off the grid are zero.
    """
    F = ad.as_array(F)
    if F.ndim != 3 or F.shape[1:] != (geom.H, geom.W):
        raise DimensionError(f"feature {F.shape} does not match grid {geom.H}x{geom.W}")
    T = np.asarray(T, dtype=np.float64)
    if np.array_equal(T, np.eye(3)):
        return F
    S = warp_matrix(geom, T)
    C = F.shape[0]
    flat = F.data.reshape(C, -1)
    out = (S @ flat.T).T.astype(F.dtype).reshape(F.shape)

    def bw(g):
        return ((S.T @ g.reshape(C, -1).T).T.astype(F.dtype).reshape(F.shape),)

    return ad.record_op(np.ascontiguousarray(out), (F,), bw)
