"""Bijective sequence layouts for BEV grids and multi-frame query sets."""

from __future__ import annotations

from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Array
from .errors import DimensionError


class ScanDirection(str, Enum):
    RIGHT = "right"
    LEFT = "left"
    DOWN = "down"
    UP = "up"


DIRECTIONS = (ScanDirection.RIGHT, ScanDirection.LEFT, ScanDirection.DOWN, ScanDirection.UP)

# Subsets used by the scanning ablation.
DIRECTION_SETS = {
    "single": (ScanDirection.RIGHT,),
    "horizontal": (ScanDirection.RIGHT, ScanDirection.LEFT),
    "vertical": (ScanDirection.DOWN, ScanDirection.UP),
    "multi": DIRECTIONS,
}


class InstanceLayout(str, Enum):
    INSTANCE_FIRST = "instance_first"
    TEMPORAL_FIRST = "temporal_first"


@lru_cache(maxsize=64)
def scan_order(h: int, w: int, direction: ScanDirection) -> np.ndarray:
    """Row-major cell indices visited by a scan, in visiting order."""
    direction = ScanDirection(direction)
    grid = np.arange(h * w).reshape(h, w)
    if direction is ScanDirection.RIGHT:
        order = grid.ravel()
    elif direction is ScanDirection.LEFT:
        order = grid.ravel()[::-1]
    elif direction is ScanDirection.DOWN:
        order = grid.T.ravel()
    else:
        order = grid.T.ravel()[::-1]
    order = np.ascontiguousarray(order)
    order.setflags(write=False)
    return order


@lru_cache(maxsize=64)
def _inverse_order(h: int, w: int, direction: ScanDirection) -> np.ndarray:
    order = scan_order(h, w, direction)
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    inv.setflags(write=False)
    return inv


def grid_to_cells(F: Array) -> Array:
    """C x H x W -> (H*W) x C in row-major cell order."""
    c, h, w = F.shape
    return ad.transpose(F, (1, 2, 0)).reshape(h * w, c)


def cells_to_grid(S: Array, h: int, w: int) -> Array:
    return ad.transpose(S.reshape(h, w, S.shape[1]), (2, 0, 1))


def scan_bev(F: Array, direction: ScanDirection) -> Array:
    """Flatten a C x H x W grid into an (H*W) x C sequence along ``direction``."""
    F = ad.as_array(F)
    if F.ndim != 3:
        raise DimensionError(f"scan_bev expects C x H x W, got {F.shape}")
    _, h, w = F.shape
    return ad.take_rows(grid_to_cells(F), scan_order(h, w, ScanDirection(direction)))


def scan_cells(cells: Array, h: int, w: int, direction: ScanDirection) -> Array:
    """Reorder row-major (H*W) x C cells into scan order."""
    return ad.take_rows(cells, scan_order(h, w, ScanDirection(direction)))


def unscan_cells(S: Array, h: int, w: int, direction: ScanDirection) -> Array:
    if S.shape[0] != h * w:
        raise DimensionError(f"sequence length {S.shape[0]} != H*W = {h * w}")
    return ad.take_rows(S, _inverse_order(h, w, ScanDirection(direction)))


def unscan_bev(S: Array, direction: ScanDirection, h: int, w: int) -> Array:
    """Exact inverse of :func:`scan_bev`; returns C x H x W."""
    S = ad.as_array(S)
    return cells_to_grid(unscan_cells(S, h, w, direction), h, w)


def instance_order(frames: int, n_q: int, layout: InstanceLayout) -> np.ndarray:
    """Index into the frame-major stack (frames * n_q rows) for each sequence slot."""
    layout = InstanceLayout(layout)
    idx = np.arange(frames * n_q)
    if layout is InstanceLayout.INSTANCE_FIRST:
        return idx
    return idx.reshape(frames, n_q).T.ravel()


def build_instance_sequence(window: Sequence[Array], layout: InstanceLayout) -> Array:
    """Arrange query sets (oldest first, current last) into one sequence."""
    if not window:
        raise DimensionError("instance window is empty")
    shapes = {tuple(q.shape) for q in window}
    if len(shapes) != 1:
        raise DimensionError(f"ragged instance window: {sorted(shapes)}")
    n_q = window[0].shape[0]
    stacked = ad.concat(list(window), axis=0) if len(window) > 1 else ad.as_array(window[0])
    return ad.take_rows(stacked, instance_order(len(window), n_q, layout))


def current_positions(frames: int, n_q: int, layout: InstanceLayout) -> np.ndarray:
    """Sequence positions holding the current (last) frame's queries, in query order."""
    layout = InstanceLayout(layout)
    m = np.arange(n_q)
    if layout is InstanceLayout.INSTANCE_FIRST:
        return (frames - 1) * n_q + m
    return m * frames + (frames - 1)


def split_current(seq: Array, frames: int, n_q: int, layout: InstanceLayout) -> Array:
    return ad.take_rows(seq, current_positions(frames, n_q, layout))
