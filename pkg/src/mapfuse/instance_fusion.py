"""Instance-level temporal fusion over Hungarian-aligned query histories."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .assignment import solve
from .autodiff import Array
from .errors import ContractError, DimensionError
from .scans import InstanceLayout, build_instance_sequence, split_current
from .ssm import GssParams, gss_block, init_gss

MATCH_COSTS = ("l2", "cosine", "chamfer")

LAYOUT_SETS = {
    "spatial": (InstanceLayout.INSTANCE_FIRST,),
    "temporal": (InstanceLayout.TEMPORAL_FIRST,),
    "spatial-temporal": (InstanceLayout.INSTANCE_FIRST, InstanceLayout.TEMPORAL_FIRST),
}


def match_cost(hist: np.ndarray, curr: np.ndarray) -> np.ndarray:
    """Squared L2 distance between every historical row n and current row m."""
    hist = np.asarray(hist, dtype=np.float64)
    curr = np.asarray(curr, dtype=np.float64)
    if hist.shape != curr.shape:
        raise DimensionError(f"query sets differ in shape: {hist.shape} vs {curr.shape}")
    diff = hist[:, None, :] - curr[None, :, :]
    return np.einsum("nmd,nmd->nm", diff, diff)


def cosine_cost(hist: np.ndarray, curr: np.ndarray) -> np.ndarray:
    """Negated cosine similarity, so that smaller is better."""
    hist = np.asarray(hist, dtype=np.float64)
    curr = np.asarray(curr, dtype=np.float64)
    if hist.shape != curr.shape:
        raise DimensionError(f"query sets differ in shape: {hist.shape} vs {curr.shape}")
    hn = hist / np.maximum(np.linalg.norm(hist, axis=1, keepdims=True), 1e-12)
    cn = curr / np.maximum(np.linalg.norm(curr, axis=1, keepdims=True), 1e-12)
    return -(hn @ cn.T)


def chamfer_cost(hist_pts: np.ndarray, curr_pts: np.ndarray) -> np.ndarray:
    """Symmetric Chamfer distance between every pair of regressed point sets (N x P x 2)."""
    a = np.asarray(hist_pts, dtype=np.float64)
    b = np.asarray(curr_pts, dtype=np.float64)
    d = np.linalg.norm(a[:, None, :, None, :] - b[None, :, None, :, :], axis=-1)  # n m p q
    return 0.5 * (d.min(axis=3).mean(axis=2) + d.min(axis=2).mean(axis=2))


def permutation_to_current(cost: np.ndarray) -> np.ndarray:
    """Row order that puts the historical query matched to current query m at row m."""
    assignment = solve(cost)
    return assignment.inverse(cost.shape[1])


def align_queries(window: Sequence[np.ndarray], curr: np.ndarray, cost_fn=match_cost) -> list[np.ndarray]:
    """Permutation (per historical frame) aligning its rows to ``curr``'s rows."""
    return [permutation_to_current(cost_fn(h, curr)) for h in window]


@dataclass
class InstanceFusionParams:
    gss: dict[str, GssParams] = field(default_factory=dict)  # layout -> block

    @property
    def layouts(self) -> tuple[InstanceLayout, ...]:
        return tuple(InstanceLayout(k) for k in self.gss)

    def named(self, prefix: str = "") -> Iterator[tuple[str, Array]]:
        for key in sorted(self.gss):
            yield from self.gss[key].named(f"{prefix}gss.{key}.")


def init_instance_fusion(rng: np.random.Generator, width: int, *, alpha: float = 0.5,
                         beta: float = 4.0, state_size: int = 16,
                         layouts: Sequence[InstanceLayout] = LAYOUT_SETS["spatial-temporal"],
                         dtype=np.float64) -> InstanceFusionParams:
    return InstanceFusionParams(
        gss={InstanceLayout(l).value: init_gss(rng, width, alpha, beta, state_size, dtype)
             for l in layouts})


def fuse_instances(window: Sequence[Array], Q_t: Array, p: InstanceFusionParams,
                   mode: str = "scan") -> Array:
    """Fused current queries from an aligned history (oldest first) plus ``Q_t``."""
    if not p.gss:
        raise ContractError("instance fusion needs at least one layout")
    frames = list(window) + [Q_t]
    n_q = Q_t.shape[0]
    parts = []
    for layout in p.layouts:
        seq = build_instance_sequence(frames, layout)
        out = gss_block(seq, p.gss[layout.value], mode)
        parts.append(split_current(out, len(frames), n_q, layout))
    if len(parts) == 1:
        return parts[0]
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total * (1.0 / len(parts))
