"""Set-prediction objective: Hungarian-matched polyline SmoothL1 plus sigmoid focal classification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .assignment import Assignment, solve
from .autodiff import Array
from .errors import ContractError


@dataclass(frozen=True)
class LossWeights:
    lambda_pts: float = 5.0
    lambda_cls: float = 50.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    delta: float = 1.0

    def __post_init__(self):
        if self.lambda_pts <= 0 or self.lambda_cls <= 0:
            raise ContractError("loss weights must be positive")
        if self.delta <= 0:
            raise ContractError("SmoothL1 transition must be positive")

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.lambda_pts * c, self.lambda_cls * c, self.focal_alpha,
                           self.focal_gamma, self.delta)


def smooth_l1_np(x: np.ndarray, delta: float) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < delta, 0.5 * x * x / delta, ax - 0.5 * delta)


def polyline_cost(pred: np.ndarray, gt: np.ndarray, delta: float = 1.0) -> float:
    """Mean SmoothL1 over all coordinates, minimized over the two orderings of ``gt``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"point sets differ in shape: {pred.shape} vs {gt.shape}")
    fwd = smooth_l1_np(pred - gt, delta).mean()
    rev = smooth_l1_np(pred - gt[::-1], delta).mean()
    return float(min(fwd, rev))


def polyline_cost_matrix(pred: np.ndarray, gts: np.ndarray, delta: float = 1.0) -> np.ndarray:
    """Pairwise cost between N_q predictions and G ground truths, both (.., P, 2)."""
    d = pred[:, None] - gts[None]
    fwd = smooth_l1_np(d, delta).mean(axis=(2, 3))
    d = pred[:, None] - gts[None, :, ::-1]
    rev = smooth_l1_np(d, delta).mean(axis=(2, 3))
    return np.minimum(fwd, rev)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def class_targets(n_q: int, n_classes: int, matched: dict[int, int]) -> np.ndarray:
    """One-hot targets over K+1 logits; unmatched rows hit the trailing no-object logit."""
    T = np.zeros((n_q, n_classes + 1))
    T[:, n_classes] = 1.0
    for q, c in matched.items():
        T[q, n_classes] = 0.0
        T[q, c] = 1.0
    return T


def focal_terms(logits: Array, targets: np.ndarray, alpha: float, gamma: float) -> Array:
    """Elementwise sigmoid focal loss, computed through softplus for stability."""
    logits = ad.as_array(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    sp_pos = ad.softplus(-logits)    # -log p
    sp_neg = ad.softplus(logits)     # -log (1 - p)
    pos = sp_pos * (alpha * t)
    neg = sp_neg * ((1.0 - alpha) * (1.0 - t))
    if gamma:
        pos = pos * ad.exp(sp_neg * (-gamma))   # (1 - p)^gamma
        neg = neg * ad.exp(sp_pos * (-gamma))   # p^gamma
    return pos + neg


def focal_cls(logits, target: int, alpha: float = 0.25, gamma: float = 2.0) -> Array:
    """Focal loss of a single (K+1)-logit row; ``target == K`` means background."""
    logits = ad.as_array(logits)
    k = logits.shape[-1] - 1
    if not 0 <= target <= k:
        raise ContractError(f"target {target} outside 0..{k}")
    t = np.zeros(k + 1)
    t[target] = 1.0
    return ad.sum_(focal_terms(logits, t, alpha, gamma))


@dataclass
class Matching:
    assignment: Assignment          # rows are ground truths, cols are predictions
    pred_index: np.ndarray          # prediction matched to each ground truth
    cost: np.ndarray

    @property
    def gt_to_pred(self) -> dict[int, int]:
        return {g: int(q) for g, q in enumerate(self.pred_index)}


def matching_cost(logits: np.ndarray, points: np.ndarray, gts: Sequence[tuple[int, np.ndarray]],
                  w: LossWeights) -> np.ndarray:
    """G x N_q cost: lambda_pts * polyline cost + lambda_cls * (1 - p_target)."""
    if not gts:
        return np.zeros((0, points.shape[0]))
    gt_pts = np.stack([np.asarray(p, dtype=np.float64) for _, p in gts])
    cls = np.array([c for c, _ in gts])
    probs = _sigmoid(np.asarray(logits, dtype=np.float64))
    pts_cost = polyline_cost_matrix(np.asarray(points, dtype=np.float64), gt_pts, w.delta).T
    return w.lambda_pts * pts_cost + w.lambda_cls * (1.0 - probs[:, cls].T)


def match_gt(logits: np.ndarray, points: np.ndarray, gts: Sequence[tuple[int, np.ndarray]],
             w: LossWeights = LossWeights()) -> Matching:
    n_q = points.shape[0]
    if len(gts) > n_q:
        raise ContractError(f"{len(gts)} ground truths exceed {n_q} queries")
    cost = matching_cost(logits, points, gts, w)
    if not gts:
        return Matching(Assignment(np.zeros(0, dtype=np.int64), 0.0), np.zeros(0, dtype=np.int64), cost)
    a = solve(cost)
    return Matching(a, a.cols.copy(), cost)


@dataclass
class MapLoss:
    total: Array
    pts: float
    cls: float


def map_loss(logits: Array, points: Array, gts: Sequence[tuple[int, np.ndarray]],
             w: LossWeights = LossWeights()) -> MapLoss:
    """lambda_pts * L_pts + lambda_cls * L_cls for one query set, normalized by max(G, 1)."""
    logits = ad.as_array(logits)
    points = ad.as_array(points)
    n_q, n_cls = logits.shape[0], logits.shape[1] - 1
    m = match_gt(logits.data, points.data, gts, w)
    norm = 1.0 / max(len(gts), 1)
    T = class_targets(n_q, n_cls, {int(q): gts[g][0] for g, q in enumerate(m.pred_index)})
    l_cls = ad.sum_(focal_terms(logits, T, w.focal_alpha, w.focal_gamma)) * norm
    if gts:
        idx = m.pred_index
        sel = ad.take_rows(points, idx)
        gt = np.stack([np.asarray(gts[g][1], dtype=points.dtype) for g in range(len(gts))])
        fwd = ad.mean(ad.smooth_l1(sel - gt, w.delta), axis=(1, 2))
        rev = ad.mean(ad.smooth_l1(sel - gt[:, ::-1], w.delta), axis=(1, 2))
        l_pts = ad.sum_(ad.minimum(fwd, rev)) * norm
    else:
        l_pts = ad.as_array(np.zeros((), dtype=points.dtype))
    total = l_pts * w.lambda_pts + l_cls * w.lambda_cls
    return MapLoss(total, float(l_pts.data), float(l_cls.data))


@dataclass
class LossReport:
    total: Array
    pts: float
    cls: float


def total_loss(out_orig, out_fused, gts, w: LossWeights = LossWeights()) -> LossReport:
    """Sum of the map loss on the pre-fusion and post-fusion heads."""
    a = map_loss(out_orig.logits, out_orig.points, gts, w)
    b = map_loss(out_fused.logits, out_fused.points, gts, w)
    return LossReport(a.total + b.total, a.pts + b.pts, a.cls + b.cls)
