"""Chamfer-distance average precision over vectorized map predictions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .loss import LossWeights, total_loss
from .memory import MemoryBank
from .synthworld import CLASS_NAMES, resample_polyline


@dataclass
class EvalConfig:
    thresholds: tuple[float, ...] = (0.5, 1.0, 1.5)
    score_threshold: float = 0.0
    classes: tuple[bool, bool, bool] = (True, True, True)
    dense_points: int = 100   # polylines are re-interpolated to this many points before Chamfer

    def validate(self) -> None:
        t = np.asarray(self.thresholds, dtype=float)
        if t.size == 0 or np.any(t <= 0) or np.any(np.diff(t) <= 0):
            raise ContractError("thresholds must be positive and strictly increasing")
        if not any(self.classes):
            raise ContractError("at least one class must be evaluated")
        if self.dense_points < 0 or self.dense_points == 1:
            raise ContractError("dense_points must be 0 (off) or >= 2")


def chamfer(a, b) -> float:
    """Average of the two directed mean nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("chamfer needs two non-empty point sets")
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def _chamfer_matrix(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise Chamfer between stacks of point sets: (M, P, 2) x (G, Q, 2) -> M x G."""
    d = np.linalg.norm(preds[:, None, :, None] - gts[None, :, None, :], axis=-1)
    return 0.5 * (d.min(axis=3).mean(axis=2) + d.min(axis=2).mean(axis=2))


def _densify(pts: np.ndarray, n: int) -> np.ndarray:
    return resample_polyline(pts, n) if n else np.asarray(pts, dtype=np.float64)


@dataclass
class Detection:
    frame: int
    cls: int
    score: float
    points: np.ndarray


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """11-point interpolated area under the precision-recall curve."""
    if n_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        ok = recall >= r - 1e-12
        ap += precision[ok].max() if ok.any() else 0.0
    return ap / 11.0


def average_precision(dets: Sequence[Detection], gts: dict[int, list[np.ndarray]],
                      threshold: float, dense: int = 100) -> float:
    """AP of one class. ``gts`` maps frame index to that frame's ground-truth polylines."""
    n_gt = sum(len(v) for v in gts.values())
    if not dets or n_gt == 0:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    dense_gt = {f: np.stack([_densify(g, dense) for g in v]) for f, v in gts.items() if v}
    cost = {}
    by_frame: dict[int, list[int]] = {}
    for i, d in enumerate(dets):
        by_frame.setdefault(d.frame, []).append(i)
    for f, idx in by_frame.items():
        if f in dense_gt:
            P = np.stack([_densify(dets[i].points, dense) for i in idx])
            m = _chamfer_matrix(P, dense_gt[f])
            for row, i in enumerate(idx):
                cost[i] = m[row]
    used = {f: np.zeros(len(v), dtype=bool) for f, v in dense_gt.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        f = dets[i].frame
        if i not in cost:
            continue
        c = np.where(used[f], np.inf, cost[i])
        j = int(np.argmin(c))
        if c[j] < threshold:
            used[f][j] = True
            tp[rank] = 1.0
    return interpolated_ap(tp, n_gt)


@dataclass
class EvalResult:
    ap: dict[str, float]                         # class name -> AP averaged over thresholds
    ap_by_threshold: dict[str, list[float]]
    mAP: float
    loss_pts: float = 0.0
    loss_cls: float = 0.0
    loss_total: float = 0.0
    frames: int = 0
    extra: dict = field(default_factory=dict)

    def row(self, tag: str, split: str) -> list[str]:
        vals = [self.ap.get(n, float("nan")) for n in CLASS_NAMES]
        vals += [self.mAP, self.loss_pts, self.loss_cls, self.loss_total]
        return [tag, split] + [f"{v:.4f}" for v in vals]


METRICS_HEADER = ["tag", "split", "AP_ped", "AP_div", "AP_bou", "mAP", "loss_pts", "loss_cls", "loss_total"]


def score_detections(dets: Sequence[Detection], gt_frames: Sequence[Sequence[tuple[int, np.ndarray]]],
                     cfg: EvalConfig = EvalConfig(), n_classes: int = 3) -> EvalResult:
    cfg.validate()
    ap, by_thr = {}, {}
    for c in range(n_classes):
        if not cfg.classes[c]:
            continue
        cls_dets = [d for d in dets if d.cls == c and d.score >= cfg.score_threshold]
        cls_gts = {f: [p for k, p in frame if k == c] for f, frame in enumerate(gt_frames)}
        vals = [average_precision(cls_dets, cls_gts, t, cfg.dense_points) for t in cfg.thresholds]
        by_thr[CLASS_NAMES[c]] = vals
        ap[CLASS_NAMES[c]] = float(np.mean(vals))
    return EvalResult(ap, by_thr, float(np.mean(list(ap.values()))))


def detections_from_output(logits: np.ndarray, points: np.ndarray, frame: int) -> list[Detection]:
    """Every (query, class) pair becomes a scored candidate; the no-object logit is ignored."""
    k = logits.shape[1] - 1
    probs = 1.0 / (1.0 + np.exp(-np.asarray(logits[:, :k], dtype=np.float64)))
    pts = np.asarray(points, dtype=np.float64)
    return [Detection(frame, c, float(probs[q, c]), pts[q]) for q in range(len(pts)) for c in range(k)]


def evaluate(model, scenarios, cfg: EvalConfig = EvalConfig(), weights: LossWeights = LossWeights(),
             mode: str | None = None) -> EvalResult:
    """Run the model over every scenario (bank reset per scenario) and score the fused outputs."""
    mc = model.cfg
    saved_mode = mc.ssm_mode
    if mode is not None:
        mc.ssm_mode = mode
    dets: list[Detection] = []
    gt_frames = []
    sums = np.zeros(3)
    try:
        with ad.no_grad():
            for sc in scenarios:
                for fr in sc.frames:
                    if fr.raster.shape != (mc.c_obs, mc.H, mc.W):
                        raise ContractError(f"dataset raster {fr.raster.shape} does not match model "
                                            f"geometry {(mc.c_obs, mc.H, mc.W)}")
                bank = MemoryBank(mc.N)
                for fr in sc.frames:
                    out_o, out_f = model.step(bank, fr.raster, fr.pose)
                    rep = total_loss(out_o, out_f, fr.gt, weights)
                    sums += (rep.pts, rep.cls, float(rep.total.data))
                    dets += detections_from_output(out_f.logits.data, out_f.points.data, len(gt_frames))
                    gt_frames.append(fr.gt)
    finally:
        mc.ssm_mode = saved_mode
    res = score_detections(dets, gt_frames, cfg, mc.K)
    n = max(len(gt_frames), 1)
    res.loss_pts, res.loss_cls, res.loss_total = (sums / n).tolist()
    res.frames = len(gt_frames)
    return res
