"""Frame-by-frame training with per-scenario memory banks and detached history."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import NumericError
from .loss import LossWeights, total_loss
from .memory import MemoryBank
from .model import MapNet
from .optim import AdamW, AdamWConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 1        # scenarios advanced in lockstep per update
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    optim: AdamWConfig = field(default_factory=AdamWConfig)


@dataclass
class EpochStats:
    epoch: int
    loss_total: float
    loss_pts: float
    loss_cls: float
    frames: int


def scenario_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_epoch(model: MapNet, scenarios: Sequence, opt: AdamW, cfg: TrainConfig, epoch: int) -> EpochStats:
    order = scenario_order(len(scenarios), cfg.seed, epoch)
    sums = np.zeros(3)
    frames = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = [scenarios[i] for i in order[start:start + cfg.batch_size]]
        banks = [MemoryBank(model.cfg.N) for _ in batch]
        T = max(len(sc.frames) for sc in batch)
        for t in range(T):
            opt.zero_grad()
            active = [(sc, bank) for sc, bank in zip(batch, banks) if t < len(sc.frames)]
            for sc, bank in active:
                fr = sc.frames[t]
                with ad.Tape() as tape:
                    where = f"at epoch {epoch}, scenario seed {sc.seed}, frame {t}"
                    try:
                        out_o, out_f = model.step(bank, fr.raster, fr.pose)
                    except NumericError as exc:
                        raise NumericError(f"{exc} {where}") from exc
                    for out in (out_o, out_f):
                        if not (np.all(np.isfinite(out.logits.data)) and np.all(np.isfinite(out.points.data))):
                            raise NumericError(f"non-finite model output {where}")
                    rep = total_loss(out_o, out_f, fr.gt, cfg.weights)
                    value = float(rep.total.data)
                    if not math.isfinite(value):
                        raise NumericError(f"non-finite loss {value} {where}")
                    ad.backward(tape, rep.total)
                sums += (value, rep.pts, rep.cls)
                frames += 1
            opt.step(scale=1.0 / len(active))
    mean = sums / max(frames, 1)
    return EpochStats(epoch, float(mean[0]), float(mean[1]), float(mean[2]), frames)


def train(model: MapNet, scenarios: Sequence, cfg: TrainConfig, opt: AdamW | None = None,
          start_epoch: int = 0, on_epoch: Callable[[EpochStats, AdamW], None] | None = None) -> list[EpochStats]:
    opt = opt or AdamW(list(model.named_parameters()), cfg.optim)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        stats = train_epoch(model, scenarios, opt, cfg, epoch)
        log.info("epoch %d loss %.4f (pts %.4f cls %.4f)", epoch + 1, stats.loss_total,
                 stats.loss_pts, stats.loss_cls)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats, opt)
    return history
