"""Bounded FIFO memory of refined BEV features and refined instance queries."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array
from .errors import ContractError
from .geometry import Pose


@dataclass
class QuerySet:
    """N_q x D queries, optionally with class logits and ego-frame points from the heads."""

    queries: Array
    logits: np.ndarray | None = None
    points: np.ndarray | None = None

    @property
    def n_q(self) -> int:
        return self.queries.shape[0]


@dataclass
class BevEntry:
    feature: Array
    pose: Pose
    timestamp: float


@dataclass
class InstanceEntry:
    queries: QuerySet
    pose: Pose
    timestamp: float


class MemoryBank:
    """Holds at most ``capacity`` past frames; everything stored is detached."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ContractError("memory capacity must be non-negative")
        self.capacity = capacity
        self.bev: deque[BevEntry] = deque()
        self.ins: deque[InstanceEntry] = deque()
        self._clock = 0

    def __len__(self) -> int:
        return len(self.bev)

    def reset(self) -> None:
        self.bev.clear()
        self.ins.clear()
        self._clock = 0

    def push(self, feature: Array, queries: QuerySet, pose: Pose,
             timestamp: float | None = None) -> None:
        if timestamp is None:
            timestamp = float(self._clock)
        if self.bev and timestamp <= self.bev[-1].timestamp:
            raise ContractError("memory entries must arrive with increasing timestamps")
        self._clock = int(np.floor(timestamp)) + 1
        if self.capacity == 0:
            return
        stored = QuerySet(ad.detach(queries.queries),
                          None if queries.logits is None else np.array(queries.logits),
                          None if queries.points is None else np.array(queries.points))
        self.bev.append(BevEntry(ad.detach(feature), pose, timestamp))
        self.ins.append(InstanceEntry(stored, pose, timestamp))
        while len(self.bev) > self.capacity:
            self.bev.popleft()
            self.ins.popleft()

    def window_bev(self, current: Array, pose: Pose) -> list[tuple[Array, Pose]]:
        """Exactly ``capacity`` entries, oldest first; missing slots replicate ``current``."""
        pad = [(current, pose)] * (self.capacity - len(self.bev))
        return pad + [(e.feature, e.pose) for e in self.bev]

    def window_ins(self, current: QuerySet, pose: Pose) -> list[tuple[QuerySet, Pose]]:
        pad = [(current, pose)] * (self.capacity - len(self.ins))
        return pad + [(e.queries, e.pose) for e in self.ins]
