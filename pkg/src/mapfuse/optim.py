"""AdamW with decoupled weight decay and optional global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Array
from .errors import ContractError


@dataclass
class AdamWConfig:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float | None = 35.0

    def validate(self):
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ContractError("invalid AdamW hyperparameters")


class AdamW:
    def __init__(self, named_params: list[tuple[str, Array]], cfg: AdamWConfig = AdamWConfig(),
                 no_decay=lambda name: name.endswith(".b") or ".ln" in name or "dss." in name):
        cfg.validate()
        self.cfg = cfg
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.decay = [not no_decay(n) for n in self.names]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                                 for p in self.params if p.grad is not None)))

    def step(self, scale: float = 1.0) -> float:
        """Apply one update using ``scale * grad``; returns the pre-clip gradient norm."""
        cfg = self.cfg
        norm = self.grad_norm() * scale
        if cfg.grad_clip is not None and norm > cfg.grad_clip:
            scale *= cfg.grad_clip / norm
        self.t += 1
        bc1 = 1 - cfg.beta1 ** self.t
        bc2 = 1 - cfg.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            dt = p.data.dtype
            g = (p.grad * scale).astype(dt)
            self.m[i] = (cfg.beta1 * self.m[i] + (1 - cfg.beta1) * g).astype(dt)
            self.v[i] = (cfg.beta2 * self.v[i] + (1 - cfg.beta2) * g * g).astype(dt)
            if self.decay[i] and cfg.weight_decay:
                p.data = (p.data * (1 - cfg.lr * cfg.weight_decay)).astype(dt)
            upd = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + cfg.eps)
            p.data = (p.data - cfg.lr * upd).astype(dt)
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {"optim/t": np.array([self.t], dtype=np.float32)}
        for n, m, v in zip(self.names, self.m, self.v):
            out[f"optim/m/{n}"] = m
            out[f"optim/v/{n}"] = v
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(tensors["optim/t"][0])
        for i, n in enumerate(self.names):
            self.m[i] = tensors[f"optim/m/{n}"].astype(self.params[i].dtype)
            self.v[i] = tensors[f"optim/v/{n}"].astype(self.params[i].dtype)
