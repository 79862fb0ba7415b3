"""BEV-level temporal fusion: warp history, concat + conv + layernorm, directional gated SSM."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Array
from .errors import DimensionError
from .geometry import BevGeometry, Pose, relative_transform, warp
from .scans import DIRECTIONS, ScanDirection, grid_to_cells, scan_cells, unscan_cells
from .ssm import GssParams, gss_block, init_gss


@dataclass
class BevFusionParams:
    conv_w: Array  # C x (N+1)C x k x k
    conv_b: Array
    ln_gain: Array
    ln_bias: Array
    gss: dict[str, GssParams] = field(default_factory=dict)  # direction (or "shared") -> block
    directions: tuple[ScanDirection, ...] = DIRECTIONS

    @property
    def channels(self) -> int:
        return self.conv_w.shape[0]

    @property
    def history(self) -> int:
        return self.conv_w.shape[1] // self.channels - 1

    def block(self, direction: ScanDirection) -> GssParams:
        return self.gss.get("shared") or self.gss[ScanDirection(direction).value]

    def named(self, prefix: str = "") -> Iterator[tuple[str, Array]]:
        for key in ("conv_w", "conv_b", "ln_gain", "ln_bias"):
            yield prefix + key, getattr(self, key)
        for key in sorted(self.gss):
            yield from self.gss[key].named(f"{prefix}gss.{key}.")


def init_bev_fusion(rng: np.random.Generator, channels: int, history: int, *,
                    alpha: float = 0.5, beta: float = 4.0, state_size: int = 16,
                    directions: Sequence[ScanDirection] = DIRECTIONS, shared: bool = False,
                    kernel: int = 3, dtype=np.float64) -> BevFusionParams:
    cin = (history + 1) * channels
    fan_in = cin * kernel * kernel
    conv_w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(channels, cin, kernel, kernel))
    directions = tuple(ScanDirection(d) for d in directions)
    keys = ["shared"] if shared else [d.value for d in directions]
    return BevFusionParams(
        conv_w=ad.parameter(conv_w, dtype),
        conv_b=ad.parameter(np.zeros(channels), dtype),
        ln_gain=ad.parameter(np.ones(channels), dtype),
        ln_bias=ad.parameter(np.zeros(channels), dtype),
        gss={k: init_gss(rng, channels, alpha, beta, state_size, dtype) for k in keys},
        directions=directions,
    )


def align_history(window: Sequence[tuple[Array, Pose]], pose: Pose, geom: BevGeometry) -> list[Array]:
    """Warp each (feature, pose) of the window into the frame at ``pose``."""
    return [warp(F, relative_transform(p, pose), geom) for F, p in window]


def _pairwise_sum(items: list[Array]) -> Array:
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def fused_input(window: Sequence[Array], F_t: Array, p: BevFusionParams) -> Array:
    """Concat + conv + channel layernorm; returns the normalized cells, (H*W) x C."""
    shapes = {tuple(F.shape) for F in window} | {tuple(F_t.shape)}
    if len(shapes) != 1:
        raise DimensionError(f"BEV features disagree in shape: {sorted(shapes)}")
    if len(window) != p.history:
        raise DimensionError(f"fusion expects {p.history} history frames, got {len(window)}")
    Fc = ad.concat(list(window) + [F_t], axis=0) if window else F_t
    conv = ad.conv2d(Fc, p.conv_w, p.conv_b)
    return ad.layernorm(grid_to_cells(conv), p.ln_gain, p.ln_bias)


def fuse_bev(window: Sequence[Array], F_t: Array, p: BevFusionParams, mode: str = "scan") -> Array:
    """Refined C x H x W feature for the current frame from aligned history + F_t."""
    F_t = ad.as_array(F_t)
    _, h, w = F_t.shape
    cells = fused_input(window, F_t, p)
    outs = []
    for d in p.directions:
        seq = scan_cells(cells, h, w, d)
        outs.append(unscan_cells(gss_block(seq, p.block(d), mode), h, w, d))
    mean = _pairwise_sum(outs) * (1.0 / len(outs))
    return ad.transpose(mean.reshape(h, w, -1), (2, 0, 1))
