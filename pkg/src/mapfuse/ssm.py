"""Diagonal state space layer and the gated state space block.

Each of the ``H`` channels is an independent single-input single-output
system with ``n`` complex diagonal states::

    x_k = A * x_{k-1} + B * u_k,     y_k = Re(sum_j w_j x_{k,j}) + d * u_k

with ``A = exp(dt * lam)``, ``B = (exp(dt * lam) - 1) / lam`` and
``lam = -exp(r) + i * lam_im``. The output can be evaluated three ways:
a sequential recurrence, a log-depth parallel scan, or by materializing the
convolution kernel. All three agree to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Array
from .errors import ContractError, DimensionError

MODES = ("recurrence", "scan", "kernel")


# ---------------------------------------------------------------- scan kernels

def parallel_linear_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve x_k = a_k x_{k-1} + b_k (x_0 = 0) along axis 0 in O(log L) depth.

    Work-efficient up-sweep / down-sweep over the associative combine
    (a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2). Trailing axes are independent.
    If ``a`` has a leading extent of 1 it is treated as time-invariant and the
    combined coefficient of a block of length d is simply a**d.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    n = b.shape[0]
    if n == 0:
        raise ContractError("parallel_linear_scan needs at least one element")
    invariant = a.ndim == b.ndim and a.shape[0] == 1 and n > 1
    if not invariant:
        a, b = np.broadcast_arrays(a, b)
    top = 1 << max(n - 1, 1).bit_length()
    dtype = np.result_type(a.dtype, b.dtype)
    B = np.array(b, dtype=dtype)
    if invariant:
        return _invariant_scan(a[0].astype(dtype), B, n, top)
    A = np.array(a, dtype=dtype)

    # up-sweep: position 2d-1 + 2dk accumulates the block of length 2d ending there
    d = 1
    while d < n:
        lo = slice(d - 1, n - d, 2 * d)
        hi = slice(2 * d - 1, n, 2 * d)
        Ahi = A[hi]
        B[hi] = Ahi * B[lo] + B[hi]
        A[hi] = Ahi * A[lo]
        d *= 2

    # down-sweep: fill in the prefixes that end inside a block
    d = top // 4
    while d >= 1:
        src = slice(2 * d - 1, n - d, 2 * d)
        dst = slice(3 * d - 1, n, 2 * d)
        B[dst] = A[dst] * B[src] + B[dst]
        d //= 2
    return B


def _invariant_scan(a: np.ndarray, B: np.ndarray, n: int, top: int) -> np.ndarray:
    """Same sweeps when every a_k equals ``a``: block coefficients are powers a**(2**j)."""
    powers = [a]
    d = 1
    while d < n:
        lo = slice(d - 1, n - d, 2 * d)
        hi = slice(2 * d - 1, n, 2 * d)
        B[hi] += powers[-1] * B[lo]
        powers.append(powers[-1] * powers[-1])
        d *= 2
    d = top // 4
    while d >= 1:
        src = slice(2 * d - 1, n - d, 2 * d)
        dst = slice(3 * d - 1, n, 2 * d)
        B[dst] += powers[d.bit_length() - 1] * B[src]
        d //= 2
    return B


def sequential_linear_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Left fold of the same recurrence; the reference the scan is checked against."""
    a, b = np.broadcast_arrays(np.asarray(a), np.asarray(b))
    if a.shape[0] == 0:
        raise ContractError("sequential_linear_scan needs at least one element")
    out = np.empty(b.shape, dtype=np.result_type(a.dtype, b.dtype))
    x = np.zeros(b.shape[1:], dtype=out.dtype)
    for k in range(b.shape[0]):
        x = a[k] * x + b[k]
        out[k] = x
    return out


def _causal_conv(kernel: np.ndarray, u: np.ndarray) -> np.ndarray:
    """y_k = sum_{l<=k} kernel_l u_{k-l}, per channel (axis 1), via FFT."""
    L = u.shape[0]
    nfft = 1 << (2 * L - 1).bit_length()
    ku = np.fft.rfft(kernel, n=nfft, axis=0) * np.fft.rfft(u, n=nfft, axis=0)
    return np.fft.irfft(ku, n=nfft, axis=0)[:L]


def dss_kernel(A: np.ndarray, B: np.ndarray, W: np.ndarray, L: int) -> np.ndarray:
    """K_l = Re(sum_j w_j B_j A_j^l) for l in [0, L); shape L x H."""
    logA = np.log(A)
    ls = np.arange(L, dtype=logA.real.dtype)
    powers = np.exp(ls[:, None, None] * logA[None])
    return np.einsum("lhn,hn->lh", powers, W * B).real


# ---------------------------------------------------------------- parameters

@dataclass
class DssParams:
    """Per-channel DSS parameters; complex values are paired (..., 2) arrays."""

    log_neg_re: Array  # H x n, Re(lam) = -exp(.)
    lam_im: Array      # H x n
    log_dt: Array      # H
    w: Array           # H x n x 2
    d_skip: Array      # H

    @property
    def channels(self) -> int:
        return self.log_dt.shape[0]

    @property
    def state_size(self) -> int:
        return self.lam_im.shape[1]

    def named(self, prefix: str = "") -> Iterator[tuple[str, Array]]:
        for key in ("log_neg_re", "lam_im", "log_dt", "w", "d_skip"):
            yield prefix + key, getattr(self, key)


def init_dss(rng: np.random.Generator, channels: int, state_size: int = 16,
             dtype=np.float64) -> DssParams:
    n = state_size
    re = np.log(rng.uniform(0.5, 1.5, size=(channels, n)))
    im = np.tile(np.pi * np.arange(n), (channels, 1))
    log_dt = rng.uniform(np.log(1e-3), np.log(1e-1), size=channels)
    w = rng.normal(0.0, np.sqrt(1.0 / n), size=(channels, n, 2))
    return DssParams(
        log_neg_re=ad.parameter(re, dtype),
        lam_im=ad.parameter(im, dtype),
        log_dt=ad.parameter(log_dt, dtype),
        w=ad.parameter(w, dtype),
        d_skip=ad.parameter(np.ones(channels), dtype),
    )


def discretize(p: DssParams) -> tuple[Array, Array, Array]:
    """Return (lam, A, B) as paired complex arrays of shape H x n x 2."""
    lam = ad.stack([-ad.exp(p.log_neg_re), p.lam_im], axis=-1)
    dt = ad.exp(p.log_dt).reshape(-1, 1, 1)
    A = ad.cexp(lam * dt)
    one = np.zeros(A.shape, dtype=A.dtype)
    one[..., 0] = 1.0
    B = ad.cdiv(A - one, lam)
    return lam, A, B


# ---------------------------------------------------------------- DSS layer

def _ctype(dtype) -> type:
    return np.complex64 if np.dtype(dtype) == np.float32 else np.complex128


def _states(A: np.ndarray, b: np.ndarray, mode: str) -> np.ndarray:
    if mode == "recurrence":
        return sequential_linear_scan(A[None], b)
    return parallel_linear_scan(A[None], b)


def dss_apply(u: Array, A: Array, B: Array, w: Array, d_skip: Array, mode: str = "scan") -> Array:
    """Run the discretized system over ``u`` (L x H); differentiable in every input."""
    if mode not in MODES:
        raise ContractError(f"unknown DSS mode {mode!r}; expected one of {MODES}")
    if u.ndim != 2:
        raise DimensionError(f"dss input must be L x H, got {u.shape}")
    L, H = u.shape
    if L == 0:
        raise ContractError("dss_forward needs a non-empty sequence")
    if A.shape[0] != H:
        raise DimensionError(f"dss has {A.shape[0]} channels, input has {H}")
    ct = _ctype(u.dtype)
    Az = ad.to_complex(A.data).astype(ct)
    Bz = ad.to_complex(B.data).astype(ct)
    Wz = ad.to_complex(w.data).astype(ct)
    ud = u.data
    d = d_skip.data

    if mode == "kernel":
        K = dss_kernel(Az, Bz, Wz, L).astype(ud.dtype)
        y = _causal_conv(K, ud).astype(ud.dtype) + d * ud
        x_cache = None
    else:
        x_cache = _states(Az, Bz[None] * ud[:, :, None], mode)
        y = np.einsum("lhn,hn->lh", x_cache, Wz).real.astype(ud.dtype) + d * ud

    def bw(g):
        x = x_cache
        if x is None:
            x = _states(Az, Bz[None] * ud[:, :, None], "scan")
        gx = g[:, :, None] * np.conj(Wz)[None]
        rev_mode = "recurrence" if mode == "recurrence" else "scan"
        Hadj = _states(np.conj(Az), gx[::-1], rev_mode)[::-1]
        gW = np.einsum("lh,lhn->hn", g, np.conj(x))
        gB = np.einsum("lhn,lh->hn", Hadj, ud)
        gA = np.einsum("lhn,lhn->hn", Hadj[1:], np.conj(x[:-1]))
        gu = g * d + np.einsum("lhn,hn->lh", Hadj, np.conj(Bz)).real
        gd = (g * ud).sum(axis=0)
        dt = ud.dtype
        return (gu.astype(dt), ad.from_complex(gA, dt), ad.from_complex(gB, dt),
                ad.from_complex(gW, dt), gd.astype(dt))

    return ad.record_op(y, (u, A, B, w, d_skip), bw)


def dss_forward(u: Array, p: DssParams, mode: str = "scan") -> Array:
    _, A, B = discretize(p)
    return dss_apply(u, A, B, p.w, p.d_skip, mode)


# ---------------------------------------------------------------- gated block

@dataclass
class GssParams:
    W_v: Array  # C x beta*C
    W_u: Array  # C x alpha*C
    W_y: Array  # alpha*C x beta*C
    W_o: Array  # beta*C x C
    dss: DssParams

    @property
    def width(self) -> int:
        return self.W_v.shape[0]

    def named(self, prefix: str = "") -> Iterator[tuple[str, Array]]:
        for key in ("W_v", "W_u", "W_y", "W_o"):
            yield prefix + key, getattr(self, key)
        yield from self.dss.named(prefix + "dss.")


def expanded_widths(width: int, alpha: float, beta: float) -> tuple[int, int]:
    a, b = alpha * width, beta * width
    if abs(a - round(a)) > 1e-9 or abs(b - round(b)) > 1e-9 or round(a) < 1:
        raise ContractError(f"alpha*C and beta*C must be positive integers (C={width})")
    return int(round(a)), int(round(b))


def init_gss(rng: np.random.Generator, width: int, alpha: float = 0.5, beta: float = 4.0,
             state_size: int = 16, dtype=np.float64, out_scale: float = 0.1) -> GssParams:
    ac, bc = expanded_widths(width, alpha, beta)

    def lin(fan_in, fan_out, scale=1.0):
        return ad.parameter(rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out)), dtype)

    return GssParams(
        W_v=lin(width, bc),
        W_u=lin(width, ac),
        W_y=lin(ac, bc),
        W_o=lin(bc, width, out_scale),
        dss=init_dss(rng, ac, state_size, dtype),
    )


def gss_block(S: Array, p: GssParams, mode: str = "scan") -> Array:
    """Gated state space block over a sequence S (L x C); residual output."""
    if S.ndim != 2 or S.shape[1] != p.width:
        raise DimensionError(f"gss_block expects L x {p.width}, got {S.shape}")
    V = ad.gelu(S @ p.W_v)
    U = ad.gelu(S @ p.W_u)
    Y = dss_forward(U, p.dss, mode)
    U2 = Y @ p.W_y
    return (U2 * V) @ p.W_o + S
