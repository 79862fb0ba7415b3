"""Dense n-d arrays with tape-based reverse-mode differentiation.

Operations performed while a :class:`Tape` is active are recorded whenever at
least one input requires a gradient. :func:`backward` then sweeps the tape in
reverse and accumulates gradients into the leaf arrays.

Complex values are carried as real arrays whose trailing axis has extent 2
(real, imaginary). For a real loss and complex ``z = x + iy`` the gradient
stored for ``z`` is ``dL/dx + i dL/dy``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_local = threading.local()
_DEFAULT_DTYPE = {"dtype": np.float64}

# plain Python floats, so float32 arrays are not promoted
_SQRT_2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def get_default_dtype():
    return _DEFAULT_DTYPE["dtype"]


def set_default_dtype(dtype) -> None:
    _DEFAULT_DTYPE["dtype"] = np.dtype(dtype).type


@contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE["dtype"] = old


class Array:
    """An n-d real array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Array):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Array, inputs: tuple[Array, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive applications; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, out: Array, inputs: tuple[Array, ...], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording (nested tapes are restored on exit)."""
    saved = list(_stack())
    _local.stack = []
    try:
        yield
    finally:
        _local.stack = saved


def as_array(x) -> Array:
    if isinstance(x, Array):
        return x
    return Array(x)


def record_op(out_data: np.ndarray, inputs: Sequence[Array], backward: Callable) -> Array:
    """Wrap ``out_data`` and record it on the active tape if any input is tracked.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    tape = active_tape()
    tracked = tape is not None and any(a.requires_grad for a in inputs)
    out = Array(out_data, requires_grad=tracked, dtype=out_data.dtype if out_data.dtype.kind == "f" else None)
    if tracked:
        tape.record(out, tuple(inputs), backward)
    return out


def backward(tape: Tape, loss: Array) -> None:
    """Reverse sweep over ``tape``; accumulates into ``.grad`` of leaf arrays."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Array] = {id(loss): loss}
    produced = set()
    for node in reversed(tape.nodes):
        key = id(node.out)
        produced.add(key)
        g = grads.pop(key, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            k = id(inp)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
                holders[k] = inp
    for k, g in grads.items():
        if k in produced:
            continue
        leaf = holders[k]
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def detach(x: Array) -> Array:
    """Same values, no gradient linkage."""
    return Array(x.data.copy(), requires_grad=False)


def parameter(data, dtype=None, name: str | None = None) -> Array:
    return Array(data, requires_grad=True, dtype=dtype, name=name)


# ---------------------------------------------------------------- helpers

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _lift(x, like: Array | None = None) -> Array:
    if isinstance(x, Array):
        return x
    dtype = like.dtype if like is not None else None
    return Array(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b) -> tuple[Array, Array]:
    if isinstance(a, Array):
        return a, _lift(b, a)
    b = as_array(b)
    return _lift(a, b), b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Array:
    a, b = _pair(a, b)
    return record_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Array:
    a, b = _pair(a, b)
    return record_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Array:
    a, b = _pair(a, b)
    return record_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Array:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return record_op(out, (a, b), bw)


def neg(a: Array) -> Array:
    return record_op(-a.data, (a,), lambda g: (-g,))


def exp(a: Array) -> Array:
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,))


def log(a: Array) -> Array:
    return record_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Array) -> Array:
    out = np.sqrt(a.data)
    return record_op(out, (a,), lambda g: (0.5 * g / out,))


def square(a: Array) -> Array:
    return record_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def abs_(a: Array) -> Array:
    return record_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a: Array) -> Array:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Array) -> Array:
    """log(1 + exp(x)), evaluated stably."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        s = np.exp(-np.logaddexp(0, -x))
        return (g * s,)

    return record_op(out, (a,), bw)


def tanh(a: Array) -> Array:
    out = np.tanh(a.data)
    return record_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Array) -> Array:
    mask = a.data > 0
    return record_op(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Array) -> Array:
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return record_op(x * cdf, (a,), bw)


def minimum(a, b) -> Array:
    a, b = _pair(a, b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return record_op(out, (a, b), lambda g: (_unbroadcast(g * take_a, a.shape),
                                             _unbroadcast(g * ~take_a, b.shape)))


def smooth_l1(a: Array, delta: float = 1.0) -> Array:
    """Elementwise Huber-style SmoothL1 with transition at ``delta``."""
    x = a.data
    ax = np.abs(x)
    quad = ax < delta
    out = np.where(quad, 0.5 * x * x / delta, ax - 0.5 * delta)
    return record_op(out, (a,), lambda g: (g * np.where(quad, x / delta, np.sign(x)),))


# ---------------------------------------------------------------- reductions / shape

def sum_(a: Array, axis=None, keepdims: bool = False) -> Array:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op(np.asarray(out), (a,), bw)


def mean(a: Array, axis=None, keepdims: bool = False) -> Array:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a: Array, shape) -> Array:
    return record_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Array, axes=None) -> Array:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Array, index) -> Array:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record_op(np.array(out, copy=True), (a,), bw)


def take_rows(a: Array, index: np.ndarray) -> Array:
    """Gather along axis 0. A permutation index gets an exact inverse-permutation backward."""
    index = np.asarray(index, dtype=np.intp)
    out = a.data[index]
    n = a.shape[0]
    if index.shape == (n,) and np.array_equal(np.sort(index), np.arange(n)):
        inv = np.empty_like(index)
        inv[index] = np.arange(n)
        return record_op(out, (a,), lambda g: (g[inv],))

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record_op(out, (a,), bw)


def concat(arrays: Sequence[Array], axis: int = 0) -> Array:
    arrays = [as_array(x) for x in arrays]
    out = np.concatenate([x.data for x in arrays], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_op(out, tuple(arrays), bw)


def stack(arrays: Sequence[Array], axis: int = 0) -> Array:
    arrays = [as_array(x) for x in arrays]
    out = np.stack([x.data for x in arrays], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(arrays)))

    return record_op(out, tuple(arrays), bw)


# ---------------------------------------------------------------- linear algebra / nn

def matmul(a: Array, b: Array) -> Array:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs arrays with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record_op(out, (a, b), bw)


def softmax(a: Array, axis: int = -1) -> Array:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record_op(out, (a,), bw)


def layernorm(x: Array, gain: Array, bias: Array, eps: float = 1e-5) -> Array:
    """Normalize over the last axis, then apply a per-channel affine map."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layernorm affine shape mismatch for {c} channels")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gb = g.reshape(-1, c).sum(axis=0)
        gg = (g * xhat).reshape(-1, c).sum(axis=0)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return record_op(out, (x, gain, bias), bw)


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    cin = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: cin x h x w x k x k -> (cin*k*k) x (h*w)
    return win.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, h * w)


def conv2d(x: Array, w: Array, b: Array) -> Array:
    """Same-size, stride-1, zero-padded 2-D convolution (cross-correlation)."""
    cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    if k != k2 or k % 2 == 0:
        raise DimensionError("conv2d needs an odd square kernel")
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, h, wd)
    wmat = w.data.reshape(cout, -1)
    out = (wmat @ cols + b.data[:, None]).reshape(cout, h, wd)

    def bw(g):
        g2 = g.reshape(cout, h * wd)
        gw = (g2 @ cols.T).reshape(w.shape)
        gb = g2.sum(axis=1)
        gcols = (wmat.T @ g2).reshape(cin, k, k, h, wd)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + h, j:j + wd] += gcols[:, i, j]
        gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    return record_op(out, (x, w, b), bw)


# ---------------------------------------------------------------- complex pairs

def complex_pair(re: Array, im: Array) -> Array:
    return stack([re, im], axis=-1)


def cmul(a: Array, b: Array) -> Array:
    """Complex product of paired arrays (trailing axis = re, im)."""
    a, b = _pair(a, b)
    ar, ai = a.data[..., 0], a.data[..., 1]
    br, bi = b.data[..., 0], b.data[..., 1]
    out = np.stack([ar * br - ai * bi, ar * bi + ai * br], axis=-1)

    def bw(g):
        gr, gi = g[..., 0], g[..., 1]
        # dL/da = g * conj(b), dL/db = g * conj(a)
        ga = np.stack([gr * br + gi * bi, gi * br - gr * bi], axis=-1)
        gb = np.stack([gr * ar + gi * ai, gi * ar - gr * ai], axis=-1)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record_op(out, (a, b), bw)


def cexp(a: Array) -> Array:
    """Complex exponential of a paired array."""
    mag = np.exp(a.data[..., 0])
    ang = a.data[..., 1]
    out = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=-1)

    def bw(g):
        # d exp(z) = exp(z) dz -> dL/dz = g * conj(exp(z))
        gr, gi = g[..., 0], g[..., 1]
        orr, oi = out[..., 0], out[..., 1]
        return (np.stack([gr * orr + gi * oi, gi * orr - gr * oi], axis=-1),)

    return record_op(out, (a,), bw)


def cdiv(a: Array, b: Array) -> Array:
    """Complex quotient a / b of paired arrays."""
    a, b = _pair(a, b)
    za = a.data[..., 0] + 1j * a.data[..., 1]
    zb = b.data[..., 0] + 1j * b.data[..., 1]
    q = za / zb
    out = np.stack([q.real, q.imag], axis=-1).astype(a.dtype)

    def bw(g):
        gz = g[..., 0] + 1j * g[..., 1]
        ga = gz / np.conj(zb)
        gb = -ga * np.conj(q)
        return (_unbroadcast(np.stack([ga.real, ga.imag], -1).astype(a.dtype), a.shape),
                _unbroadcast(np.stack([gb.real, gb.imag], -1).astype(b.dtype), b.shape))

    return record_op(out, (a, b), bw)


def to_complex(a: np.ndarray) -> np.ndarray:
    return a[..., 0] + 1j * a[..., 1]


def from_complex(z: np.ndarray, dtype) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1).astype(dtype, copy=False)


# ---------------------------------------------------------------- finite differences

def numerical_grad(fn: Callable[[], Array], x: Array, eps: float = 1e-5,
                   indices: Sequence[int] | None = None, order: int = 2) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x`` (mutated in place).

    ``order=2`` is the 3-point stencil, ``order=4`` the 5-point one.
    """
    if order not in (2, 4):
        raise ContractError("finite-difference order must be 2 or 4")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices

    def at(i, delta):
        flat[i] = old + delta
        return float(fn().data)

    with no_grad():
        for i in idx:
            old = flat[i]
            if order == 2:
                grad[i] = (at(i, eps) - at(i, -eps)) / (2 * eps)
            else:
                grad[i] = (-at(i, 2 * eps) + 8 * at(i, eps) - 8 * at(i, -eps)
                           + at(i, -2 * eps)) / (12 * eps)
            flat[i] = old
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(fn: Callable[[], Array], params: Sequence[Array], eps: float = 1e-5,
              floor: float = 1e-6, max_entries: int | None = None, order: int = 2,
              rng: np.random.Generator | None = None) -> float:
    """Worst relative error between tape gradients and central differences."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        idx = None
        if max_entries is not None and p.size > max_entries:
            idx = rng.choice(p.size, size=max_entries, replace=False)
        numeric = numerical_grad(fn, p, eps, idx, order)
        if idx is not None:
            a, n = analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]
        else:
            a, n = analytic, numeric
        worst = max(worst, relative_error(a, n, floor))
    return worst
