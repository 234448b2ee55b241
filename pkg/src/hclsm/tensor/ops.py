"""Differentiable primitives.

Each op computes its forward value with numpy and records a closure that maps
the upstream gradient to one gradient per input (None where no gradient
flows).
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Sequence

import numpy as np

from .core import DimensionError, Tensor, as_tensor, record

CLAMP_LIMIT = 50.0
DIV_EPS = 1e-8
LN_EPS = 1e-5

_counter = threading.local()


@contextmanager
def count_flops():
    """Tally multiply-adds of every matmul/linear run inside the block.

    Yields a one-element list whose entry is updated in place.
    """
    prev = getattr(_counter, "box", None)
    box = [0]
    _counter.box = box
    try:
        yield box
    finally:
        _counter.box = prev


def _tally(out: np.ndarray, k: int) -> None:
    box = getattr(_counter, "box", None)
    if box is not None:
        box[0] += int(out.size) * int(k)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# --------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return record(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return record(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    b = as_tensor(b)
    return _wrap(a, b), b


def square_stable(x: Tensor) -> Tensor:
    """Elementwise ``x * x`` with the product rule, never a generic power."""
    xd = x.data
    return record(xd * xd, (x,), lambda g: (g * (xd + xd),))


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    out = np.power(xd, exponent)
    return record(out, (x,), lambda g: (g * exponent * np.power(xd, exponent - 1),))


# ------------------------------------------------------------- elementwise


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return record(out, (x,), lambda g: (g * 0.5 / out,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    xd = x.data
    return record(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-|z|) never overflows; pick 1/(1+e) or e/(1+e) by sign
    e = np.exp(-np.abs(z))
    return (np.where(z >= 0, 1.0, e) / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return record(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return record(out, (x,), bw)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return record(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return record(out, (x,), lambda g: (g * _sigmoid(xd),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes strictly inside the bounds only."""
    if lo > hi:
        raise ValueError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    xd = x.data
    inside = (xd > lo) & (xd < hi)
    return record(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def clamp_activations(x: Tensor) -> Tensor:
    return clamp(x, -CLAMP_LIMIT, CLAMP_LIMIT)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), sa) if a.requires_grad else None,
            _unbroadcast(np.where(cond, 0.0, g), sb) if b.requires_grad else None,
        )

    return record(np.where(cond, a.data, b.data), (a, b), bw)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient as if the output were ``soft``."""
    hard = np.asarray(hard, dtype=soft.dtype)
    return record(hard, (soft,), lambda g: (g,))


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# --------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return record(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return record(x.data.mean(axis=axes, keepdims=keepdims), (x,), bw)


def max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = x.data.max(axis=axes, keepdims=True)
    hit = x.data == out
    # split ties evenly so the gradient stays a valid subgradient
    share = hit / hit.sum(axis=axes, keepdims=True)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * share,)

    return record(out if keepdims else out.squeeze(axes), (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), bw)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = np.exp(x.data - out)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return record(out if keepdims else out.squeeze(axis), (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis, keepdims=True)


# ------------------------------------------------------------ shape & index


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, old),))


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return reshape(x, np.expand_dims(x.data, axis).shape)


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        return (full,)

    return record(x.data[index], (x,), bw)


def _is_fancy(index) -> bool:
    if isinstance(index, np.ndarray):
        return index.dtype != bool
    if isinstance(index, (list,)):
        return True
    if isinstance(index, tuple):
        return any(isinstance(i, (np.ndarray, list)) for i in index)
    return False


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with one shared index array (vectorised)."""
    indices = np.asarray(indices)
    shape, dtype = x.shape, x.dtype
    axis = axis % x.ndim

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return record(np.take(x.data, indices, axis=axis), (x,), bw)


def take_along_axis(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    indices = np.asarray(indices)
    shape, dtype = x.shape, x.dtype
    axis = axis % x.ndim

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        _add_along_axis(full, indices, g, axis)
        return (full,)

    return record(np.take_along_axis(x.data, indices, axis=axis), (x,), bw)


def _add_along_axis(arr, indices, values, axis):
    idx = list(np.ix_(*[np.arange(n) for n in indices.shape]))
    idx[axis] = indices
    np.add.at(arr, tuple(idx), values)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % (xs[0].ndim + 1)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record(np.stack([x.data for x in xs], axis=axis), tuple(xs), bw)


def pad_time(x: Tensor, left: int, axis: int) -> Tensor:
    """Zero-pad ``left`` steps at the start of ``axis``."""
    axis = axis % x.ndim
    width = [(0, 0)] * x.ndim
    width[axis] = (left, 0)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(left, None)
    sl = tuple(sl)
    return record(np.pad(x.data, width), (x,), lambda g: (g[sl],))


# ------------------------------------------------------------------ linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims do not broadcast: {ad.shape} @ {bd.shape}") from exc
    _tally(out, ad.shape[-1])

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # fold batch dims into one big contraction
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return record(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` fused into one tape node."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"linear shape mismatch: {xd.shape} @ {wd.shape}")
    out = xd @ wd
    _tally(out, wd.shape[0])
    if b is not None:
        out = out + b.data
    lead = xd.shape[:-1]

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(*lead, wd.shape[0]) if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, bw)


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, axis: int = -1,
              eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis (population variance), then scale and shift."""
    if axis not in (-1, x.ndim - 1):
        perm = list(range(x.ndim))
        perm[axis], perm[-1] = perm[-1], perm[axis]
        y = layernorm(transpose(x, tuple(perm)), gamma, beta, -1, eps)
        return transpose(y, tuple(perm))
    n = x.shape[-1]
    if n < 1:
        raise DimensionError("layernorm over an empty axis")
    if gamma is not None and gamma.shape != (n,):
        raise DimensionError(f"gamma shape {gamma.shape} does not match axis length {n}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat if gamma is None else xhat * gamma.data
    if beta is not None:
        out = out + beta.data

    def bw(g):
        gh = g if gamma is None else g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, n).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, n).sum(axis=0))
        return grads

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return record(out, tuple(parents), bw)


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, channels-last.

    x: [S, H, W, C], w: [3, 3, C, F], b: [F] -> [S, H, W, F].
    """
    xd, wd = x.data, w.data
    S, H, W, C = xd.shape
    if wd.shape[:3] != (3, 3, C):
        raise DimensionError(f"conv weight {wd.shape} does not fit input channels {C}")
    F = wd.shape[3]
    xp = np.pad(xd, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, i:i + H, j:j + W, :] for i in range(3) for j in range(3)], axis=-1)
    cols = cols.reshape(S * H * W, 9 * C)
    w2 = wd.reshape(9 * C, F)
    out = cols @ w2
    if b is not None:
        out += b.data
    out = out.reshape(S, H, W, F)

    def bw(g):
        g2 = g.reshape(S * H * W, F)
        gx = gw = None
        if x.requires_grad:
            # input gradient is the same convolution of g with the kernel flipped in space
            gpad = np.pad(g, ((0, 0), (1, 1), (1, 1), (0, 0)))
            gcols = np.concatenate([gpad[:, i:i + H, j:j + W, :] for i in range(3) for j in range(3)], axis=-1)
            w_flip = np.ascontiguousarray(wd[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(9 * F, C)
            gx = (gcols.reshape(S * H * W, 9 * F) @ w_flip).reshape(S, H, W, C)
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(3, 3, C, F)
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, bw)
