"""Parameter containers and the neural building blocks shared by every layer."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .core import DimensionError, Tensor, get_default_dtype


class Module:
    """Attribute-walking parameter container (Tensors, Modules, lists of Modules)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=p.dtype)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True, name=name)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class GRUCell(Module):
    """GRU whose update gate ``z`` selects the candidate: ``h' = z*n + (1-z)*h``.

    The output is clamped to [-50, 50].
    """

    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        self.w_x = uniform_init(rng, (d, 3 * d), d)
        self.w_h = uniform_init(rng, (d, 3 * d), d)
        self.b_x = param(np.zeros(3 * d))
        self.b_h = param(np.zeros(3 * d))

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        return gru_cell(h, x, self.w_x, self.w_h, self.b_x, self.b_h)


def gru_cell(h: Tensor, x: Tensor, w_x: Tensor, w_h: Tensor, b_x: Tensor, b_h: Tensor) -> Tensor:
    if h.shape != x.shape:
        raise DimensionError(f"gru_cell state {h.shape} and input {x.shape} differ")
    d = h.shape[-1]
    gx = ops.linear(x, w_x, b_x)
    gh = ops.linear(h, w_h, b_h)
    r = ops.sigmoid(gx[..., :d] + gh[..., :d])
    z = ops.sigmoid(gx[..., d:2 * d] + gh[..., d:2 * d])
    n = ops.tanh(gx[..., 2 * d:] + r * gh[..., 2 * d:])
    out = h + z * (n - h)
    return ops.clamp_activations(out)


def swiglu_hidden(d: int) -> int:
    return max(8, 8 * int(round(8 * d / 3 / 8)))


class SwiGLU(Module):
    """``(silu(x W1) * (x W2)) W3`` without biases."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or swiglu_hidden(d)
        self.w12 = uniform_init(rng, (d, 2 * hidden), d)
        self.w3 = uniform_init(rng, (hidden, d), hidden)
        self.hidden = hidden

    def __call__(self, x: Tensor) -> Tensor:
        u = ops.linear(x, self.w12)
        hdim = self.hidden
        return ops.linear(ops.silu(u[..., :hdim]) * u[..., hdim:], self.w3)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1, causal: bool = False,
              key_mask: np.ndarray | None = None, return_weights: bool = False):
    """Scaled dot-product attention over the second-to-last axis.

    q: [..., Lq, D], k/v: [..., Lk, D]. ``key_mask`` ([..., Lk], True = keep)
    hides keys; a query always keeps its own position when lengths match so no
    row is ever fully masked.
    """
    D = q.shape[-1]
    if D % heads:
        raise DimensionError(f"width {D} not divisible by {heads} heads")
    dh = D // heads
    lead_q, lead_k = q.shape[:-2], k.shape[:-2]
    Lq, Lk = q.shape[-2], k.shape[-2]

    def split(t: Tensor, lead, L) -> Tensor:
        t = t.reshape(*lead, L, heads, dh)
        n = len(lead)
        return ops.transpose(t, tuple(range(n)) + (n + 1, n, n + 2))

    qh, kh, vh = split(q, lead_q, Lq), split(k, lead_k, Lk), split(v, lead_k, Lk)
    scores = ops.matmul(qh, ops.transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2)))
    scores = scores * (1.0 / math.sqrt(dh))
    keep = None
    if causal:
        keep = np.tril(np.ones((Lq, Lk), dtype=bool))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)[..., None, None, :]
        if Lq == Lk:
            km = km | np.eye(Lq, dtype=bool)
        keep = km if keep is None else (km & keep)
    if keep is not None:
        scores = ops.where(keep, scores, -np.inf)
    w = ops.softmax(scores, axis=-1)
    out = ops.matmul(w, vh)
    n = len(lead_q)
    out = ops.transpose(out, tuple(range(n)) + (n + 1, n, n + 2)).reshape(*lead_q, Lq, D)
    return (out, w) if return_weights else out


class MultiheadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise DimensionError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(d, d, rng, bias=False)
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng, bias=False)
        self.wo = Linear(d, d, rng, bias=False)

    def __call__(self, xq: Tensor, xkv: Tensor | None = None, causal: bool = False,
                 key_mask: np.ndarray | None = None) -> Tensor:
        xkv = xq if xkv is None else xkv
        out = attention(self.wq(xq), self.wk(xkv), self.wv(xkv), self.heads, causal, key_mask)
        return self.wo(out)


class TransformerBlock(Module):
    """Pre-norm self-attention + SwiGLU block over the second-to-last axis."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = MultiheadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = SwiGLU(d, rng)

    def __call__(self, x: Tensor, causal: bool = False, key_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), causal=causal, key_mask=key_mask)
        return x + self.ffn(self.ln2(x))
