"""Central finite-difference gradient checks and the registry behind ``hclsm gradcheck``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .core import Tensor, backward, default_dtype, reset_tape

# Case builder: rng -> (function of Tensors returning a Tensor, list of input arrays)
CaseBuilder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]

REGISTRY: dict[str, CaseBuilder] = {}


def register_check(name: str):
    def deco(builder: CaseBuilder) -> CaseBuilder:
        REGISTRY[name] = builder
        return builder

    return deco


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise relative error, floored at 1e-3 of the gradient scale.

    The floor keeps entries that are zero up to rounding from dominating.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    floor = 1e-3 * scale + 1e-12
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.reshape(()) if out.ndim else out
    return ops.sum(out * weights)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
                    seed: int = 0, wrt: Sequence[int] | None = None) -> float:
    """Max relative error between tape gradients and central differences (float64)."""
    with default_dtype(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        wrt = range(len(arrays)) if wrt is None else wrt
        reset_tape()
        tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
        out = fn(*tensors)
        weights = None
        if out.size != 1:
            weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=out.shape)
        loss = _scalarize(out, weights)
        backward(loss)
        worst = 0.0
        for i in wrt:
            analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
            numeric = np.zeros_like(arrays[i])
            flat = arrays[i].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = _eval(fn, arrays, weights)
                flat[j] = orig - eps
                fm = _eval(fn, arrays, weights)
                flat[j] = orig
                numeric.reshape(-1)[j] = (fp - fm) / (2 * eps)
            worst = max(worst, relative_error(analytic, numeric))
        return worst


def _eval(fn, arrays, weights) -> float:
    from .core import no_grad

    with no_grad():
        out = fn(*[Tensor(a) for a in arrays])
        if weights is None:
            return float(out.data.reshape(-1)[0])
        return float((out.data * weights).sum())


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool


def run_registered(tol: float = 1e-4, seeds: Sequence[int] = (0,), names: Sequence[str] | None = None,
                   registry: dict[str, CaseBuilder] | None = None) -> list[CheckResult]:
    registry = REGISTRY if registry is None else registry
    results = []
    for name in sorted(registry if names is None else names):
        worst = 0.0
        for s in seeds:
            fn, inputs = registry[name](np.random.default_rng(s))
            err = check_gradients(fn, inputs, seed=s)
            worst = max(worst, err) if np.isfinite(err) else float("inf")
        results.append(CheckResult(name, worst, worst <= tol))
    return results


# ------------------------------------------------------ tensor-level checks


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


@register_check("matmul")
def _c_matmul(rng):
    return ops.matmul, [_rand(rng, 4, 5), _rand(rng, 5, 3)]


@register_check("matmul_batched")
def _c_bmm(rng):
    return ops.matmul, [_rand(rng, 2, 3, 4), _rand(rng, 4, 2)]


@register_check("linear")
def _c_linear(rng):
    return ops.linear, [_rand(rng, 2, 3, 4), _rand(rng, 4, 5), _rand(rng, 5)]


@register_check("softmax")
def _c_softmax(rng):
    return (lambda x: ops.softmax(x, axis=0)), [_rand(rng, 3, 5, lo=-3, hi=3)]


@register_check("logsumexp")
def _c_lse(rng):
    return (lambda x: ops.logsumexp(x, axis=-1)), [_rand(rng, 3, 4, lo=-3, hi=3)]


@register_check("square_stable")
def _c_square(rng):
    return ops.square_stable, [_rand(rng, 3, 4, lo=-3, hi=3)]


@register_check("clamp")
def _c_clamp(rng):
    x = _rand(rng, 20, lo=-80, hi=80)
    # keep samples away from the kinks
    x[np.abs(np.abs(x) - 50) < 1e-2] += 1.0
    return (lambda t: ops.clamp(t, -50.0, 50.0)), [x]


@register_check("layernorm")
def _c_layernorm(rng):
    return ops.layernorm, [_rand(rng, 3, 6), _rand(rng, 6, lo=0.5, hi=1.5), _rand(rng, 6)]


@register_check("elementwise")
def _c_elem(rng):
    def f(x):
        return ops.gelu(x) + ops.silu(x) * ops.tanh(x) + ops.softplus(x) * ops.sigmoid(x) + ops.exp(x * 0.3)

    return f, [_rand(rng, 3, 4, lo=-2, hi=2)]


@register_check("log_sqrt_div")
def _c_logsqrt(rng):
    return (lambda a, b: ops.log(a) * ops.sqrt(b) / (a + b)), [_rand(rng, 5, lo=0.5, hi=2), _rand(rng, 5, lo=0.5, hi=2)]


@register_check("gru_cell")
def _c_gru(rng):
    from .nn import gru_cell

    d = 4
    return gru_cell, [_rand(rng, 2, d), _rand(rng, 2, d), _rand(rng, d, 3 * d), _rand(rng, d, 3 * d),
                      _rand(rng, 3 * d), _rand(rng, 3 * d)]


@register_check("multihead_attention")
def _c_mha(rng):
    from .nn import attention

    return (lambda q, k, v: attention(q, k, v, heads=2, causal=True)), [
        _rand(rng, 2, 3, 4), _rand(rng, 2, 3, 4), _rand(rng, 2, 3, 4)]


@register_check("swiglu_ffn")
def _c_swiglu(rng):
    d, h = 4, 8

    def f(x, w12, w3):
        u = ops.linear(x, w12)
        return ops.linear(ops.silu(u[..., :h]) * u[..., h:], w3)

    return f, [_rand(rng, 2, 3, d), _rand(rng, d, 2 * h), _rand(rng, h, d)]


@register_check("conv2d_3x3")
def _c_conv(rng):
    return ops.conv2d_3x3, [_rand(rng, 2, 4, 4, 3), _rand(rng, 3, 3, 3, 2), _rand(rng, 2)]


@register_check("indexing")
def _c_index(rng):
    idx = np.array([2, 0, 2, 1])

    def f(x):
        a = ops.take(x, idx, axis=1)
        b = ops.concat([x[:, :2], ops.pad_time(x, 1, axis=1)], axis=1)
        return ops.sum(a * a, axis=1) + ops.mean(b, axis=1) + ops.max(x, axis=1)

    return f, [_rand(rng, 3, 4)]
