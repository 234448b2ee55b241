"""Interaction structure between slots.

Two pathways: a relation GNN whose learned edge weights say which slots act on
which, and a separate edge-logit matrix trained toward a DAG through binary
concrete sampling, an L1 penalty and the trace-exponential acyclicity penalty
under an augmented Lagrangian schedule.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .tensor import ops
from .tensor.core import Tensor, backward, grad_enabled, held, no_grad, record, sub_tape
from .tensor.gradcheck import register_check
from .tensor.nn import Linear, Module, param

GNN_CHUNK = 16
AUTO_CHUNK_ABOVE = 32
COUNT_EPS = 1e-6
TAYLOR_ORDER = 16


# ------------------------------------------------------------ relation GNN


def edge_features(o_i: Tensor, o_j: Tensor) -> Tensor:
    """``[o_i, o_j, o_i - o_j, o_i * o_j]`` on the last axis (broadcasting)."""
    if o_i.shape[-1] != o_j.shape[-1]:
        raise ValueError(f"edge endpoints differ in width: {o_i.shape[-1]} vs {o_j.shape[-1]}")
    shape = np.broadcast_shapes(o_i.shape, o_j.shape)
    o_i, o_j = ops.broadcast_to(o_i, shape), ops.broadcast_to(o_j, shape)
    return ops.concat([o_i, o_j, o_i - o_j, o_i * o_j], axis=-1)


class RelationGNN(Module):
    """Edge MLP ``4d -> hidden -> d + 1``: a message plus a sigmoid edge-weight logit."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None):
        self.d = d
        self.l1 = Linear(4 * d, hidden or d, rng)
        self.l2 = Linear(hidden or d, d + 1, rng)

    def __call__(self, slots: Tensor, p_alive, chunk: int = GNN_CHUNK, chunked: bool | None = None) -> Tensor:
        return gnn_messages(slots, p_alive, self, chunk=chunk, chunked=chunked)


class PairBufferStats:
    """Peak element count of pair-shaped buffers ([B, N, block, .]) alive at once."""

    def __init__(self) -> None:
        self.peak = 0
        self.blocks = 0

    def note(self, elements: int) -> None:
        self.blocks += 1
        self.peak = max(self.peak, elements)


_stats: list[PairBufferStats] = []


@contextmanager
def track_pair_buffers():
    stats = PairBufferStats()
    _stats.append(stats)
    try:
        yield stats
    finally:
        _stats.remove(stats)


def _note(*tensors: Tensor) -> None:
    if _stats:
        n = sum(t.size for t in tensors)
        for s in _stats:
            s.note(n)


def _edges_block(slots: Tensor, mod: RelationGNN, j0: int, j1: int) -> tuple[Tensor, Tensor]:
    """Raw messages [B,N,c,d] and sigmoid weights [B,N,c] for sources j0..j1."""
    B, N, d = slots.shape
    feats = edge_features(slots.reshape(B, N, 1, d), slots[:, j0:j1].reshape(B, 1, j1 - j0, d))
    hidden = ops.gelu(mod.l1(feats))
    out = mod.l2(hidden)
    _note(feats, hidden, out)
    return out[..., :d], ops.sigmoid(out[..., d])


def _offdiag(N: int, j0: int, j1: int) -> np.ndarray:
    return np.arange(N)[:, None] != np.arange(j0, j1)[None, :]


def _block_numerator(slots: Tensor, p_alive: Tensor, mod: RelationGNN, j0: int, j1: int) -> Tensor:
    msg, w = _edges_block(slots, mod, j0, j1)
    weight = w * p_alive[:, None, j0:j1] * _offdiag(slots.shape[1], j0, j1)
    return ops.sum(msg * weight.reshape(*weight.shape, 1), axis=2)


def _alive_count(p_alive: Tensor) -> Tensor:
    N = p_alive.shape[1]
    mask = _offdiag(N, 0, N).astype(p_alive.dtype)
    return ops.matmul(p_alive, Tensor(mask.T)) + COUNT_EPS  # [B, N]: sum over j != i


def gnn_messages(slots: Tensor, p_alive, mod: RelationGNN, chunk: int = GNN_CHUNK,
                 chunked: bool | None = None) -> Tensor:
    """Per-destination aggregate of alive-weighted edge messages, normalised by alive count.

    Above 32 slots (or when ``chunked`` is set) sources are processed in
    blocks of ``chunk``. The blocked path never holds more than one block of
    pair tensors: its backward recomputes each block instead of keeping them
    on the tape.
    """
    p_alive = p_alive if isinstance(p_alive, Tensor) else Tensor(np.asarray(p_alive, dtype=slots.dtype))
    B, N, d = slots.shape
    if chunked is None:
        chunked = N > AUTO_CHUNK_ABOVE
    if chunked:
        num = _chunked_numerator(slots, p_alive, mod, chunk)
    else:
        num = _block_numerator(slots, p_alive, mod, 0, N)
    count = _alive_count(p_alive)
    return num / count.reshape(B, N, 1)


def _chunked_numerator(slots: Tensor, p_alive: Tensor, mod: RelationGNN, chunk: int) -> Tensor:
    N = slots.shape[1]
    blocks = [(j0, min(N, j0 + chunk)) for j0 in range(0, N, chunk)]
    params = mod.parameters()
    with no_grad():
        total = None
        for j0, j1 in blocks:
            part = _block_numerator(slots, p_alive, mod, j0, j1).data
            total = part if total is None else total + part

    def bw(g):
        gs = np.zeros_like(slots.data) if slots.requires_grad else None
        gp = np.zeros_like(p_alive.data) if p_alive.requires_grad else None
        for j0, j1 in blocks:
            with sub_tape():
                s = Tensor(slots.data, requires_grad=slots.requires_grad)
                p = Tensor(p_alive.data, requires_grad=p_alive.requires_grad)
                part = _block_numerator(s, p, mod, j0, j1)
                if not part.requires_grad:
                    continue
                # parameter grads land directly on the shared leaves
                backward(ops.sum(part * g))
            if gs is not None:
                gs += s.grad
            if gp is not None and p.grad is not None:
                gp += p.grad
        return (gs, gp) + (None,) * len(params)

    if not grad_enabled():
        return Tensor(total)
    return record(total, (slots, p_alive, *params), bw)


def interaction_edge_weights(slots: Tensor, mod: RelationGNN) -> np.ndarray:
    """Sigmoid edge weights [B, N, N] (destination, source) with a zero diagonal."""
    with no_grad():
        _, w = _edges_block(slots, mod, 0, slots.shape[1])
    return np.where(_offdiag(slots.shape[1], 0, slots.shape[1]), w.data, 0.0)


# ------------------------------------------------------------ causal graph


@dataclass
class CausalGraph:
    W_logits: Tensor  # [N, N]
    temperature: float = 1.0
    lagrange_lambda: float = 0.0
    penalty_rho: float = 1.0
    eta: float = 10.0
    gamma: float = 0.25
    rho_max: float = 1e16
    last_h: float = math.inf

    @classmethod
    def create(cls, n: int, rng: np.random.Generator, **kw) -> "CausalGraph":
        return cls(param(rng.normal(0.0, 0.01, (n, n))), **kw)

    @property
    def n(self) -> int:
        return self.W_logits.shape[0]

    def state(self) -> dict[str, float]:
        return {"temperature": self.temperature, "lagrange_lambda": self.lagrange_lambda,
                "penalty_rho": self.penalty_rho, "last_h": self.last_h}


def _offdiag_mask(n: int, dtype) -> np.ndarray:
    return (1.0 - np.eye(n)).astype(dtype)


def gumbel_edge_sample(graph: CausalGraph, rng: np.random.Generator | int, hard: bool = False) -> Tensor:
    """Binary concrete relaxation ``sigmoid((W + logistic noise) / temperature)``, zero diagonal."""
    if graph.temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    W = graph.W_logits
    u = np.clip(rng.random(W.shape), 1e-12, 1.0 - 1e-12)
    noise = (np.log(u) - np.log1p(-u)).astype(W.dtype)
    soft = ops.sigmoid((W + noise) * (1.0 / graph.temperature))
    if hard:
        soft = ops.straight_through(soft.data > 0.5, soft)
    return soft * _offdiag_mask(graph.n, W.dtype)


def _scaling_exponent(M: np.ndarray) -> int:
    norm = np.abs(M).sum(axis=0).max(initial=0.0)
    return 0 if norm <= 0.5 else int(math.ceil(math.log2(norm / 0.5)))


def expm_taylor(M: Tensor, order: int = TAYLOR_ORDER) -> Tensor:
    """Matrix exponential by scaling and squaring around a truncated Taylor series, on the tape."""
    n = M.shape[-1]
    s = held(lambda: _scaling_exponent(M.data))
    X = M * (1.0 / 2**s) if s else M
    eye = Tensor(np.eye(n, dtype=M.dtype))
    term = X
    E = eye + X
    for k in range(2, order + 1):
        term = ops.matmul(term, X) * (1.0 / k)
        E = E + term
    for _ in range(s):
        E = ops.matmul(E, E)
    return E


def dag_penalty(A: Tensor) -> Tensor:
    """``tr(exp(A * A)) - N``: zero exactly when the weighted graph has no cycle."""
    n = A.shape[-1]
    E = expm_taylor(ops.square_stable(A))
    return ops.sum(E * np.eye(n, dtype=A.dtype)) - float(n)


def sparsity_loss(A: Tensor) -> Tensor:
    n = A.shape[-1]
    if n < 2:
        return ops.sum(A) * 0.0
    return ops.sum(ops.abs(A) * _offdiag_mask(n, A.dtype)) * (1.0 / (n * (n - 1)))


def lagrangian_term(graph: CausalGraph, h: Tensor) -> Tensor:
    """``lambda * h + rho / 2 * h^2``."""
    return h * graph.lagrange_lambda + ops.square_stable(h) * (0.5 * graph.penalty_rho)


def augmented_lagrangian_step(graph: CausalGraph, h_value: float) -> CausalGraph:
    """Dual ascent on lambda; rho grows by ``eta`` when h failed to shrink by ``gamma``."""
    h = float(h_value)
    graph.lagrange_lambda += graph.penalty_rho * h
    if h > graph.gamma * graph.last_h:
        graph.penalty_rho = min(graph.penalty_rho * graph.eta, graph.rho_max)
    graph.last_h = h
    return graph


def anneal_temperature(progress: float, start: float = 1.0, end: float = 0.1) -> float:
    """Linear from ``start`` to ``end`` as ``progress`` goes 0 -> 1 (clipped)."""
    p = min(max(progress, 0.0), 1.0)
    return start + (end - start) * p


# ------------------------------------------------------------ gradient checks


@register_check("gnn_messages")
def _c_gnn(rng):
    d, N = 3, 5
    mod = RelationGNN(d, rng, hidden=4)

    def f(slots, p, w1):
        mod.l1.weight = w1
        return gnn_messages(slots, p, mod)

    return f, [rng.normal(size=(2, N, d)), rng.uniform(0.1, 0.9, (2, N)), mod.l1.weight.data.copy()]


@register_check("gnn_messages_chunked")
def _c_gnn_chunked(rng):
    d, N = 3, 5
    mod = RelationGNN(d, rng, hidden=4)

    def f(slots, p, w2):
        mod.l2.weight = w2
        return gnn_messages(slots, p, mod, chunk=2, chunked=True)

    return f, [rng.normal(size=(2, N, d)), rng.uniform(0.1, 0.9, (2, N)), mod.l2.weight.data.copy()]


@register_check("dag_penalty")
def _c_dag(rng):
    return dag_penalty, [rng.uniform(-1.5, 1.5, (4, 4))]


@register_check("gumbel_sparsity_lagrangian")
def _c_causal(rng):
    seed = int(rng.integers(1 << 30))
    graph = CausalGraph(Tensor(np.zeros((3, 3))), temperature=0.7, lagrange_lambda=0.3, penalty_rho=2.0)

    def f(W):
        graph.W_logits = W
        A = gumbel_edge_sample(graph, seed)
        return sparsity_loss(A) + lagrangian_term(graph, dag_penalty(A))

    return f, [rng.normal(size=(3, 3))]
