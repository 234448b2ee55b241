"""Object decomposition: slot attention with slot-axis competition, an
existence head, slot birth from unexplained tokens, and Sinkhorn matching
between consecutive frames."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ops
from .tensor.core import Tensor, held
from .tensor.gradcheck import register_check
from .tensor.nn import GRUCell, LayerNorm, Linear, MLP, Module, param

ATTN_EPS = 1e-8
ALIVE_THRESHOLD = 0.5
BIRTH_P_ALIVE = 0.9


@dataclass
class SlotState:
    slots: Tensor  # [B, N, d]
    p_alive: Tensor  # [B, N]
    assignment: Tensor | None = None  # [B, N, N]
    attn: Tensor | None = None  # [B, N, M], last iteration


class SlotInit(Module):
    """Learned Gaussian over initial slots, sampled by reparameterisation."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.mu = param(rng.normal(0.0, 1.0, size=d) / math.sqrt(d))
        self.log_sigma = param(np.full(d, math.log(0.5)))

    def __call__(self, B: int, n_max: int, rng: np.random.Generator) -> Tensor:
        return init_slots(self, B, n_max, rng)


def init_slots(init: SlotInit, B: int, n_max: int, rng: np.random.Generator) -> Tensor:
    d = init.mu.shape[0]
    eps = rng.standard_normal((B, n_max, d)).astype(init.mu.dtype)
    return init.mu + ops.exp(init.log_sigma) * Tensor(eps)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Softmax over the *slot* axis of ``q k^T / sqrt(d)``: [B,N,d],[B,M,d] -> [B,N,M]."""
    d = q.shape[-1]
    logits = ops.matmul(q, ops.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(d))
    return ops.softmax(logits, axis=1)


class SlotAttention(Module):
    def __init__(self, d_in: int, d_slot: int, rng: np.random.Generator, iters: int = 3,
                 mlp_hidden: int | None = None):
        self.iters = iters
        self.ln_in = LayerNorm(d_in)
        self.to_k = Linear(d_in, d_slot, rng, bias=False)
        self.to_v = Linear(d_in, d_slot, rng, bias=False)
        self.ln_slots = LayerNorm(d_slot)
        self.to_q = Linear(d_slot, d_slot, rng, bias=False)
        self.gru = GRUCell(d_slot, rng)
        self.ln_mlp = LayerNorm(d_slot)
        self.mlp = MLP(d_slot, mlp_hidden or 2 * d_slot, d_slot, rng)

    def project_tokens(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        x = self.ln_in(tokens)
        return self.to_k(x), self.to_v(x)

    def __call__(self, slots: Tensor, tokens: Tensor, iters: int | None = None) -> tuple[Tensor, Tensor]:
        k, v = self.project_tokens(tokens)
        return slot_attention_iterate(self, slots, k, v, iters or self.iters)


def slot_attention_iterate(mod: SlotAttention, slots: Tensor, k: Tensor, v: Tensor, iters: int):
    """Run ``iters`` competition rounds; returns (slots, attention of the last round)."""
    if iters < 1:
        raise ValueError("slot attention needs at least one iteration")
    A = None
    for _ in range(iters):
        prev = slots
        q = mod.to_q(mod.ln_slots(slots))
        A = attention_weights(q, k)
        W = A / (ops.sum(A, axis=-1, keepdims=True) + ATTN_EPS)
        updates = ops.matmul(W, v)
        B, N, d = slots.shape
        slots = mod.gru(prev.reshape(B * N, d), updates.reshape(B * N, d)).reshape(B, N, d)
        slots = slots + mod.mlp(mod.ln_mlp(slots))
    return ops.clamp_activations(slots), A


class ExistenceHead(Module):
    def __init__(self, d: int, rng: np.random.Generator, bias_init: float = 2.0):
        self.proj = Linear(d, 1, rng)
        self.proj.weight.data *= 0.1
        self.proj.bias.data[:] = bias_init

    def __call__(self, slots: Tensor) -> Tensor:
        return existence_head(slots, self)


def existence_head(slots: Tensor, head: ExistenceHead) -> Tensor:
    z = head.proj(slots)
    return ops.sigmoid(z.reshape(*z.shape[:-1]))


def alive_mask(p_alive: Tensor) -> Tensor:
    """Hard ``p > 0.5`` mask forward, sigmoid gradient backward."""
    return ops.straight_through(p_alive.data > ALIVE_THRESHOLD, p_alive)


def residual_energy(A: np.ndarray | Tensor, p_alive: np.ndarray | Tensor) -> np.ndarray:
    """``1 - sum_n p_alive_n A_nk`` clipped to [0, 1]: token mass left unexplained."""
    A = A.data if isinstance(A, Tensor) else np.asarray(A)
    p = p_alive.data if isinstance(p_alive, Tensor) else np.asarray(p_alive)
    return held(lambda: np.clip(1.0 - np.einsum("bn,bnk->bk", p, A), 0.0, 1.0))


class BirthProjection(Module):
    def __init__(self, d_in: int, d_slot: int, rng: np.random.Generator):
        self.proj = Linear(d_in, d_slot, rng)


def slot_birth(state: SlotState, tokens: Tensor, r: np.ndarray, birth: BirthProjection,
               threshold: float = 0.3) -> tuple[SlotState, np.ndarray]:
    """Replace the least-alive dormant slot with a projection of the top-residual token.

    Fires per batch element when the mean residual energy exceeds ``threshold``
    and some slot has ``p_alive <= 0.5``. Returns the new state and the birth
    mask [B, N].
    """
    p = state.p_alive.data
    B, N = p.shape

    def decide():
        fire = (r.mean(axis=-1) > threshold) & (p <= ALIVE_THRESHOLD).any(axis=-1)
        born = np.zeros((B, N), dtype=bool)
        born[np.arange(B), np.argmin(p, axis=-1)] = fire
        return born, np.argmax(r, axis=-1)

    born, src = held(decide)
    if not born.any():
        return state, born
    picked = ops.take_along_axis(tokens, src[:, None, None].repeat(tokens.shape[-1], axis=-1), axis=1)
    newborn = birth.proj(picked)  # [B, 1, d]
    mask = born[..., None]
    slots = ops.where(mask, ops.broadcast_to(newborn, state.slots.shape), state.slots)
    p_alive = ops.where(born, BIRTH_P_ALIVE, state.p_alive)
    return SlotState(slots, p_alive, state.assignment, state.attn), born


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    an = a / ops.sqrt(ops.sum(ops.square_stable(a), axis=-1, keepdims=True) + ATTN_EPS)
    bn = b / ops.sqrt(ops.sum(ops.square_stable(b), axis=-1, keepdims=True) + ATTN_EPS)
    return ops.matmul(an, ops.transpose(bn, (0, 2, 1)))


def sinkhorn_from_cost(cost: Tensor, iters: int = 30, temperature: float = 0.05) -> Tensor:
    """Log-domain alternating row/column normalisation of ``exp(-cost / temperature)``."""
    if iters < 1:
        raise ValueError("sinkhorn needs at least one iteration")
    logk = cost * (-1.0 / temperature)
    for _ in range(iters):
        logk = logk - ops.logsumexp(logk, axis=-1, keepdims=True)
        logk = logk - ops.logsumexp(logk, axis=-2, keepdims=True)
    return ops.exp(logk)


def sinkhorn_match(prev: Tensor, cur: Tensor, iters: int = 30, temperature: float = 0.05) -> Tensor:
    """Soft assignment [B, N, N] with rows = previous slots, columns = current slots."""
    return sinkhorn_from_cost(ops.neg(_cosine(prev, cur)), iters, temperature)


def hard_assignment(assignment: np.ndarray | Tensor) -> np.ndarray:
    P = assignment.data if isinstance(assignment, Tensor) else assignment
    return np.argmax(P, axis=-1)


# ------------------------------------------------------------ gradient checks


@register_check("slot_attention_step")
def _c_slot_step(rng):
    d, N, M = 4, 3, 8
    mod = SlotAttention(d, d, rng, iters=1, mlp_hidden=4)

    def f(slots, tokens):
        out, _ = mod(slots, tokens, iters=2)
        return out

    return f, [rng.normal(size=(1, N, d)), rng.normal(size=(1, M, d))]


@register_check("sinkhorn")
def _c_sinkhorn(rng):
    return (lambda c: sinkhorn_from_cost(c, iters=5, temperature=0.5)), [rng.uniform(-1, 1, (2, 3, 3))]
