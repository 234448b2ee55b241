"""Temporal hierarchy above the per-slot SSM.

Level 1 scores every timestep for "something happened", keeps only the
timesteps above a learned threshold and runs a small transformer over that
sparse event set. Level 2 compresses the events into a fixed number of
summary tokens. The manager mixes the three levels with softmax gates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ops
from .tensor.core import Tensor, held
from .tensor.gradcheck import register_check
from .tensor.nn import LayerNorm, Linear, Module, MultiheadAttention, SwiGLU, TransformerBlock, attention, param

SCALES = (1, 2, 4)


@dataclass
class EventTrace:
    scores: Tensor  # [B, T]
    boundaries: list[np.ndarray]
    gather_index: np.ndarray  # [B, K_max], sentinel = T
    k_actual: np.ndarray  # [B]
    threshold: float = 0.5

    @property
    def T(self) -> int:
        return self.scores.shape[1]


@dataclass
class GoalSummary:
    tokens: Tensor  # [B, n_summary, d]
    attn: np.ndarray | None = field(default=None, repr=False)


# ------------------------------------------------------------ event scoring


def multiscale_diffs(states: Tensor, scales=SCALES) -> Tensor:
    """``x_t - x_{t-s}`` along axis 1 for each scale, zero where ``t < s``; concatenated on the last axis."""
    T = states.shape[1]
    parts = []
    for s in scales:
        if s >= T:
            parts.append(Tensor(np.zeros(states.shape, dtype=states.dtype)))
            continue
        lagged = ops.pad_time(states[:, : T - s], s, axis=1)
        keep = np.zeros((1, T) + (1,) * (states.ndim - 2), dtype=bool)
        keep[:, s:] = True
        parts.append(ops.where(keep, states - lagged, 0.0))
    return ops.concat(parts, axis=-1)


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor | None, dilation: int) -> Tensor:
    """Kernel-3 causal conv over axis 1: ``y_t = sum_j x_{t-(2-j)d} w_j``; x [B,T,C], w [3,C,F]."""
    B, T, C = x.shape
    pad = 2 * dilation
    xp = ops.pad_time(x, pad, axis=1)
    taps = [xp[:, j * dilation: j * dilation + T] for j in range(3)]
    return ops.linear(ops.concat(taps, axis=-1), w.reshape(3 * C, w.shape[-1]), b)


class EventDetector(Module):
    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or d
        c_in = len(SCALES) * d
        self.w1 = param(rng.uniform(-1, 1, (3, c_in, hidden)) / math.sqrt(3 * c_in))
        self.b1 = param(np.zeros(hidden))
        self.w2 = param(rng.uniform(-1, 1, (3, hidden, hidden)) / math.sqrt(3 * hidden))
        self.b2 = param(np.zeros(hidden))
        self.head = Linear(hidden, 1, rng)
        # sigmoid(threshold_logit) is the event threshold; starts at 0.5
        self.threshold_logit = param(np.zeros(()))

    def __call__(self, diffs: Tensor) -> Tensor:
        return event_scores(diffs, self)

    @property
    def threshold(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.threshold_logit.data)))


def event_logits(diffs: Tensor, det: EventDetector) -> Tensor:
    """Pre-sigmoid event scores, [B, T, 3d] -> [B, T]."""
    h = ops.gelu(causal_conv1d(diffs, det.w1, det.b1, dilation=1))
    h = causal_conv1d(h, det.w2, det.b2, dilation=2)
    z = det.head(h)
    return z.reshape(*z.shape[:-1])


def event_scores(diffs: Tensor, det: EventDetector) -> Tensor:
    """Causal event probability per timestep, [B, T, 3d] -> [B, T]."""
    return ops.sigmoid(event_logits(diffs, det))


def detect_boundaries(scores: Tensor | np.ndarray, threshold: float) -> list[np.ndarray]:
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return [np.flatnonzero(row > threshold) for row in s]


def build_trace(scores: Tensor, threshold: float) -> EventTrace:
    bounds = held(lambda: detect_boundaries(scores, threshold))
    index, k = gather_index_for(bounds, scores.shape[1])
    return EventTrace(scores, bounds, index, k, threshold)


# ------------------------------------------------------------ gather / scatter


def gather_index_for(boundaries: list[np.ndarray], T: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.array([len(b) for b in boundaries], dtype=np.int64)
    index = np.full((len(boundaries), max(1, int(k.max(initial=0)))), T, dtype=np.int64)
    for i, b in enumerate(boundaries):
        index[i, : len(b)] = b
    return index, k


def gather_events(states: Tensor, boundaries: list[np.ndarray] | np.ndarray) -> tuple[Tensor, np.ndarray]:
    """states [B,T,...] -> dense [B,K_max,...] right-padded with zeros.

    ``boundaries`` may be a list of index arrays or an already built
    gather index. One fancy-index gather from a copy of ``states`` with a
    zero row appended at position T (the sentinel) does the whole batch.
    """
    B, T = states.shape[:2]
    if isinstance(boundaries, np.ndarray) and boundaries.ndim == 2:
        index = boundaries
    else:
        index, _ = gather_index_for(list(boundaries), T)
    zero = Tensor(np.zeros((B, 1) + states.shape[2:], dtype=states.dtype))
    padded = ops.concat([states, zero], axis=1)
    return padded[np.arange(B)[:, None], index], index


def scatter_events(outputs: Tensor, gather_index: np.ndarray, T: int) -> Tensor:
    """Inverse of ``gather_events``: event rows go back to their timesteps, the rest is zero."""
    B, K = gather_index.shape
    inverse = np.full((B, T), K, dtype=np.int64)
    for b in range(B):
        row = gather_index[b]
        real = row[row < T]
        if len(np.unique(real)) != len(real):
            raise ValueError(f"duplicate event index in batch element {b}: {real.tolist()}")
    bb, kk = np.nonzero(gather_index < T)
    inverse[bb, gather_index[bb, kk]] = kk
    zero = Tensor(np.zeros((B, 1) + outputs.shape[2:], dtype=outputs.dtype))
    padded = ops.concat([outputs, zero], axis=1)
    return padded[np.arange(B)[:, None], inverse]


# ------------------------------------------------------------ level 1


class EventBlock(Module):
    """Full attention across slots inside each event, then causal attention across events."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.ln_slot = LayerNorm(d)
        self.slot_attn = MultiheadAttention(d, heads, rng)
        self.ln_event = LayerNorm(d)
        self.event_attn = MultiheadAttention(d, heads, rng)
        self.ln_ffn = LayerNorm(d)
        self.ffn = SwiGLU(d, rng)

    def __call__(self, x: Tensor, event_mask: np.ndarray) -> Tensor:
        # x: [B, K, N, d]; event_mask: [B, K] True for real events
        x = x + self.slot_attn(self.ln_slot(x))
        xt = ops.transpose(x, (0, 2, 1, 3))  # [B, N, K, d]
        xt = xt + self.event_attn(self.ln_event(xt), causal=True, key_mask=event_mask[:, None, :])
        x = ops.transpose(xt, (0, 2, 1, 3))
        return x + self.ffn(self.ln_ffn(x))


class EventTransformer(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, depth: int = 2):
        self.blocks = [EventBlock(d, heads, rng) for _ in range(depth)]

    def __call__(self, dense: Tensor, k_actual: np.ndarray) -> Tensor:
        return event_transformer(dense, k_actual, self)


def event_mask_for(k_actual: np.ndarray, k_max: int) -> np.ndarray:
    return np.arange(k_max)[None, :] < np.asarray(k_actual)[:, None]


def event_transformer(dense: Tensor, k_actual: np.ndarray, mod: EventTransformer) -> Tensor:
    mask = event_mask_for(k_actual, dense.shape[1])
    x = dense
    for blk in mod.blocks:
        x = blk(x, mask)
    return x


# ------------------------------------------------------------ level 2


class GoalCompressor(Module):
    def __init__(self, d: int, n_summary: int, heads: int, rng: np.random.Generator, depth: int = 2):
        self.queries = param(rng.normal(0.0, 1.0, (n_summary, d)) / math.sqrt(d))
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d)
        self.cross = MultiheadAttention(d, heads, rng)
        self.blocks = [TransformerBlock(d, heads, rng) for _ in range(depth)]

    def __call__(self, events: Tensor, k_actual: np.ndarray, goal: Tensor | None = None) -> GoalSummary:
        return goal_compress(events, k_actual, self, goal)


def goal_key_mask(k_actual: np.ndarray, k_max: int) -> np.ndarray:
    """Real events, or the single zero pad key when a clip has no events at all."""
    mask = event_mask_for(k_actual, k_max)
    mask[np.asarray(k_actual) == 0, 0] = True
    return mask


def goal_compress(events: Tensor, k_actual: np.ndarray, mod: GoalCompressor,
                  goal: Tensor | None = None) -> GoalSummary:
    """Summary queries cross-attend to events [B,K,d]; ``goal`` [B,d] is an optional additive hook."""
    B, K, d = events.shape
    q = ops.broadcast_to(mod.queries.reshape(1, *mod.queries.shape), (B,) + mod.queries.shape)
    if goal is not None:
        q = q + goal.reshape(B, 1, d)
    x = q + mod.cross(mod.ln_q(q), mod.ln_kv(events), key_mask=goal_key_mask(k_actual, K))
    for blk in mod.blocks:
        x = blk(x)
    return GoalSummary(x)


def cross_attention_weights(q: Tensor, events: Tensor, k_actual: np.ndarray, heads: int = 1) -> np.ndarray:
    """Raw cross-attention rows (for inspection and tests)."""
    _, w = attention(q, events, events, heads=heads,
                     key_mask=goal_key_mask(k_actual, events.shape[1]), return_weights=True)
    return w.data


# ------------------------------------------------------------ manager


def hierarchy_combine(l0: Tensor, l1: Tensor, l2: Tensor, gates: Tensor) -> Tensor:
    """Convex mix of the three levels with ``softmax(gates)``; l2 must already broadcast to l0."""
    w = ops.softmax(gates, axis=0)
    return l0 * w[0] + l1 * w[1] + l2 * w[2]


def broadcast_goal(tokens: Tensor, shape) -> Tensor:
    """Mean over summary tokens, broadcast to [B, T, N, d]."""
    B, _, d = tokens.shape
    pooled = ops.mean(tokens, axis=1).reshape(B, 1, 1, d)
    return ops.broadcast_to(pooled, shape)


# ------------------------------------------------------------ gradient checks


@register_check("event_scores")
def _c_event_scores(rng):
    d = 2
    det = EventDetector(d, rng, hidden=3)

    def f(states, w1):
        det.w1 = w1
        return event_scores(multiscale_diffs(states), det)

    return f, [rng.normal(size=(1, 6, d)), det.w1.data.copy()]


@register_check("event_gather_transformer")
def _c_event_tf(rng):
    d, N, T = 4, 2, 5
    mod = EventTransformer(d, 2, rng, depth=1)
    bounds = [np.array([1, 3]), np.array([2])]

    def f(x):
        dense, idx = gather_events(x, bounds)
        out = event_transformer(dense, np.array([2, 1]), mod)
        return scatter_events(out, idx, T)

    return f, [rng.normal(size=(2, T, N, d))]


@register_check("goal_compress")
def _c_goal(rng):
    d = 4
    mod = GoalCompressor(d, 2, 2, rng, depth=1)

    def f(events, gates):
        tokens = goal_compress(events, np.array([3, 0]), mod).tokens
        l0 = events[:, :1]
        return hierarchy_combine(l0, l0 * 0.5, ops.mean(tokens, axis=1, keepdims=True), gates)

    return f, [rng.normal(size=(2, 3, d)), rng.normal(size=3)]
