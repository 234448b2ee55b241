"""Loss terms and the stage-dependent objective."""

from __future__ import annotations

import numpy as np

from ..slots import ATTN_EPS, sinkhorn_match
from ..tensor import ops
from ..tensor.core import Tensor, held, no_grad

THRESHOLD_SHARPNESS = 0.1
MINMAX_EPS = 1e-8


def _mse(a: Tensor, b: Tensor) -> Tensor:
    return ops.mean(ops.square_stable(a - b))


def transport(assignment: np.ndarray, source: Tensor) -> Tensor:
    """Move ``source`` rows into the column order of ``assignment`` ([.., N_src, N_dst])."""
    return ops.matmul(Tensor(np.swapaxes(assignment, -1, -2)), source)


def _plan(rows: Tensor, cols: Tensor) -> np.ndarray:
    lead = rows.shape[:-2]
    N, d = rows.shape[-2:]
    with no_grad():
        P = sinkhorn_match(Tensor(rows.data.reshape(-1, N, d)), Tensor(cols.data.reshape(-1, N, d)))
    return P.data.reshape(*lead, N, N)


def soft_assignment(rows: Tensor, cols: Tensor) -> np.ndarray:
    """Detached Sinkhorn plan between two slot sets [.., N, d]; leading dims are flattened."""
    return held(lambda: _plan(rows, cols))


def plan_to_permutation(plan: np.ndarray) -> np.ndarray:
    """One-hot permutation read off a transport plan by repeatedly taking its largest free entry."""
    lead = plan.shape[:-2]
    N = plan.shape[-1]
    flat = plan.reshape(-1, N, N)
    out = np.zeros_like(flat)
    for b, P in enumerate(flat):
        work = P.astype(np.float64).copy()
        for _ in range(N):
            i, j = np.unravel_index(np.argmax(work), work.shape)
            out[b, i, j] = 1.0
            work[i, :] = -np.inf
            work[:, j] = -np.inf
    return out.reshape(*lead, N, N)


def jepa_loss(predicted: Tensor, target: Tensor) -> Tensor:
    """MSE against the detached target after reordering target slots onto predicted slots."""
    target = Tensor(target.data)
    perm = held(lambda: plan_to_permutation(_plan(target, predicted)))
    return _mse(predicted, transport(perm, target))


def diversity_loss(slots: Tensor, alive: Tensor) -> Tensor:
    """Alive-weighted mean of positive pairwise cosine similarity, per frame.

    slots [..., N, d], alive [..., N] (a straight-through mask lets gradient
    reach the existence head).
    """
    norm = ops.sqrt(ops.sum(ops.square_stable(slots), axis=-1, keepdims=True) + ATTN_EPS)
    unit = slots / norm
    nd = unit.ndim
    sim = ops.relu(ops.matmul(unit, ops.transpose(unit, tuple(range(nd - 2)) + (nd - 1, nd - 2))))
    N = slots.shape[-2]
    off = 1.0 - np.eye(N, dtype=slots.dtype)
    m = alive.reshape(*alive.shape, 1)
    pair = m * ops.transpose(m, tuple(range(nd - 2)) + (nd - 1, nd - 2)) * off
    num = ops.sum(sim * pair, axis=(-2, -1))
    den = ops.sum(pair, axis=(-2, -1)) + ATTN_EPS
    return ops.mean(num / den)


def tracking_loss(assignment: np.ndarray, prev_slots: Tensor, cur_slots: Tensor) -> Tensor:
    """MSE between assignment-transported previous slots and current slots."""
    return _mse(cur_slots, transport(assignment, prev_slots))


def change_targets(states: np.ndarray, mode: str = "accel") -> np.ndarray:
    """Per-sequence min-max normalised state-change magnitude, [B, T, N, d] -> [B, T].

    ``change`` uses ``|s_t - s_{t-1}|``; ``accel`` uses the second difference
    ``|s_t - 2 s_{t-1} + s_{t-2}|`` (departure from constant motion). Both are
    averaged over slots and zero where the difference is undefined.
    """
    s = np.asarray(states, dtype=np.float64)
    B, T = s.shape[:2]
    mag = np.zeros((B, T))
    if mode == "change" and T > 1:
        mag[:, 1:] = np.linalg.norm(s[:, 1:] - s[:, :-1], axis=-1).mean(axis=-1)
    elif mode == "accel" and T > 2:
        mag[:, 2:] = np.linalg.norm(s[:, 2:] - 2 * s[:, 1:-1] + s[:, :-2], axis=-1).mean(axis=-1)
    lo = mag.min(axis=1, keepdims=True)
    hi = mag.max(axis=1, keepdims=True)
    return (mag - lo) / (hi - lo + MINMAX_EPS)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    y = np.asarray(targets, dtype=logits.dtype)
    return ops.mean(ops.softplus(logits) - logits * y)


def event_contrastive_loss(logits: Tensor, targets: np.ndarray, threshold_logit: Tensor | None = None) -> Tensor:
    """BCE of event scores against soft change targets.

    With ``threshold_logit`` an extra term fits the threshold: a soft
    "above threshold" indicator of the detached scores is pushed toward the
    hard "target > 0.5" label, so only the threshold moves.
    """
    loss = bce_with_logits(logits, targets)
    if threshold_logit is not None:
        scores = Tensor(held(lambda: 1.0 / (1.0 + np.exp(-logits.data))))
        q = (scores - ops.sigmoid(threshold_logit)) * (1.0 / THRESHOLD_SHARPNESS)
        loss = loss + bce_with_logits(q, np.asarray(targets) > 0.5)
    return loss


STAGE2_TERMS = ("jepa", "sbd", "tracking", "event", "causal")


def total_loss(step: int, parts: dict[str, Tensor], cfg) -> Tensor:
    """Stage 1: 5 SBD + 0.1 diversity. Stage 2: JEPA + SBD + lambda_obj (track + event) + lambda_causal causal."""
    if cfg.stage(step) == 1:
        return parts["sbd"] * cfg.w_sbd_stage1 + parts["diversity"] * cfg.w_div_stage1
    total = parts["jepa"] + parts["sbd"] * cfg.w_sbd_stage2
    total = total + (parts["tracking"] + parts["event"]) * cfg.lambda_obj
    if cfg.causal_active:
        total = total + parts["causal"] * cfg.lambda_causal
    return total
