"""AdamW with decoupled weight decay, warmup + cosine schedule, global-norm
clipping, and the EMA target update."""

from __future__ import annotations

import math

import numpy as np

from ..tensor.core import Tensor
from ..tensor.nn import Module


def lr_at(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` steps, then cosine decay to zero at ``total``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def grad_norm(params: list[Tensor]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.vdot(p.grad, p.grad))
    return math.sqrt(sq)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    norm = grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class AdamW:
    """Adam moments with weight decay applied directly to matrices (ndim >= 2).

    Parameters without a gradient this step are left untouched, moments
    included.
    """

    def __init__(self, named: list[tuple[str, Tensor]], betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.named = list(named)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}
        self.t = {n: 0 for n, _ in self.named}

    @property
    def params(self) -> list[Tensor]:
        return [p for _, p in self.named]

    def step(self, lr: float) -> None:
        for n, p in self.named:
            g = p.grad
            if g is None:
                continue
            self.t[n] += 1
            t = self.t[n]
            m = self.m[n]
            v = self.v[n]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            if self.wd and p.data.ndim >= 2:
                p.data *= 1 - lr * self.wd
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for n, _ in self.named:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
            out[f"t/{n}"] = np.array(self.t[n], dtype=np.int64)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.named:
            self.m[n] = np.asarray(state[f"m/{n}"], dtype=p.dtype).copy()
            self.v[n] = np.asarray(state[f"v/{n}"], dtype=p.dtype).copy()
            self.t[n] = int(state[f"t/{n}"])


def ema_update(target: Module, online: Module, tau: float) -> None:
    """``target <- tau * target + (1 - tau) * online`` in place, parameter by parameter."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    tp = dict(target.named_parameters())
    for name, p in online.named_parameters():
        q = tp[name]
        if tau == 0.0:
            q.data = p.data.copy()
        elif tau != 1.0:
            q.data = tau * q.data + (1.0 - tau) * p.data
