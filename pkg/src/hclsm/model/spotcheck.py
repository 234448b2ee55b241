"""Whole-model finite-difference spot check.

Picks scalar entries at random across all parameters, compares the tape
gradient of the total loss with a central difference, and reports the worst
relative error over the sampled vector. The step is placed in stage 2 so every
loss term is live; nothing on that path uses straight-through estimators.
Stop-gradient quantities and discrete decisions (alive masks, event
boundaries, Sinkhorn plans, births) are recorded at the base point and replayed
at perturbed points, which is the function the tape actually differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import rng as seeds
from .. import worldgen
from ..tensor.core import backward, default_dtype, hold_constants, no_grad, reset_tape
from ..tensor.gradcheck import relative_error
from .config import ModelConfig
from .network import build_model, forward


@dataclass
class SpotCheck:
    names: list[str]
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float


def _clip(cfg: ModelConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    wc = worldgen.WorldConfig(size=cfg.image_size, T=cfg.clip_len)
    frames, actions = [], []
    for b in range(cfg.batch):
        ep = worldgen.gen_episode(wc, seed * 1000 + b)
        frames.append(ep.frames)
        actions.append(ep.actions * (10.0 / cfg.image_size))
    return np.stack(frames).astype(np.float64), np.stack(actions).astype(np.float64)


def model_spot_check(cfg: ModelConfig, n_params: int = 20, eps: float = 1e-6, seed: int = 0) -> SpotCheck:
    cfg = cfg.replace(dtype="float64")
    with default_dtype(np.float64):
        model, ema = build_model(cfg)
        frames, actions = _clip(cfg, seed)
        step = max(cfg.stage1_steps, 0) + 1

        reset_tape()
        with hold_constants() as constants:
            out = forward(model, ema, frames, actions, step, cfg=cfg)
        backward(out.total)

        def loss() -> float:
            with no_grad(), hold_constants(constants):
                return float(forward(model, ema, frames, actions, step, cfg=cfg).total.data)

        named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
        pick = seeds.split(seed, "spotcheck")
        which = pick.choice(len(named), size=n_params, replace=len(named) < n_params)
        names, analytic, numeric = [], [], []
        for k in which:
            name, p = named[int(k)]
            j = int(pick.integers(p.size))
            flat = p.data.reshape(-1)
            analytic.append(float(p.grad.reshape(-1)[j]))
            orig = flat[j]
            flat[j] = orig + eps
            fp = loss()
            flat[j] = orig - eps
            fm = loss()
            flat[j] = orig
            numeric.append((fp - fm) / (2 * eps))
            names.append(f"{name}[{j}]")
        a, n = np.array(analytic), np.array(numeric)
        return SpotCheck(names, a, n, relative_error(a, n))
