"""Synthetic bouncing-shapes videos with exact ground truth, plus the metrics
used to score decomposition (ARI), event detection (F1) and latent
trajectories (PCA)."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import io as hct

BACKGROUND = (0.1, 0.1, 0.1)
PALETTE = (
    (0.95, 0.25, 0.2),
    (0.2, 0.8, 0.3),
    (0.25, 0.45, 0.95),
    (0.95, 0.85, 0.2),
    (0.85, 0.3, 0.85),
    (0.2, 0.85, 0.9),
)
SHAPES = ("circle", "square", "triangle")


@dataclass
class WorldConfig:
    n_objects: int | tuple[int, int] = (2, 4)
    size: int = 64
    T: int = 16
    shapes: tuple[str, ...] = SHAPES
    speed: tuple[float, float] = (0.0, 0.6)
    radius: tuple[float, float] = (0.09, 0.14)  # fraction of frame size
    pusher_speed: float = 0.05  # fraction of frame size per step

    def sample_count(self, rng: np.random.Generator) -> int:
        if isinstance(self.n_objects, int):
            return self.n_objects
        lo, hi = self.n_objects
        return int(rng.integers(lo, hi + 1))


@dataclass
class Body:
    shape: str
    pos: np.ndarray  # (x, y) pixel centre
    vel: np.ndarray  # pixels / step
    radius: float
    color: tuple[float, float, float]


@dataclass
class Episode:
    frames: np.ndarray  # [T, C, H, W] float32 in [0, 1]
    masks: np.ndarray  # [T, H, W] int32, 0 = background, k = object k-1
    collisions: list[int]
    actions: np.ndarray  # [T, 2] pusher displacement from t to t+1
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.frames.shape[0]


# ------------------------------------------------------------ simulation


def _contact(a: Body, b: Body) -> tuple[bool, np.ndarray]:
    delta = b.pos - a.pos
    dist = float(np.hypot(*delta))
    n = delta / dist if dist > 0 else np.array([1.0, 0.0])
    return dist <= a.radius + b.radius, n


def _reflect_walls(body: Body, size: int) -> bool:
    hit = False
    for axis in range(2):
        lo, hi = body.radius, size - 1 - body.radius
        if body.pos[axis] < lo:
            body.pos[axis] = 2 * lo - body.pos[axis]
            body.vel[axis] = abs(body.vel[axis])
            hit = True
        elif body.pos[axis] > hi:
            body.pos[axis] = 2 * hi - body.pos[axis]
            body.vel[axis] = -abs(body.vel[axis])
            hit = True
    return hit


def simulate(bodies: Sequence[Body], actions: np.ndarray | None, T: int, size: int,
             pusher: int | None = 0) -> tuple[list[list[Body]], list[int]]:
    """Step the scene T-1 times. Returns per-frame body snapshots and collision frames.

    Body ``pusher`` is actuated: its velocity is overwritten by ``actions[t]``
    before it moves from frame t to t+1, and it is clipped (not reflected) at
    the walls. Everything else keeps its velocity and bounces elastically off
    walls. Touching pairs exchange the normal component of their velocity
    (equal masses) when approaching. A contact event is recorded at the frame
    where an approaching pair first touches; a pair that stays in contact
    (a body being pushed along) is not counted again until it separates.
    """
    bodies = [Body(b.shape, np.array(b.pos, float), np.array(b.vel, float), b.radius, b.color) for b in bodies]
    actions = np.zeros((T, 2)) if actions is None or len(actions) == 0 else np.asarray(actions, float)
    frames = [_snapshot(bodies)]
    collisions: set[int] = set()
    touching_before: set[tuple[int, int]] = set()
    for t in range(T - 1):
        touching_now: set[tuple[int, int]] = set()
        for i, b in enumerate(bodies):
            if i == pusher:
                b.vel = actions[t].copy()
            b.pos = b.pos + b.vel
            if i == pusher:
                lo, hi = b.radius, size - 1 - b.radius
                b.pos = np.clip(b.pos, lo, hi)
            elif _reflect_walls(b, size):
                collisions.add(t + 1)
        for i in range(len(bodies)):
            for j in range(i + 1, len(bodies)):
                a, b = bodies[i], bodies[j]
                touching, n = _contact(a, b)
                if not touching:
                    continue
                touching_now.add((i, j))
                approach = float(np.dot(b.vel - a.vel, n))
                if approach >= 0:
                    continue
                if (i, j) not in touching_before:
                    collisions.add(t + 1)
                # bounce inside the step: the part of the move made after
                # contact is replayed with the new velocities
                pen = a.radius + b.radius - float(np.hypot(*(b.pos - a.pos)))
                frac = min(max(pen / -approach, 0.0), 1.0)
                a.vel = a.vel + approach * n
                b.vel = b.vel - approach * n
                a.pos = a.pos + approach * n * frac
                b.pos = b.pos - approach * n * frac
        # contact resolution can shove a body past a wall; enforce the walls again
        for i, b in enumerate(bodies):
            if i == pusher:
                b.pos = np.clip(b.pos, b.radius, size - 1 - b.radius)
            elif _reflect_walls(b, size):
                collisions.add(t + 1)
        touching_before = touching_now
        frames.append(_snapshot(bodies))
    return frames, sorted(c for c in collisions if 1 <= c <= T - 1)


def _snapshot(bodies: Sequence[Body]) -> list[Body]:
    return [Body(b.shape, b.pos.copy(), b.vel.copy(), b.radius, b.color) for b in bodies]


# ------------------------------------------------------------ rendering


def _shape_mask(shape: str, pos: np.ndarray, radius: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dx, dy = xx - pos[0], yy - pos[1]
    if shape == "circle":
        return dx * dx + dy * dy <= radius * radius
    if shape == "square":
        half = radius / math.sqrt(2.0)
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if shape == "triangle":
        # upright equilateral triangle inscribed in the bounding circle
        return (dy <= radius / 2) & (np.abs(dx) <= (dy + radius) / math.sqrt(3.0))
    raise ValueError(f"unknown shape {shape!r}")


def render(bodies: Sequence[Body], size: int) -> tuple[np.ndarray, np.ndarray]:
    img = np.empty((3, size, size), dtype=np.float32)
    img[:] = np.array(BACKGROUND, dtype=np.float32)[:, None, None]
    mask = np.zeros((size, size), dtype=np.int32)
    for k, b in enumerate(bodies):
        m = _shape_mask(b.shape, b.pos, b.radius, size)
        img[:, m] = np.array(b.color, dtype=np.float32)[:, None]
        mask[m] = k + 1
    return img, mask


# ------------------------------------------------------------ episodes


def _pusher_actions(bodies: list[Body], T: int, speed: float, rng: np.random.Generator) -> np.ndarray:
    """Open-loop pusher plan: head for a random other object until just past
    the expected contact, then veer off by 90-180 degrees so the target is not
    pinned against a wall."""
    if len(bodies) < 2:
        return np.zeros((T, 2))
    target = bodies[int(rng.integers(1, len(bodies)))]
    heading = target.pos - bodies[0].pos
    dist = float(np.hypot(*heading))
    heading = heading / (dist + 1e-9)
    reach = int(math.ceil(max(dist - bodies[0].radius - target.radius, 0.0) / max(speed, 1e-9))) + 1
    turn = rng.uniform(0.5 * math.pi, math.pi) * rng.choice([-1.0, 1.0])
    c, s = math.cos(turn), math.sin(turn)
    away = np.array([c * heading[0] - s * heading[1], s * heading[0] + c * heading[1]])
    acts = []
    for t in range(T):
        d = (heading if t < reach else away) + rng.normal(0.0, 0.1, 2)
        acts.append(d / (np.hypot(*d) + 1e-9) * speed)
    return np.array(acts)


def _place(rng: np.random.Generator, n: int, cfg: WorldConfig) -> list[Body]:
    size = cfg.size
    colors = rng.permutation(len(PALETTE))[:n]
    bodies: list[Body] = []
    for k in range(n):
        for _ in range(1000):
            r = rng.uniform(*cfg.radius) * size
            pos = rng.uniform(r + 1, size - 2 - r, 2)
            if all(np.hypot(*(pos - o.pos)) > r + o.radius + 2 for o in bodies):
                break
        speed = rng.uniform(*cfg.speed) if k else 0.0
        ang = rng.uniform(0, 2 * math.pi)
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        bodies.append(Body(shape, pos, speed * np.array([math.cos(ang), math.sin(ang)]), r,
                           PALETTE[int(colors[k])]))
    return bodies


def gen_episode(config: WorldConfig | None = None, seed: int = 0) -> Episode:
    cfg = config or WorldConfig()
    rng = np.random.default_rng(seed)
    n = cfg.sample_count(rng)
    if n < 1:
        raise ValueError("an episode needs at least one object")
    bodies = _place(rng, n, cfg)
    actions = _pusher_actions(bodies, cfg.T, cfg.pusher_speed * cfg.size, rng)
    return episode_from_bodies(bodies, actions, cfg.T, cfg.size, seed=seed)


def episode_from_bodies(bodies: Sequence[Body], actions: np.ndarray | None, T: int, size: int,
                        seed: int | None = None, pusher: int | None = 0) -> Episode:
    snaps, collisions = simulate(bodies, actions, T, size, pusher=pusher)
    frames, masks = zip(*(render(s, size) for s in snaps))
    acts = np.zeros((T, 2)) if actions is None or len(actions) == 0 else np.asarray(actions, float)
    return Episode(np.stack(frames), np.stack(masks), collisions, acts.astype(np.float32), seed,
                   {"n_objects": len(bodies), "shapes": [b.shape for b in bodies]})


# ------------------------------------------------------------ dataset files


def save_episode(ep: Episode, directory: str | os.PathLike, config: WorldConfig | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    hct.save(d / "frames.hct", ep.frames.astype(np.float32))
    hct.save(d / "masks.hct", ep.masks.astype(np.int32))
    hct.save(d / "actions.hct", ep.actions.astype(np.float32))
    hct.save(d / "collisions.hct", np.asarray(ep.collisions, dtype=np.int64))
    manifest = {"seed": ep.seed, "collisions": list(map(int, ep.collisions)), **ep.meta}
    if config is not None:
        manifest["config"] = asdict(config)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_episode(directory: str | os.PathLike) -> Episode:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    return Episode(hct.load(d / "frames.hct"), hct.load(d / "masks.hct"),
                   [int(c) for c in hct.load(d / "collisions.hct")], hct.load(d / "actions.hct"),
                   manifest.get("seed"), {k: v for k, v in manifest.items() if k not in ("seed", "collisions")})


def write_dataset(out: str | os.PathLike, episodes: int = 256, config: WorldConfig | None = None,
                  seed0: int = 0, train_fraction: float = 0.8) -> Path:
    """One directory per episode plus ``dataset.json``; the first 80% of seeds form the train split."""
    cfg = config or WorldConfig()
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    n_train = int(round(episodes * train_fraction))
    names = []
    for i in range(episodes):
        seed = seed0 + i
        name = f"ep_{seed:06d}"
        save_episode(gen_episode(cfg, seed), root / name, cfg)
        names.append(name)
    index = {"config": asdict(cfg), "seed0": seed0, "train": names[:n_train], "eval": names[n_train:]}
    (root / "dataset.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return root


def dataset_index(root: str | os.PathLike) -> dict:
    return json.loads((Path(root) / "dataset.json").read_text())


def load_split(root: str | os.PathLike, split: str = "train") -> list[Episode]:
    idx = dataset_index(root)
    return [load_episode(Path(root) / name) for name in idx[split]]


def config_from_dict(d: dict) -> WorldConfig:
    d = dict(d)
    for k in ("speed", "radius", "shapes"):
        if k in d:
            d[k] = tuple(d[k])
    if isinstance(d.get("n_objects"), list):
        d["n_objects"] = tuple(d["n_objects"])
    return WorldConfig(**d)


# ------------------------------------------------------------ metrics


def _comb2(x: np.ndarray) -> np.ndarray | float:
    return x * (x - 1) / 2.0


def ari(pred: np.ndarray, true: np.ndarray, ignore_background: bool = False) -> float:
    """Adjusted Rand index by pair counting. With ``ignore_background`` positions labelled 0 in
    ``true`` are dropped first (foreground ARI); NaN if fewer than two positions remain."""
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"label maps differ in size: {pred.shape} vs {true.shape}")
    if ignore_background:
        keep = true != 0
        pred, true = pred[keep], true[keep]
    n = pred.size
    if n < 2:
        return float("nan") if ignore_background else 1.0
    _, ti = np.unique(true, return_inverse=True)
    _, pi = np.unique(pred, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    index = _comb2(table.astype(float)).sum()
    a = _comb2(table.sum(axis=1).astype(float)).sum()
    b = _comb2(table.sum(axis=0).astype(float)).sum()
    expected = a * b / _comb2(float(n))
    top = 0.5 * (a + b)
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


def event_f1(pred: Sequence[int], truth: Sequence[int], tol: int = 1) -> dict[str, float]:
    """Greedy one-to-one matching within ``tol`` frames.

    Each predicted boundary (in time order) takes the closest unmatched true
    event, the earlier one on ties. Empty prediction *and* empty truth count
    as a perfect score; otherwise empty sides give zero.
    """
    pred = sorted(int(p) for p in pred)
    truth = sorted(int(t) for t in truth)
    if not pred and not truth:
        return {"precision": 1.0, "recall": 1.0, "f1": 1.0}
    used = [False] * len(truth)
    hits = 0
    for p in pred:
        best, best_d = None, None
        for i, t in enumerate(truth):
            d = abs(p - t)
            if not used[i] and d <= tol and (best_d is None or d < best_d):
                best, best_d = i, d
        if best is not None:
            used[best] = True
            hits += 1
    precision = hits / len(pred) if pred else 0.0
    recall = hits / len(truth) if truth else 0.0
    f1 = 0.0 if hits == 0 else 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1}


def jacobi_eigh(S: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix by cyclic Jacobi rotations, sorted descending."""
    A = np.array(S, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(max_sweeps):
        scale = max(np.abs(A).max(initial=0.0), 1e-300)
        Z = A / scale  # scaled copy so the squares cannot overflow
        off = np.sqrt(max((Z * Z).sum() - (np.diag(Z) ** 2).sum(), 0.0))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                diff = A[q, q] - A[p, p]
                if abs(apq) < 1e-150 * abs(diff):
                    t = apq / diff  # theta would overflow; first-order rotation
                else:
                    theta = diff / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p], A[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :], A[q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def pca_project(states: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project onto the top-k principal axes.

    Returns (coords [S, k], explained-variance ratios [k], components [d, k]).
    Each component is signed so its largest-magnitude entry is positive.
    """
    X = np.asarray(states, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("pca needs a [S, d] array with S >= 2")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    w, V = jacobi_eigh(cov)
    w = np.clip(w, 0.0, None)
    for j in range(V.shape[1]):
        if V[np.argmax(np.abs(V[:, j])), j] < 0:
            V[:, j] = -V[:, j]
    total = w.sum()
    ratio = w / total if total > 0 else np.zeros_like(w)
    comps = V[:, :k]
    return Xc @ comps, ratio[:k], comps
