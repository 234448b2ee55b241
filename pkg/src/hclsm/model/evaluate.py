"""Post-training evaluation and the file dumps behind ``eval`` and ``inspect``."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import worldgen
from ..sbd import segmentation_map
from ..structure import interaction_edge_weights
from ..tensor.core import Tensor, default_dtype, no_grad
from .config import ModelConfig
from .network import HCLSM, Perception, WorldOutput, forward


@dataclass
class EpisodeReport:
    seed: int | None
    ari_fg: float
    scores: np.ndarray  # [T]
    boundaries: list[int]
    collisions: list[int]
    event: dict[str, float]
    labels: np.ndarray  # [T, grid, grid]
    alpha: np.ndarray  # [T, N, grid, grid]
    slots: np.ndarray  # [T, N, d]
    alive: np.ndarray  # [T, N]
    edge_weights: np.ndarray  # [N, N]


def run_episode(model: HCLSM, ema: Perception, cfg: ModelConfig, ep: worldgen.Episode,
                action_scale: float | None = None) -> WorldOutput:
    scale = 10.0 / ep.frames.shape[-1] if action_scale is None else action_scale
    T = min(cfg.clip_len, ep.T)
    frames = ep.frames[None, :T].astype(cfg.dtype)
    actions = (ep.actions[None, :T] * scale).astype(cfg.dtype)
    with default_dtype(cfg.dtype), no_grad():
        return forward(model, ema, frames, actions, cfg.total_steps, cfg=cfg)


def upsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(labels, factor, axis=-2), factor, axis=-1)


def episode_report(model: HCLSM, ema: Perception, cfg: ModelConfig, ep: worldgen.Episode) -> EpisodeReport:
    out = run_episode(model, ema, cfg, ep)
    T = out.alpha.shape[1]
    g = cfg.grid
    alpha = out.alpha.data[0].reshape(T, cfg.n_max, g, g)
    labels = segmentation_map(alpha.reshape(T, cfg.n_max, g * g)).reshape(T, g, g)
    pix = upsample_labels(labels, cfg.patch)
    aris = [worldgen.ari(pix[t], ep.masks[t], ignore_background=True) for t in range(T)]
    aris = [a for a in aris if math.isfinite(a)]
    scores = out.dynamics.scores.data[0] if out.dynamics is not None else np.zeros(T)
    bounds = [int(b) for b in out.dynamics.trace.boundaries[0]] if out.dynamics is not None else []
    truth = [c for c in ep.collisions if c < T]
    with no_grad():
        mid = T // 2
        weights = interaction_edge_weights(Tensor(out.percept.slots.data[:, mid]), model.gnn)[0]
    return EpisodeReport(ep.seed, float(np.mean(aris)) if aris else float("nan"), scores, bounds, truth,
                         worldgen.event_f1(bounds, truth, tol=1), labels, alpha, out.percept.slots.data[0],
                         out.alive[0], weights)


def collision_score_gap(report: EpisodeReport) -> tuple[float, float] | None:
    """(mean score at collision frames, mean score elsewhere), frames 1..T-1; None without collisions."""
    T = len(report.scores)
    hit = np.zeros(T, dtype=bool)
    hit[[c for c in report.collisions if 1 <= c < T]] = True
    rest = ~hit
    rest[0] = False
    if not hit.any() or not rest.any():
        return None
    return float(report.scores[hit].mean()), float(report.scores[rest].mean())


def trajectory_pca(report: EpisodeReport, k: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """PCA of alive slot states over time; returns (rows of (t, slot), coords, explained ratios)."""
    T, N, _ = report.slots.shape
    tt, nn = np.nonzero(report.alive)
    if len(tt) < 2:
        tt, nn = np.meshgrid(np.arange(T), np.arange(N), indexing="ij")
        tt, nn = tt.reshape(-1), nn.reshape(-1)
    coords, ratio, _ = worldgen.pca_project(report.slots[tt, nn], k)
    return np.stack([tt, nn], axis=1), coords, ratio


def evaluate(model: HCLSM, ema: Perception, cfg: ModelConfig, episodes: list[worldgen.Episode]) -> dict:
    reports = [episode_report(model, ema, cfg, ep) for ep in episodes]
    aris = [r.ari_fg for r in reports if math.isfinite(r.ari_fg)]
    prec = float(np.mean([r.event["precision"] for r in reports]))
    rec = float(np.mean([r.event["recall"] for r in reports]))
    f1 = float(np.mean([r.event["f1"] for r in reports]))
    gaps = [g for g in (collision_score_gap(r) for r in reports) if g is not None]
    _, _, evr = trajectory_pca(reports[0])
    return {
        "ari_fg": float(np.mean(aris)) if aris else float("nan"),
        "event_precision": prec,
        "event_recall": rec,
        "event_f1": f1,
        "pca_evr": [float(x) for x in evr],
        "score_at_collision": float(np.mean([g[0] for g in gaps])) if gaps else float("nan"),
        "score_elsewhere": float(np.mean([g[1] for g in gaps])) if gaps else float("nan"),
        "episodes": len(reports),
        "_reports": reports,
    }


# ------------------------------------------------------------ writers


def write_pgm(path: Path, image: np.ndarray, maxval: int = 255) -> None:
    """Binary (P5) greyscale image."""
    img = np.asarray(image)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + img.astype(np.uint8).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_event_csv(path: Path, report: EpisodeReport) -> None:
    bset, cset = set(report.boundaries), set(report.collisions)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "score", "is_boundary", "is_true_collision"])
        for t, s in enumerate(report.scores):
            w.writerow([t, repr(float(s)), int(t in bset), int(t in cset)])


def write_pca_csv(path: Path, report: EpisodeReport) -> np.ndarray:
    rows, coords, ratio = trajectory_pca(report)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "slot", "pc1", "pc2"])
        for (t, n), (a, b) in zip(rows, coords):
            w.writerow([int(t), int(n), repr(float(a)), repr(float(b))])
    return ratio


def write_matrix_csv(path: Path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["dst"] + [f"src{j}" for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            w.writerow([i] + [repr(float(x)) for x in row])


def inspect_dump(report: EpisodeReport, out_dir: Path, frame: int = 0) -> list[Path]:
    """Per-slot alpha heatmaps, segmentation map, event trace and trajectory PCA (N_max + 3 files)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    alpha = report.alpha[frame]
    for n in range(alpha.shape[0]):
        p = out_dir / f"alpha_slot{n:02d}.pgm"
        write_pgm(p, np.round(np.clip(alpha[n], 0.0, 1.0) * 255))
        written.append(p)
    p = out_dir / "segmentation.pgm"
    write_pgm(p, report.labels[frame], maxval=max(1, alpha.shape[0] - 1))
    written.append(p)
    p = out_dir / "events.csv"
    write_event_csv(p, report)
    written.append(p)
    p = out_dir / "trajectory_pca.csv"
    write_pca_csv(p, report)
    written.append(p)
    return written
