"""Two-stage training loop with metrics CSV, atomic checkpoints and resume."""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import rng as seeds
from .. import worldgen
from ..structure import augmented_lagrangian_step
from ..tensor import io as hct
from ..tensor.core import backward, default_dtype, reset_tape
from .config import ConfigError, ModelConfig
from .network import CausalState, HCLSM, Perception, build_model, forward
from .optim import AdamW, clip_grad_norm, ema_update, lr_at

METRIC_COLUMNS = ("step", "stage", "lr", "total", "jepa", "sbd", "diversity", "tracking", "event",
                  "sparsity", "dag_h", "causal", "alive", "events", "grad_norm")
LOSS_PARTS = ("total", "jepa", "sbd", "diversity", "tracking", "event", "sparsity", "dag_h", "causal")


class NumericalAbort(RuntimeError):
    """A loss part went non-finite; ``dump_path`` holds the diagnostic JSON."""

    def __init__(self, message: str, dump_path: Path | None = None, diagnostics: dict | None = None):
        super().__init__(message)
        self.dump_path = dump_path
        self.diagnostics = diagnostics or {}


# ------------------------------------------------------------ data


@dataclass
class ClipSource:
    frames: np.ndarray  # [E, T_ep, C, H, W]
    actions: np.ndarray  # [E, T_ep, 2]
    action_scale: float

    @classmethod
    def from_episodes(cls, episodes: list[worldgen.Episode]) -> "ClipSource":
        frames = np.stack([e.frames for e in episodes])
        actions = np.stack([e.actions for e in episodes])
        size = frames.shape[-1]
        return cls(frames, actions, 10.0 / size)

    def batch(self, cfg: ModelConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
        rng = seeds.split(cfg.seed, "batch", step)
        E, T_ep = self.frames.shape[:2]
        take = min(cfg.clip_len, T_ep)
        idx = rng.integers(0, E, size=cfg.batch)
        start = rng.integers(0, T_ep - take + 1, size=cfg.batch)
        fr = np.stack([self.frames[i, s: s + take] for i, s in zip(idx, start)])
        ac = np.stack([self.actions[i, s: s + take] for i, s in zip(idx, start)]) * self.action_scale
        return fr.astype(cfg.dtype), ac.astype(cfg.dtype)


def load_source(dataset: str | os.PathLike, cfg: ModelConfig, split: str = "train") -> ClipSource:
    episodes = worldgen.load_split(dataset, split)
    if not episodes:
        raise ConfigError(f"dataset split {split!r} under {dataset} is empty")
    C, H, W = episodes[0].frames.shape[1:]
    if (C, H) != (cfg.channels, cfg.image_size) or H != W:
        raise ConfigError(f"dataset frames are {C}x{H}x{W} but config expects "
                          f"{cfg.channels}x{cfg.image_size}x{cfg.image_size}")
    return ClipSource.from_episodes(episodes)


# ------------------------------------------------------------ checkpoints


def _safe(name: str) -> str:
    return name.replace("/", "__")


def save_checkpoint(root: Path, step: int, cfg: ModelConfig, model: HCLSM, ema: Perception, opt: AdamW,
                    causal: CausalState, metrics: dict | None = None) -> Path:
    """Write ``ckpt_<step>`` through a temp directory and an atomic rename, then repoint ``latest``."""
    root.mkdir(parents=True, exist_ok=True)
    final = root / f"ckpt_{step:07d}"
    tmp = root / f".tmp_ckpt_{step:07d}"
    if tmp.exists():
        shutil.rmtree(tmp)
    for sub, state in (("model", model.state_dict()), ("ema", ema.state_dict()), ("optim", opt.state())):
        (tmp / sub).mkdir(parents=True)
        for k, v in state.items():
            hct.save(tmp / sub / f"{_safe(k)}.hct", np.asarray(v))
    manifest = {
        "step": step,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "causal": {"lagrange_lambda": causal.lagrange_lambda, "penalty_rho": causal.penalty_rho,
                   "last_h": None if math.isinf(causal.last_h) else causal.last_h},
        "metrics": metrics or {},
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    pointer = root / "latest.tmp"
    pointer.write_text(final.name)
    os.replace(pointer, root / "latest")
    return final


def _load_dir(d: Path) -> dict[str, np.ndarray]:
    return {p.stem.replace("__", "/"): hct.load(p) for p in sorted(d.glob("*.hct"))}


def resolve_checkpoint(path: str | os.PathLike) -> Path:
    p = Path(path)
    if (p / "manifest.json").exists():
        return p
    if (p / "latest").exists():
        return p / (p / "latest").read_text().strip()
    if (p / "checkpoints" / "latest").exists():
        return resolve_checkpoint(p / "checkpoints")
    raise FileNotFoundError(f"no checkpoint under {p}")


def read_manifest(ckpt: str | os.PathLike) -> dict:
    return json.loads((resolve_checkpoint(ckpt) / "manifest.json").read_text())


def load_checkpoint(ckpt: str | os.PathLike, cfg: ModelConfig | None = None):
    """Returns (cfg, model, ema, opt, causal, step). A passed ``cfg`` must match the saved one."""
    d = resolve_checkpoint(ckpt)
    manifest = json.loads((d / "manifest.json").read_text())
    saved = ModelConfig(**manifest["config"])
    if cfg is not None and _arch(cfg) != _arch(saved):
        raise ConfigError(f"checkpoint {d} was trained with a different architecture")
    cfg = cfg or saved
    with default_dtype(cfg.dtype):
        model, ema = build_model(cfg)
        model.load_state_dict(_load_dir(d / "model"))
        ema.load_state_dict(_load_dir(d / "ema"))
        opt = make_optimizer(model, cfg)
        opt.load_state(_load_dir(d / "optim"))
    c = manifest["causal"]
    causal = CausalState(c["lagrange_lambda"], c["penalty_rho"], math.inf if c["last_h"] is None else c["last_h"])
    return cfg, model, ema, opt, causal, int(manifest["step"])


_ARCH_KEYS = ("d_model", "d_world", "d_slot", "d_inner", "d_state", "heads", "sbd_hidden", "n_max", "n_summary",
              "patch", "image_size", "channels", "clip_len", "dtype")


def _arch(cfg: ModelConfig) -> tuple:
    return tuple(getattr(cfg, k) for k in _ARCH_KEYS)


def make_optimizer(model: HCLSM, cfg: ModelConfig) -> AdamW:
    return AdamW(list(model.named_parameters()), betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


# ------------------------------------------------------------ metrics


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class MetricsLog:
    """Append-only CSV; reopening truncates rows past ``keep_through`` (resume)."""

    def __init__(self, path: Path, keep_through: int | None = None):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = []
        if path.exists() and keep_through is not None:
            lines = path.read_text().splitlines()
            rows = [ln for ln in lines[1:] if ln and int(ln.split(",", 1)[0]) <= keep_through]
        with open(path, "w") as f:
            f.write(",".join(METRIC_COLUMNS) + "\n")
            for ln in rows:
                f.write(ln + "\n")

    def append(self, row: dict) -> None:
        with open(self.path, "a") as f:
            f.write(",".join(format_value(row[c]) for c in METRIC_COLUMNS) + "\n")


def read_metrics(path: str | os.PathLike) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split(",")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:] if ln], dtype=np.float64)
    if data.size == 0:
        return {h: np.zeros(0) for h in head}
    return {h: data[:, i] for i, h in enumerate(head)}


# ------------------------------------------------------------ loop


@dataclass
class TrainResult:
    out_dir: Path
    metrics_path: Path
    checkpoint: Path
    steps_run: int
    last_metrics: dict


def _diagnose(out, model: HCLSM, step: int) -> dict:
    parts = {k: float(v.data) for k, v in out.parts.items()}
    bad = [k for k, v in parts.items() if not math.isfinite(v)]
    norms = {}
    for name, p in model.named_parameters():
        finite = bool(np.isfinite(p.data).all())
        if not finite:
            norms[name] = "non-finite"
    return {"step": step, "non_finite_parts": bad, "parts": {k: repr(v) for k, v in parts.items()},
            "non_finite_params": norms, "alive": out.stats.get("alive"), "events": out.stats.get("events")}


def train(cfg: ModelConfig, dataset: str | os.PathLike | ClipSource, out_dir: str | os.PathLike,
          resume: bool = True, log=None, stop_at: int | None = None) -> TrainResult:
    """Run ``cfg.total_steps`` steps; resumes from ``out_dir/checkpoints/latest`` when present.

    ``stop_at`` ends the loop early (after step ``stop_at - 1``, which is checkpointed) without
    touching the schedule, so a later call picks up exactly where this one left off.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck_root = out / "checkpoints"
    metrics_path = out / "metrics.csv"
    source = dataset if isinstance(dataset, ClipSource) else load_source(dataset, cfg)

    with default_dtype(cfg.dtype):
        start = 0
        if resume and (ck_root / "latest").exists():
            _, model, ema, opt, causal, done = load_checkpoint(ck_root, cfg)
            start = done + 1
            log_file = MetricsLog(metrics_path, keep_through=done)
        else:
            model, ema = build_model(cfg)
            opt = make_optimizer(model, cfg)
            causal = CausalState()
            log_file = MetricsLog(metrics_path)

        last: dict = {}
        ckpt = resolve_checkpoint(ck_root) if start else None
        end = cfg.total_steps if stop_at is None else min(cfg.total_steps, stop_at)
        for step in range(start, end):
            frames, actions = source.batch(cfg, step)
            lr = lr_at(step, cfg.lr, cfg.warmup, cfg.total_steps)
            reset_tape()
            result = forward(model, ema, frames, actions, step, causal, cfg)
            values = {k: float(v.data) for k, v in result.parts.items()}
            if not all(math.isfinite(v) for v in values.values()):
                diag = _diagnose(result, model, step)
                dump = out / f"nan_dump_step{step}.json"
                dump.write_text(json.dumps(diag, indent=2, sort_keys=True))
                raise NumericalAbort(f"non-finite loss at step {step}: {diag['non_finite_parts']}", dump, diag)
            backward(result.total)
            gnorm = clip_grad_norm(opt.params, cfg.grad_clip)
            if not math.isfinite(gnorm):
                diag = _diagnose(result, model, step)
                diag["grad_norm"] = repr(gnorm)
                dump = out / f"nan_dump_step{step}.json"
                dump.write_text(json.dumps(diag, indent=2, sort_keys=True))
                raise NumericalAbort(f"non-finite gradient norm at step {step}", dump, diag)
            opt.step(lr)
            opt.zero_grad()
            ema_update(ema, model.perception, cfg.ema_tau)
            stage = cfg.stage(step)
            if stage == 2 and cfg.causal_active and (step - cfg.stage1_steps + 1) % cfg.al_every == 0:
                g = causal.graph(model.causal_logits, 1.0)
                augmented_lagrangian_step(g, values["dag_h"])
                causal.absorb(g)
            last = {"step": step, "stage": stage, "lr": lr, **{k: values[k] for k in LOSS_PARTS},
                    "alive": result.stats["alive"], "events": result.stats["events"], "grad_norm": gnorm}
            log_file.append(last)
            if log is not None:
                log(last)
            if (step + 1) % cfg.checkpoint_every == 0 or step == end - 1:
                ckpt = save_checkpoint(ck_root, step, cfg, model, ema, opt, causal,
                                       {k: repr(float(v)) for k, v in last.items()})
        if ckpt is None:
            ckpt = save_checkpoint(ck_root, max(start - 1, 0), cfg, model, ema, opt, causal, {})
    return TrainResult(out, metrics_path, ckpt, max(0, end - start), last)
