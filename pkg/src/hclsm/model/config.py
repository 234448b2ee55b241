"""Model and training configuration with a flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path


class ConfigError(ValueError):
    """Bad key or value; ``line`` holds the offending text when it came from a file."""

    def __init__(self, message: str, line: str | None = None, lineno: int | None = None):
        super().__init__(message)
        self.line = line
        self.lineno = lineno


@dataclass
class ModelConfig:
    # widths
    d_model: int = 64
    d_world: int = 64
    d_slot: int = 64
    d_inner: int = 64
    d_state: int = 8
    heads: int = 4
    sbd_hidden: int = 64
    # structure
    n_max: int = 8
    slot_iters: int = 3
    # iterations on the first frame of a clip, where slots start from the prior; 0 means slot_iters
    slot_iters_first: int = 0
    n_summary: int = 4
    patch: int = 8
    image_size: int = 64
    channels: int = 3
    clip_len: int = 16
    birth_threshold: float = 0.3
    gnn_chunk: int = 16
    # protocol
    protocol: str = "two_stage"  # or "joint": Stage-2 objective from step 0
    stage_ratio: float = 0.4
    w_sbd_stage1: float = 5.0
    w_div_stage1: float = 0.1
    w_sbd_stage2: float = 1.0
    lambda_obj: float = 0.5
    lambda_causal: float = 0.01
    # gradient through the causal-graph loss: "on", "off", or "auto" (on only at float64)
    causal_enabled: str = "auto"
    event_target: str = "accel"  # or "change"
    al_every: int = 500
    ema_tau: float = 0.996
    # optimisation
    lr: float = 3e-4
    warmup: int = 100
    total_steps: int = 2000
    batch: int = 4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    # bookkeeping
    seed: int = 0
    dtype: str = "float64"
    checkpoint_every: int = 500
    workers: int = 1

    def __post_init__(self) -> None:
        self.causal_enabled = _onoff(self.causal_enabled)
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and f.name not in ("seed", "slot_iters_first") and v <= 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        if self.slot_iters_first < 0:
            raise ConfigError(f"slot_iters_first must be >= 0, got {self.slot_iters_first}")
        if not 0.0 < self.stage_ratio < 1.0:
            raise ConfigError(f"stage_ratio must lie strictly between 0 and 1, got {self.stage_ratio}")
        if self.protocol not in ("two_stage", "joint"):
            raise ConfigError(f"protocol must be two_stage or joint, got {self.protocol!r}")
        if self.event_target not in ("accel", "change"):
            raise ConfigError(f"event_target must be accel or change, got {self.event_target!r}")
        if self.causal_enabled not in ("on", "off", "auto"):
            raise ConfigError(f"causal_enabled must be on, off or auto, got {self.causal_enabled!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        for name in ("d_model", "d_slot", "d_world"):
            if getattr(self, name) % self.heads:
                raise ConfigError(f"{name}={getattr(self, name)} not divisible by heads={self.heads}")
        if not 0.0 <= self.ema_tau <= 1.0:
            raise ConfigError(f"ema_tau must be in [0, 1], got {self.ema_tau}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def stage1_steps(self) -> int:
        """Steps trained with the decomposition objective; 0 for the joint protocol."""
        if self.protocol == "joint":
            return 0
        # exact decimal arithmetic: 0.3 * 10 is 3.0000000000000004 in floats, which would add a step
        return math.ceil(Fraction(repr(self.stage_ratio)) * self.total_steps)

    @property
    def causal_active(self) -> bool:
        if self.causal_enabled == "auto":
            return self.dtype == "float64"
        return self.causal_enabled == "on"

    @property
    def first_frame_iters(self) -> int:
        return self.slot_iters_first or self.slot_iters

    def stage(self, step: int) -> int:
        return 1 if step < self.stage1_steps else 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


_FIELDS = {f.name: f for f in fields(ModelConfig)}


def _onoff(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    low = str(v).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return "on"
    if low in ("0", "false", "no", "off"):
        return "off"
    return low


def _coerce(name: str, raw: str):
    ftype = _FIELDS[name].type
    raw = raw.strip()
    if ftype == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw.strip("\"'")


def parse_overrides(pairs: dict[str, str] | list[str]) -> dict:
    """``["k=v", ...]`` or ``{k: v}`` with string values -> typed dict; unknown keys raise."""
    items = pairs.items() if isinstance(pairs, dict) else (p.split("=", 1) for p in pairs)
    out = {}
    for item in items:
        k, v = item if isinstance(item, tuple) else (item[0], item[1] if len(item) > 1 else "")
        k = k.strip()
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}", line=f"{k}={v}")
        try:
            out[k] = _coerce(k, str(v))
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {exc}", line=f"{k}={v}") from exc
    return out


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value", line=line, lineno=lineno)
        k, v = (s.strip() for s in body.split("=", 1))
        if k not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {k!r}", line=line, lineno=lineno)
        try:
            values[k] = _coerce(k, v)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {k}: {exc}", line=line, lineno=lineno) from exc
    return values


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ModelConfig:
    """File values first, then ``overrides`` (already typed) on top."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return ModelConfig(**values)


def dump_config(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
