"""Full world-model assembly, objectives and training."""

from .config import ConfigError, ModelConfig, dump_config, load_config, parse_config_text, parse_overrides
from .losses import (change_targets, diversity_loss, event_contrastive_loss, jepa_loss, total_loss,
                     tracking_loss)
from .network import (HCLSM, CausalState, Perception, WorldOutput, build_model, forward, patch_embed,
                      patchify, perceive, run_dynamics)
from .optim import AdamW, clip_grad_norm, ema_update, lr_at
from .train import ClipSource, NumericalAbort, load_checkpoint, read_metrics, save_checkpoint, train

__all__ = [
    "AdamW", "CausalState", "ClipSource", "ConfigError", "HCLSM", "ModelConfig", "NumericalAbort", "Perception",
    "WorldOutput", "build_model", "change_targets", "clip_grad_norm", "diversity_loss", "dump_config",
    "ema_update", "event_contrastive_loss", "forward", "jepa_loss", "load_checkpoint", "load_config",
    "lr_at", "parse_config_text", "parse_overrides", "patch_embed", "patchify", "perceive", "read_metrics",
    "run_dynamics", "save_checkpoint", "total_loss", "tracking_loss", "train",
]
