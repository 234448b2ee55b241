"""Minimal dense tensor library with reverse-mode autodiff."""

from . import nn, ops
from .core import (
    DimensionError,
    StaleTapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    default_dtype,
    get_default_dtype,
    grad_enabled,
    no_grad,
    reset_tape,
    set_default_dtype,
    tensor,
    zero_grads,
)

__all__ = [
    "DimensionError",
    "StaleTapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "current_tape",
    "default_dtype",
    "get_default_dtype",
    "grad_enabled",
    "nn",
    "no_grad",
    "ops",
    "reset_tape",
    "set_default_dtype",
    "tensor",
    "zero_grads",
]
