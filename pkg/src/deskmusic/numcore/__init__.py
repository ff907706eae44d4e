"""Minimal numpy tensor library with reverse-mode autodiff and Adam."""

from . import nn, ops
from .gradcheck import check_gradients, numeric_grad
from .optim import Adam, LrSchedule, OptimState, adam_step, clip_grad_norm, lr_at
from .tensor import (
    BackwardError,
    NonFiniteError,
    NumcoreError,
    ShapeError,
    Tensor,
    backward,
    clear_tape,
    finite_checks,
    grad_enabled,
    no_grad,
    precision,
    tape_size,
    tensor,
)

__all__ = [
    "Adam",
    "BackwardError",
    "LrSchedule",
    "NonFiniteError",
    "NumcoreError",
    "OptimState",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "check_gradients",
    "clear_tape",
    "clip_grad_norm",
    "finite_checks",
    "grad_enabled",
    "lr_at",
    "nn",
    "no_grad",
    "numeric_grad",
    "ops",
    "precision",
    "tape_size",
    "tensor",
]
