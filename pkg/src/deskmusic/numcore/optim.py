"""Adam with bias correction, global-norm clipping and a linear warm-up schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    warmup_steps: int = 5000

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {self.warmup_steps}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warm-up from 0 to ``base_lr`` over ``warmup_steps``, constant afterwards."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if schedule.warmup_steps == 0:
        return schedule.base_lr
    return schedule.base_lr * min(1.0, step / schedule.warmup_steps)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        return [g * scale for g in grads], norm
    return list(grads), norm


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: OptimState,
    lr: float,
    clip_norm: float | None = 1.0,
) -> float:
    """Update ``params`` in place and advance ``state``; returns the pre-clip gradient norm.

    A missing gradient is treated as zero. Any non-finite gradient rejects the
    whole step before touching parameters or moments.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state have different lengths")
    gs = []
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        gs.append(g)
    for g in gs:
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient; optimizer step rejected")
    norm = global_norm(gs)
    if clip_norm and norm > clip_norm:
        scale = clip_norm / (norm + 1e-12)
        gs = [g * scale for g in gs]

    state.t += 1
    t = state.t
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for p, g, m, v in zip(params, gs, state.m, state.v):
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + EPS)
        p.data = (p.data - lr * update).astype(p.dtype, copy=False)
    return norm


@dataclass
class Adam:
    """Stateful wrapper: reads ``p.grad`` from each parameter and steps on a schedule."""

    params: list[Tensor]
    schedule: LrSchedule = field(default_factory=LrSchedule)
    clip_norm: float | None = 1.0
    state: OptimState = None  # type: ignore[assignment]

    def __post_init__(self):
        self.params = list(self.params)
        if self.state is None:
            self.state = OptimState.zeros_like(self.params)

    @property
    def step_count(self) -> int:
        return self.state.t

    def current_lr(self) -> float:
        # step t+1 is about to run; warm-up index starts at 1 so the first update is non-zero
        return lr_at(self.schedule, self.state.t + 1)

    def step(self) -> float:
        norm = adam_step(self.params, [p.grad for p in self.params], self.state, self.current_lr(), self.clip_norm)
        for p in self.params:
            p.grad = None
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
