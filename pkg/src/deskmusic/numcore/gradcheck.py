"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, clear_tape, no_grad, precision


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. ``arrays[index]`` (evaluated in float64)."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    with precision(np.float64), no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*[Tensor(a) for a in base]).item()
            flat[i] = orig - h
            fm = fn(*[Tensor(a) for a in base]).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], wrt: Sequence[int]) -> list[np.ndarray]:
    with precision(np.float64):
        ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
        clear_tape()
        out = fn(*ts)
        backward(out)
    return [ts[i].grad if ts[i].grad is not None else np.zeros_like(ts[i].data) for i in wrt]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def check_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    wrt: Sequence[int] | None = None,
    h: float = 1e-3,
) -> float:
    """Largest norm-wise relative error between tape and finite-difference gradients."""
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    analytic = analytic_grads(fn, arrays, wrt)
    worst = 0.0
    for idx, ga in zip(wrt, analytic):
        worst = max(worst, relative_error(ga, numeric_grad(fn, arrays, idx, h)))
    return worst
