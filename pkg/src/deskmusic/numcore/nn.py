"""Parameter containers and the handful of layers the models share."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype


class Module:
    """Holds trainable tensors and child modules as plain attributes.

    Parameter names follow attribute paths (``enc.layers.0.weight``), which is
    also the naming used in checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != parameter shape {p.shape}")
            p.data = np.ascontiguousarray(value, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    bound = gain * math.sqrt(3.0 / max(fan_in, 1))
    return param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, gain: float = 1.0):
        self.weight = uniform_init(rng, (d_in, d_out), d_in, gain)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = param(rng.normal(0.0, std, size=(n, d)))

    def __call__(self, ids) -> Tensor:
        return ops.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.weight = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self._eps = eps

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self._eps)


class Conv1d(Module):
    """Channels-first conv. The default padding splits ``kernel - stride`` so ``L // stride`` frames come out when the stride divides ``L``."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding=None, gain: float = 1.0, bias: bool = True):
        self.weight = uniform_init(rng, (c_out, c_in, kernel), c_in * kernel, gain)
        self.bias = param(np.zeros(c_out)) if bias else None
        self._stride = stride
        if padding is None:
            total = kernel - stride
            padding = (total // 2, total - total // 2)
        self._padding = padding

    def __call__(self, x) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class ConvTranspose1d(Module):
    """Upsampling by ``stride``; the default crop yields exactly ``L * stride`` samples."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 crop=None, gain: float = 1.0, bias: bool = True):
        self.weight = uniform_init(rng, (c_in, c_out, kernel), c_in * kernel // max(stride, 1), gain)
        self.bias = param(np.zeros(c_out)) if bias else None
        self._stride = stride
        if crop is None:
            total = kernel - stride
            crop = (total // 2, total - total // 2)
        self._crop = crop

    def __call__(self, x) -> Tensor:
        return ops.conv_transpose1d(x, self.weight, self.bias, stride=self._stride, crop=self._crop)
