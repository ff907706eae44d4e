"""Super-resolution flow matching from 75 Hz semantic tokens to 150 Hz acoustic latents.

Training uses the linear path x_t = (1 - t) x0 + t x1 with noise x0 and the
constant velocity target x1 - x0. Sampling integrates the learned velocity
from t = 0 to 1 with fixed Euler or midpoint steps, optionally mixing the
conditional and null-condition velocities for guidance.

Each token embedding is repeated twice and a learned parity vector marks the
even and odd frame, so the conditioning lands exactly on the latent grid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import numcore as nc
from .numcore import Tensor, nn, ops

UPSAMPLE = 2
CFG_DROP_PROB = 0.7
SWEEP_CFG = (3.0, 5.0, 7.0, 10.0)
SOLVERS = ("euler", "midpoint")


class SrfmError(ValueError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    latent_dim: int = 64
    cond_vocab: int = 256
    width: int = 128
    n_blocks: int = 3
    kernel: int = 5
    time_features: int = 32

    def __post_init__(self) -> None:
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise SrfmError(f"kernel must be odd and positive, got {self.kernel}")
        if self.time_features % 2:
            raise SrfmError("time_features must be even")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FlowConfig":
        return cls(**d)


DESK_FLOW = FlowConfig()
FULL_FLOW = FlowConfig(latent_dim=1024, cond_vocab=4096, width=1024, n_blocks=8)


@dataclass(frozen=True)
class OdeParams:
    steps: int = 10
    solver: str = "euler"
    cfg_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise SrfmError(f"steps must be >= 1, got {self.steps}")
        if self.solver not in SOLVERS:
            raise SrfmError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.cfg_scale < 0:
            raise SrfmError("cfg_scale must be >= 0")


def upsample_tokens(codes: np.ndarray) -> np.ndarray:
    """Repeat each token along the last axis so n tokens cover 2n latent frames."""
    return np.repeat(np.asarray(codes, dtype=np.int64), UPSAMPLE, axis=-1)


def time_features(t: np.ndarray, n: int) -> np.ndarray:
    """Sinusoidal features (B, n) of t in [0, 1]."""
    half = n // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1)) * 1000.0
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class FlowBlock(nn.Module):
    def __init__(self, width: int, kernel: int, rng: np.random.Generator):
        self.norm = nn.LayerNorm(width)
        self.film = nn.Linear(width, 2 * width, rng, gain=0.1)
        self.conv = nn.Conv1d(width, width, kernel, rng, padding=kernel // 2)
        self.proj = nn.Linear(width, width, rng, gain=0.5)

    def __call__(self, h: Tensor, temb: Tensor) -> Tensor:
        w = h.shape[-1]
        film = ops.expand_dims(self.film(temb), 1)  # (B, 1, 2W)
        x = self.norm(h) * (ops.getitem(film, (slice(None), slice(None), slice(0, w))) + 1.0)
        x = x + ops.getitem(film, (slice(None), slice(None), slice(w, 2 * w)))
        x = ops.transpose(self.conv(ops.transpose(x, (0, 2, 1))), (0, 2, 1))
        return h + self.proj(ops.gelu(x))


class FlowNet(nn.Module):
    """Velocity field v(x_t, t, cond) over (B, frames, latent_dim)."""

    def __init__(self, cfg: FlowConfig = DESK_FLOW, seed: int = 0):
        rng = np.random.default_rng(seed)
        w = cfg.width
        self.inp = nn.Linear(cfg.latent_dim, w, rng)
        self.cond = nn.Embedding(cfg.cond_vocab + 1, w, rng)  # last row is the null condition
        self.parity = nn.Embedding(UPSAMPLE, w, rng)
        self.t1 = nn.Linear(cfg.time_features, w, rng)
        self.t2 = nn.Linear(w, w, rng)
        self.blocks = [FlowBlock(w, cfg.kernel, rng) for _ in range(cfg.n_blocks)]
        self.norm = nn.LayerNorm(w)
        self.out = nn.Linear(w, cfg.latent_dim, rng, gain=0.1)
        # data normalization, fitted once by the trainer and excluded from the optimizer
        self.latent_mean = nn.param(np.zeros(cfg.latent_dim))
        self.latent_std = nn.param(np.ones(cfg.latent_dim))
        self._cfg = cfg

    @property
    def config(self) -> FlowConfig:
        return self._cfg

    @property
    def null_id(self) -> int:
        return self._cfg.cond_vocab

    def trainable(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if not name.startswith("latent_")]

    def cond_ids(self, codes: np.ndarray | None, batch: int, frames: int) -> np.ndarray:
        """Frame-rate condition ids (B, frames); ``None`` gives the null condition."""
        if codes is None:
            return np.full((batch, frames), self.null_id, np.int64)
        codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
        if codes.size and (codes.min() < 0 or codes.max() >= self._cfg.cond_vocab):
            raise SrfmError(f"condition token outside [0, {self._cfg.cond_vocab})")
        ids = upsample_tokens(codes)
        if ids.shape != (batch, frames):
            raise SrfmError(f"{ids.shape[-1]} conditioning frames do not align with {frames} latent frames")
        return ids

    def condition(self, ids: np.ndarray) -> Tensor:
        parity = np.broadcast_to(np.arange(ids.shape[-1]) % UPSAMPLE, ids.shape)
        return self.cond(ids) + self.parity(parity)

    def upsample_conditioning(self, codes: np.ndarray) -> np.ndarray:
        """Conditioning matrix (2n, width) for one token sequence."""
        codes = np.asarray(codes, dtype=np.int64)
        with nc.no_grad():
            return self.condition(self.cond_ids(codes, 1, UPSAMPLE * len(codes))).data[0]

    def __call__(self, x, t, ids: np.ndarray) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        t = np.broadcast_to(np.asarray(t, dtype=np.float32), (x.shape[0],))
        temb = self.t2(ops.silu(self.t1(time_features(t, self._cfg.time_features))))
        h = self.inp(x) + self.condition(ids)
        for block in self.blocks:
            h = block(h, temb)
        return self.out(self.norm(h))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.latent_mean.data) / self.latent_std.data).astype(np.float32)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return (x * self.latent_std.data + self.latent_mean.data).astype(np.float32)


def cfm_loss(velocity: Callable[[np.ndarray, np.ndarray, object], Tensor], x1, cond, t, x0) -> Tensor:
    """Mean squared error between v(x_t, t, cond) and the path velocity x1 - x0."""
    x1 = np.asarray(x1, dtype=np.float32)
    x0 = np.asarray(x0, dtype=np.float32)
    if x1.shape != x0.shape:
        raise SrfmError(f"noise shape {x0.shape} != target shape {x1.shape}")
    t = np.asarray(t, dtype=np.float32).reshape((-1,) + (1,) * (x1.ndim - 1))
    if t.shape[0] not in (1, x1.shape[0]):
        raise SrfmError(f"{t.shape[0]} times for a batch of {x1.shape[0]}")
    xt = (1.0 - t) * x0 + t * x1
    v = velocity(xt, t.reshape(-1), cond)
    if v.shape != x1.shape:
        raise SrfmError(f"velocity shape {v.shape} != latent shape {x1.shape}")
    return ops.mse(v, x1 - x0)


def _guided(net: FlowNet, x: np.ndarray, t: float, ids: np.ndarray, null: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return net(x, t, ids).data
    v = net(np.concatenate([x, x]), t, np.concatenate([ids, null])).data
    vc, vu = v[: len(x)], v[len(x) :]
    return vu + scale * (vc - vu)


def integrate(
    net: FlowNet, x0: np.ndarray, ids: np.ndarray, params: OdeParams, normalized: bool = False
) -> np.ndarray:
    """Integrate dx/dt = v from t = 0 to 1 starting at ``x0`` (B, frames, C)."""
    x = np.asarray(x0, dtype=np.float32).copy()
    null = np.full_like(ids, net.null_id)
    dt = 1.0 / params.steps
    with nc.no_grad():
        for i in range(params.steps):
            t = i * dt
            where = f"step {i + 1}/{params.steps} (t={t:.3f}, max |x|={np.abs(x).max():.3g})"
            try:
                k1 = _guided(net, x, t, ids, null, params.cfg_scale)
                if params.solver == "midpoint":
                    k1 = _guided(net, x + 0.5 * dt * k1, t + 0.5 * dt, ids, null, params.cfg_scale)
            except nc.NonFiniteError as err:
                raise nc.NonFiniteError(f"flow velocity non-finite at {where}: {err}") from err
            x = x + dt * k1
            if not np.all(np.isfinite(x)):
                raise nc.NonFiniteError(f"flow state non-finite after {where}")
    return x if normalized else net.denormalize(x)


def srfm_sample(
    net: FlowNet, codes: np.ndarray | None, params: OdeParams = OdeParams(), seed: int = 0, frames: int | None = None
) -> np.ndarray:
    """Latents (2n, C) for one token sequence; ``codes=None`` samples unconditionally over ``frames``."""
    if codes is None:
        if frames is None:
            raise SrfmError("unconditional sampling needs a frame count")
        ids = net.cond_ids(None, 1, frames)
    else:
        codes = np.asarray(codes, dtype=np.int64)
        ids = net.cond_ids(codes, 1, UPSAMPLE * len(codes))
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((1, ids.shape[1], net.config.latent_dim)).astype(np.float32)
    return integrate(net, x0, ids, params)[0]


@dataclass
class FlowTrainConfig:
    lr: float = 1e-3
    warmup: int = 10
    batch: int = 8
    drop_prob: float = CFG_DROP_PROB
    normalize: bool = True
    seed: int = 0


class FlowTrainer:
    """Conditional flow-matching steps on paired (tokens, latents) batches."""

    def __init__(self, net: FlowNet, cfg: FlowTrainConfig | None = None, state: nc.OptimState | None = None):
        self.net = net
        self.cfg = cfg or FlowTrainConfig()
        self.rng = np.random.default_rng(self.cfg.seed)
        self.opt = nc.Adam(net.trainable(), nc.LrSchedule(self.cfg.lr, self.cfg.warmup), state=state)
        self.fitted = self.opt.step_count > 0 or not self.cfg.normalize

    def fit_normalization(self, latents: np.ndarray) -> None:
        flat = latents.reshape(-1, latents.shape[-1]).astype(np.float64)
        self.net.latent_mean.data = flat.mean(0).astype(np.float32)
        self.net.latent_std.data = (flat.std(0) + 1e-5).astype(np.float32)
        self.fitted = True

    def step(self, codes: np.ndarray | None, latents: np.ndarray) -> float:
        """One step; ``codes`` (B, n) must align with ``latents`` (B, 2n, C)."""
        latents = np.asarray(latents, dtype=np.float32)
        if latents.ndim != 3 or latents.shape[-1] != self.net.config.latent_dim:
            raise SrfmError(f"latents must be (B, frames, {self.net.config.latent_dim}), got {latents.shape}")
        b, frames, _ = latents.shape
        ids = self.net.cond_ids(codes, b, frames)
        drop = self.rng.random(b) < self.cfg.drop_prob
        ids = np.where(drop[:, None], self.net.null_id, ids)
        if not self.fitted:
            self.fit_normalization(latents)
        x1 = self.net.normalize(latents)
        x0 = self.rng.standard_normal(x1.shape).astype(np.float32)
        t = self.rng.random(b).astype(np.float32)
        loss = cfm_loss(self.net, x1, ids, t, x0)
        value = loss.item()
        if not np.isfinite(value):
            nc.clear_tape()
            raise nc.NonFiniteError(f"flow-matching loss is {value}; step aborted")
        nc.backward(loss)
        self.opt.step()
        return value


__all__ = [
    "DESK_FLOW",
    "FULL_FLOW",
    "FlowConfig",
    "FlowNet",
    "FlowTrainConfig",
    "FlowTrainer",
    "OdeParams",
    "SWEEP_CFG",
    "SrfmError",
    "cfm_loss",
    "integrate",
    "srfm_sample",
    "time_features",
    "upsample_tokens",
]
