"""48 kHz conv codec with a 150 Hz continuous latent and residual VQ.

The encoder downsamples by the stride product (320) to one latent frame per
320 samples; the decoder mirrors it with transposed convolutions. The decoder
accepts continuous latents directly, which is how flow-matching outputs are
rendered to audio.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from . import vq
from .audio_io import Waveform, require_rate
from .losses import ReconLossConfig, recon_loss
from .numcore import Tensor, nn, ops
from .semantic_codec import CodecError

CROP_SECONDS = 1.0


@dataclass(frozen=True)
class AcCodecConfig:
    latent_dim: int = 64
    hop: int = 320
    sample_rate: int = 48000
    channels: tuple[int, ...] = (32, 64, 64)
    strides: tuple[int, ...] = (4, 4, 5, 4)
    n_stages: int = 4
    codebook_size: int = 256
    commit_weight: float = 0.25
    restart_after: int = 5

    def __post_init__(self) -> None:
        if math.prod(self.strides) != self.hop:
            raise CodecError(f"stride product {math.prod(self.strides)} != hop {self.hop}")
        if len(self.channels) != len(self.strides) - 1:
            raise CodecError("need one hidden width per stride except the last")
        if self.n_stages < 1 or self.codebook_size < 2:
            raise CodecError("RVQ needs at least one stage and two codes per stage")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AcCodecConfig":
        d = dict(d)
        for k in ("channels", "strides"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


DESK_AC = AcCodecConfig()
# full-scale shape: 1024-wide latent, 4 x 2048 RVQ, six conv layers (stride product 320)
FULL_AC = AcCodecConfig(
    latent_dim=1024, channels=(128, 256, 512, 1024, 1024), strides=(2, 2, 4, 4, 5, 1), codebook_size=2048
)


@dataclass
class AcousticLatent:
    frames: np.ndarray  # (T, C)
    frame_rate: float = 150.0
    source_rate: int = 48000

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise CodecError(f"latent must be (frames, C), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise CodecError("latent has non-finite entries")

    def __len__(self) -> int:
        return self.frames.shape[0]


def _kernel(stride: int) -> int:
    return 2 * stride


class AcEncoder(nn.Module):
    def __init__(self, cfg: AcCodecConfig, rng: np.random.Generator):
        chans = (1,) + cfg.channels + (cfg.latent_dim,)
        self.convs = [nn.Conv1d(chans[i], chans[i + 1], _kernel(s), rng, s) for i, s in enumerate(cfg.strides)]

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.reshape(x, (x.shape[0], 1, x.shape[1]))
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = ops.gelu(h)
        return ops.transpose(h, (0, 2, 1))


class AcDecoder(nn.Module):
    def __init__(self, cfg: AcCodecConfig, rng: np.random.Generator):
        chans = (cfg.latent_dim,) + cfg.channels[::-1] + (1,)
        strides = cfg.strides[::-1]
        self.convs = [nn.ConvTranspose1d(chans[i], chans[i + 1], _kernel(s), rng, s) for i, s in enumerate(strides)]

    def __call__(self, z: Tensor) -> Tensor:
        h = ops.transpose(z, (0, 2, 1))
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = ops.gelu(h)
        return ops.reshape(h, (h.shape[0], h.shape[2]))


class AcousticCodec(nn.Module):
    def __init__(self, cfg: AcCodecConfig = DESK_AC, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.encoder = AcEncoder(cfg, rng)
        self.codebooks = [nn.param(rng.normal(0.0, 0.1, size=(cfg.codebook_size, cfg.latent_dim))) for _ in range(cfg.n_stages)]
        self.decoder = AcDecoder(cfg, rng)
        self._cfg = cfg

    @property
    def config(self) -> AcCodecConfig:
        return self._cfg

    def tables(self) -> list[np.ndarray]:
        return [t.data for t in self.codebooks]

    def pad(self, x: np.ndarray) -> np.ndarray:
        extra = (-x.shape[-1]) % self._cfg.hop
        return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, extra)]) if extra else x

    def encode_array(self, x: np.ndarray) -> np.ndarray:
        """Continuous latents (B, ceil(L/hop), C) for 48 kHz signals (B, L)."""
        with nc.no_grad():
            return self.encoder(Tensor(self.pad(np.atleast_2d(x)).astype(np.float32))).data

    def encode(self, wave: Waveform) -> AcousticLatent:
        require_rate(wave, self._cfg.sample_rate)
        if len(wave) == 0:
            return AcousticLatent(np.zeros((0, self._cfg.latent_dim)), self._cfg.frame_rate)
        return AcousticLatent(self.encode_array(wave.samples[None])[0], self._cfg.frame_rate)

    def quantize(self, latent: AcousticLatent | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(codes (T, stages), quantized latent (T, C))."""
        frames = latent.frames if isinstance(latent, AcousticLatent) else np.asarray(latent)
        codes, quant, _ = vq.rvq_quantize(frames, self.tables())
        return codes, quant.astype(np.float32)

    def dequantize(self, codes: np.ndarray) -> np.ndarray:
        return vq.rvq_dequantize(codes, self.tables()).astype(np.float32)

    def decode_array(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        if z.ndim == 2:
            z = z[None]
        if z.shape[1] == 0:
            return np.zeros((z.shape[0], 0), np.float32)
        with nc.no_grad():
            return self.decoder(Tensor(z)).data

    def decode(self, latent: AcousticLatent | np.ndarray, codes: bool = False) -> Waveform:
        """Render continuous latents, or RVQ codes (T, stages) when ``codes`` is set."""
        if codes:
            z = self.dequantize(np.asarray(latent))
        else:
            z = latent.frames if isinstance(latent, AcousticLatent) else np.asarray(latent)
        return Waveform(self.decode_array(z)[0], self._cfg.sample_rate)

    def reconstruct(self, wave: Waveform) -> Waveform:
        """encode -> RVQ -> decode."""
        _, quant = self.quantize(self.encode(wave))
        out = self.decode(quant)
        return Waveform(out.samples[: len(wave)], out.sample_rate)


@dataclass
class AcTrainConfig:
    lr: float = 2e-3
    warmup: int = 10
    batch: int = 8
    seed: int = 0
    loss: ReconLossConfig = field(
        default_factory=lambda: ReconLossConfig(resolutions=((512, 128), (2048, 512)), sample_rate=48000, mel_fft=2048)
    )


def random_crops(clips: list[np.ndarray], n: int, rng: np.random.Generator, length: int) -> np.ndarray:
    """``n`` crops of exactly ``length`` samples from randomly chosen clips."""
    out = np.empty((n, length), dtype=np.float32)
    for i in range(n):
        clip = clips[int(rng.integers(len(clips)))]
        if len(clip) < length:
            raise CodecError(f"clip of {len(clip)} samples is shorter than the {length}-sample crop")
        start = int(rng.integers(len(clip) - length + 1))
        out[i] = clip[start : start + length]
    return out


class AcCodecTrainer:
    def __init__(self, codec: AcousticCodec, cfg: AcTrainConfig | None = None, state: nc.OptimState | None = None):
        self.codec = codec
        self.cfg = cfg or AcTrainConfig()
        self.rng = np.random.default_rng(self.cfg.seed)
        self.opt = nc.Adam(codec.parameters(), nc.LrSchedule(self.cfg.lr, self.cfg.warmup), state=state)
        cc = codec.config
        self._last_used = np.full((cc.n_stages, cc.codebook_size), self.opt.step_count)
        self.initialized = self.opt.step_count > 0

    @property
    def crop_length(self) -> int:
        return int(round(CROP_SECONDS * self.codec.config.sample_rate))

    def init_codebooks(self, x: np.ndarray) -> None:
        """Stage-wise k-means on encoder features and their residuals."""
        residual = self.codec.encode_array(x).reshape(-1, self.codec.config.latent_dim)
        for table in self.codec.codebooks:
            centers = vq.kmeans(residual, self.codec.config.codebook_size, self.rng)
            table.data = centers
            residual = residual - centers[vq.nearest(residual, centers)]
        self.initialized = True

    def loss_terms(self, x: Tensor) -> tuple[Tensor, Tensor, vq.VqOutput, Tensor]:
        h = self.codec.encoder(x)
        out = vq.rvq_straight_through(h, self.codec.codebooks)
        y = self.codec.decoder(out.quantized)
        rec = recon_loss(y, x, self.cfg.loss)
        return rec, out.codebook_loss + out.commit_loss * self.codec.config.commit_weight, out, h

    def step(self, crops: np.ndarray) -> float:
        """One step on a (B, 48000) batch of 1 s crops."""
        crops = np.asarray(crops, dtype=np.float32)
        if crops.ndim != 2 or crops.shape[1] != self.crop_length:
            raise CodecError(f"acoustic codec trains on {self.crop_length}-sample crops, got {crops.shape}")
        if not self.initialized:
            self.init_codebooks(crops)
        rec, vql, out, h = self.loss_terms(Tensor(crops))
        loss = rec + vql
        value = loss.item()
        if not np.isfinite(value):
            nc.clear_tape()
            raise nc.NonFiniteError(f"acoustic codec loss is {value}; step aborted")
        nc.backward(loss)
        self.opt.step()
        self._restart_dead(out.codes, h.data)
        return value

    def _restart_dead(self, codes: np.ndarray, feats: np.ndarray) -> None:
        step = self.opt.step_count
        flat_codes = codes.reshape(-1, codes.shape[-1])
        residual = feats.reshape(-1, feats.shape[-1]).astype(np.float64)
        for s, table in enumerate(self.codec.codebooks):
            self._last_used[s, np.unique(flat_codes[:, s])] = step
            dead = np.nonzero(step - self._last_used[s] >= self.codec.config.restart_after)[0]
            if len(dead):
                picks = residual[self.rng.choice(len(residual), len(dead))]
                table.data[dead] = (picks + self.rng.normal(scale=1e-3, size=picks.shape)).astype(np.float32)
                self._last_used[s, dead] = step
            residual = residual - table.data[flat_codes[:, s]]
