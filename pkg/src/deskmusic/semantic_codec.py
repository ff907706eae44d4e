"""Single-codebook 24 kHz tokenizer: strided conv encoder, VQ, iSTFT-head decoder.

One token covers 320 samples (75 tokens/s). The decoder predicts one complex
spectral frame of a 1280-point STFT per token and overlap-adds them, so the
decoded length is always 320 samples per token.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dsp, vq
from . import numcore as nc
from .audio_io import Waveform, require_rate
from .losses import ReconLossConfig, recon_loss
from .numcore import Tensor, nn, ops

SEMT_MAGIC = b"SEMT"
SEMT_VERSION = 1


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class SemCodecConfig:
    vocab_size: int = 256
    code_dim: int = 64
    hop: int = 320
    sample_rate: int = 24000
    channels: tuple[int, ...] = (32, 64, 64, 64)
    strides: tuple[int, ...] = (4, 4, 4, 5)
    kernels: tuple[int, ...] = (8, 8, 8, 10)
    dec_hidden: int = 256
    fft_size: int = 1280
    commit_weight: float = 0.25
    restart_after: int = 5

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise CodecError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if math.prod(self.strides) != self.hop:
            raise CodecError(f"stride product {math.prod(self.strides)} != hop {self.hop}")
        if not len(self.channels) == len(self.strides) == len(self.kernels):
            raise CodecError("channels, strides and kernels must have equal lengths")
        if self.sample_rate % self.hop:
            raise CodecError("hop must divide the sample rate")
        if self.fft_size % self.hop or (self.fft_size - self.hop) % 2:
            raise CodecError("fft_size must be a multiple of hop with an even overhang")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def bitrate(self) -> float:
        return self.frame_rate * math.log2(self.vocab_size)

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SemCodecConfig":
        d = dict(d)
        for k in ("channels", "strides", "kernels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


DESK_SEM = SemCodecConfig()
# full-scale tokenizer shape: 4096 codes, 768-wide features; constructible, not trained here
FULL_SEM = SemCodecConfig(vocab_size=4096, code_dim=768, channels=(128, 256, 512, 768), dec_hidden=1536)


@dataclass
class SemanticTokenSeq:
    codes: np.ndarray
    vocab_size: int
    frame_rate: float = 75.0
    source_rate: int = 24000

    def __post_init__(self) -> None:
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(-1)
        if len(self.codes) and (self.codes.min() < 0 or self.codes.max() >= self.vocab_size):
            raise CodecError(f"token out of range [0, {self.vocab_size})")

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def duration_seconds(self) -> float:
        return len(self.codes) / self.frame_rate

    def to_bytes(self) -> bytes:
        if self.vocab_size > 65536:
            raise CodecError(f"vocab {self.vocab_size} does not fit u16 tokens")
        head = SEMT_MAGIC + struct.pack("<III", SEMT_VERSION, self.vocab_size, len(self.codes))
        return head + self.codes.astype("<u2").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SemanticTokenSeq":
        if len(raw) < 16 or raw[:4] != SEMT_MAGIC:
            raise CodecError("not a SEMT token stream")
        version, vocab, count = struct.unpack_from("<III", raw, 4)
        if version != SEMT_VERSION:
            raise CodecError(f"unsupported SEMT version {version} (supported: {SEMT_VERSION})")
        if vocab > 65536:
            raise CodecError(f"vocab {vocab} exceeds the u16 token range")
        if len(raw) != 16 + 2 * count:
            raise CodecError(f"SEMT stream length {len(raw)} does not match {count} tokens")
        return cls(np.frombuffer(raw, dtype="<u2", offset=16).astype(np.int64), vocab)


class SemEncoder(nn.Module):
    def __init__(self, cfg: SemCodecConfig, rng: np.random.Generator):
        chans = (1,) + cfg.channels
        self.convs = [nn.Conv1d(chans[i], chans[i + 1], k, rng, s) for i, (k, s) in enumerate(zip(cfg.kernels, cfg.strides))]
        self.proj = nn.Linear(cfg.channels[-1], cfg.code_dim, rng)
        self.norm = nn.LayerNorm(cfg.code_dim)

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.reshape(x, (x.shape[0], 1, x.shape[1]))
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = ops.gelu(h)
        return self.norm(self.proj(ops.transpose(h, (0, 2, 1))))


class SpectralHead(nn.Module):
    """Per-token MLP predicting the complex coefficients of one STFT frame.

    Magnitude and phase are carried as the Cartesian pair (re, im); regressing a
    wrapped phase angle directly is ill-posed under gradient descent.
    """

    def __init__(self, cfg: SemCodecConfig, rng: np.random.Generator):
        self.fc1 = nn.Linear(cfg.code_dim, cfg.dec_hidden, rng)
        self.fc2 = nn.Linear(cfg.dec_hidden, cfg.dec_hidden, rng)
        self.out = nn.Linear(cfg.dec_hidden, 2 * cfg.bins, rng, gain=0.1)
        self._cfg = cfg

    def __call__(self, q: Tensor) -> Tensor:
        cfg = self._cfg
        h = ops.gelu(self.fc2(ops.gelu(self.fc1(q))))
        coef = self.out(h)
        re, im = coef[:, :, : cfg.bins], coef[:, :, cfg.bins :]
        return dsp.istft_t(re, im, cfg.fft_size, cfg.hop, trim=(cfg.fft_size - cfg.hop) // 2)


class SemanticCodec(nn.Module):
    def __init__(self, cfg: SemCodecConfig = DESK_SEM, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.encoder = SemEncoder(cfg, rng)
        self.codebook = nn.param(rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.code_dim)))
        self.decoder = SpectralHead(cfg, rng)
        self._cfg = cfg

    @property
    def config(self) -> SemCodecConfig:
        return self._cfg

    def pad(self, x: np.ndarray) -> np.ndarray:
        """Zero-pad the time axis up to a whole number of tokens."""
        extra = (-x.shape[-1]) % self._cfg.hop
        return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, extra)]) if extra else x

    def features(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def encode_array(self, x: np.ndarray) -> np.ndarray:
        """Codes (B, ceil(L/hop)) for a batch of 24 kHz signals (B, L)."""
        with nc.no_grad():
            h = self.features(Tensor(self.pad(np.atleast_2d(x)).astype(np.float32)))
        return vq.nearest(h.data.reshape(-1, h.shape[-1]), self.codebook.data).reshape(h.shape[:2])

    def encode(self, wave: Waveform) -> SemanticTokenSeq:
        require_rate(wave, self._cfg.sample_rate)
        if len(wave) == 0:
            return SemanticTokenSeq(np.zeros(0, np.int64), self._cfg.vocab_size, self._cfg.frame_rate)
        return SemanticTokenSeq(self.encode_array(wave.samples[None])[0], self._cfg.vocab_size, self._cfg.frame_rate)

    def decode_array(self, codes: np.ndarray) -> np.ndarray:
        codes = np.atleast_2d(codes)
        if codes.size and (codes.min() < 0 or codes.max() >= self._cfg.vocab_size):
            raise CodecError(f"code out of range [0, {self._cfg.vocab_size})")
        if codes.shape[1] == 0:
            return np.zeros((codes.shape[0], 0), np.float32)
        with nc.no_grad():
            return self.decoder(ops.embedding(self.codebook, codes)).data

    def decode(self, seq: SemanticTokenSeq) -> Waveform:
        return Waveform(self.decode_array(seq.codes[None])[0], self._cfg.sample_rate)

    def embed_codes(self, codes: np.ndarray) -> np.ndarray:
        return self.codebook.data[np.asarray(codes)]


@dataclass
class SemTrainConfig:
    lr: float = 2e-3
    warmup: int = 10
    batch: int = 16
    seed: int = 0
    loss: ReconLossConfig = field(
        default_factory=lambda: ReconLossConfig(resolutions=((256, 64), (1024, 256)), sample_rate=24000)
    )


def vq_loss(out: vq.VqOutput, commit_weight: float) -> Tensor:
    return out.codebook_loss + out.commit_loss * commit_weight


class SemCodecTrainer:
    """Reconstruction + codebook + commitment training with dead-code restarts."""

    def __init__(self, codec: SemanticCodec, cfg: SemTrainConfig | None = None, state: nc.OptimState | None = None):
        self.codec = codec
        self.cfg = cfg or SemTrainConfig()
        self.rng = np.random.default_rng(self.cfg.seed)
        self.opt = nc.Adam(codec.parameters(), nc.LrSchedule(self.cfg.lr, self.cfg.warmup), state=state)
        self._last_used = np.full(codec.config.vocab_size, self.opt.step_count)
        self.initialized = self.opt.step_count > 0

    def init_codebook(self, x: np.ndarray) -> None:
        with nc.no_grad():
            h = self.codec.features(Tensor(self.codec.pad(x).astype(np.float32))).data
        self.codec.codebook.data = vq.kmeans(h.reshape(-1, h.shape[-1]), self.codec.config.vocab_size, self.rng)
        self.initialized = True

    def loss_terms(self, x: Tensor) -> tuple[Tensor, Tensor, vq.VqOutput, Tensor]:
        h = self.codec.features(x)
        out = vq.vq_straight_through(h, self.codec.codebook)
        y = self.codec.decoder(out.quantized)
        rec = recon_loss(y, x, self.cfg.loss)
        return rec, vq_loss(out, self.codec.config.commit_weight), out, h

    def step(self, batch: np.ndarray) -> float:
        """One optimizer step on a (B, L) batch of equal-length 24 kHz clips."""
        x = self.codec.pad(np.asarray(batch, dtype=np.float32))
        if not self.initialized:
            self.init_codebook(x)
        rec, vql, out, h = self.loss_terms(Tensor(x))
        loss = rec + vql
        value = loss.item()
        if not np.isfinite(value):
            nc.clear_tape()
            raise nc.NonFiniteError(f"semantic codec loss is {value}; step aborted")
        nc.backward(loss)
        self.opt.step()
        self._restart_dead(out.codes, h.data)
        return value

    def _restart_dead(self, codes: np.ndarray, feats: np.ndarray) -> None:
        step = self.opt.step_count
        self._last_used[np.unique(codes)] = step
        dead = np.nonzero(step - self._last_used >= self.codec.config.restart_after)[0]
        if len(dead):
            flat = feats.reshape(-1, feats.shape[-1])
            picks = flat[self.rng.choice(len(flat), len(dead))]
            noise = self.rng.normal(scale=1e-3, size=picks.shape)
            self.codec.codebook.data[dead] = (picks + noise).astype(np.float32)
            self._last_used[dead] = step

