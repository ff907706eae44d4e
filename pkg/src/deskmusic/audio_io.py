"""WAV I/O, 2x resampling, mono downmix and fixed-length segmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

CODEC_RATES = (24000, 48000)

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class AudioError(ValueError):
    pass


class WavFormatError(AudioError):
    """Malformed RIFF/WAVE structure."""


class UnsupportedEncodingError(AudioError):
    """Well-formed WAV in an encoding we do not read or write."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=np.float32)
        if s.ndim != 1:
            raise AudioError(f"waveform must be mono 1-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise AudioError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def require_rate(wave: Waveform, rate: int) -> None:
    if wave.sample_rate != rate:
        raise AudioError(f"expected {rate} Hz audio, got {wave.sample_rate} Hz")


def downmix(channels: np.ndarray) -> np.ndarray:
    """Arithmetic mean over the channel axis of a (frames, channels) array."""
    return channels.mean(axis=1) if channels.ndim == 2 else channels


def read_wav(path: str | Path) -> Waveform:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: chunk {cid!r} truncated")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise WavFormatError(f"{path}: missing or short fmt chunk")
    if data is None:
        raise WavFormatError(f"{path}: missing data chunk")
    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == _EXTENSIBLE:
        if len(fmt) < 26:
            raise WavFormatError(f"{path}: short extensible fmt chunk")
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels not in (1, 2):
        raise UnsupportedEncodingError(f"{path}: {channels} channels not supported")
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32767.0
    elif tag == _FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedEncodingError(f"{path}: format tag {tag} with {bits} bits not supported")
    if block_align != channels * dtype.itemsize:
        raise WavFormatError(f"{path}: block align {block_align} inconsistent with format")
    usable = len(data) - len(data) % block_align
    frames = np.frombuffer(data[:usable], dtype=dtype).reshape(-1, channels)
    samples = downmix(frames.astype(np.float64)) * scale if (channels > 1 or scale != 1.0) else frames[:, 0]
    return Waveform(np.asarray(samples, dtype=np.float32), rate)


def write_wav(path: str | Path, wave: Waveform, bit_depth: int = 16) -> None:
    """Write mono PCM16 (clipped to [-1, 1]) or IEEE float32."""
    if bit_depth == 16:
        tag = _PCM
        payload = np.round(np.clip(wave.samples, -1.0, 1.0) * 32767.0).astype("<i2").tobytes()
    elif bit_depth == 32:
        tag = _FLOAT
        payload = wave.samples.astype("<f4").tobytes()
    else:
        raise UnsupportedEncodingError(f"bit depth {bit_depth} not supported (use 16 or 32)")
    width = bit_depth // 8
    fmt = struct.pack("<HHIIHH", tag, 1, wave.sample_rate, wave.sample_rate * width, width, bit_depth)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


@lru_cache(maxsize=4)
def lowpass_kernel(half_width: int = 64, cutoff: float = 0.225, beta: float = 8.0) -> np.ndarray:
    """Kaiser-windowed sinc with ``cutoff`` in cycles per input sample, unit DC gain."""
    k = np.arange(-half_width, half_width + 1)
    h = 2 * cutoff * np.sinc(2 * cutoff * k) * np.kaiser(2 * half_width + 1, beta)
    return h / h.sum()


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Resample by exactly 2 or 1/2 with a windowed-sinc polyphase filter."""
    if target_rate not in CODEC_RATES:
        raise AudioError(f"target rate must be one of {CODEC_RATES}, got {target_rate}")
    src = wave.sample_rate
    if target_rate == src:
        return wave
    x = wave.samples.astype(np.float64)
    h = lowpass_kernel()
    half = (len(h) - 1) // 2
    if target_rate * 2 == src:
        out_len = (len(x) + 1) // 2
        # only the even-indexed outputs of the full-rate filter are computed
        xp = np.pad(x, (half, half + 1))
        windows = np.lib.stride_tricks.sliding_window_view(xp, len(h))[0 : 2 * out_len : 2]
        y = windows @ h[::-1]
    elif target_rate == src * 2:
        # polyphase: even outputs use the even taps, odd outputs the odd taps
        even, odd = 2 * h[0::2], 2 * h[1::2]
        y = np.empty(2 * len(x))
        xe = np.pad(x, (len(even), len(even)))
        full_e = np.convolve(xe, even)
        full_o = np.convolve(xe, odd)
        # half is even, so both phases line up at the same input offset
        off = len(even) + half // 2
        y[0::2] = full_e[off : off + len(x)]
        y[1::2] = full_o[off : off + len(x)]
    else:
        raise AudioError(f"unsupported ratio {src} -> {target_rate} (only 2 or 1/2)")
    return Waveform(y.astype(np.float32), target_rate)


def segment(wave: Waveform, clip_seconds: float = 30.0, min_remainder_seconds: float = 1.0) -> list[Waveform]:
    """Consecutive non-overlapping clips; a tail shorter than ``min_remainder_seconds`` is dropped."""
    if clip_seconds <= 0:
        raise AudioError(f"clip_seconds must be positive, got {clip_seconds}")
    clip = int(round(clip_seconds * wave.sample_rate))
    keep_min = int(round(min_remainder_seconds * wave.sample_rate))
    out = []
    for start in range(0, len(wave), clip):
        piece = wave.samples[start : start + clip]
        if len(piece) < clip and len(piece) < keep_min:
            break
        out.append(Waveform(piece, wave.sample_rate))
    return out
