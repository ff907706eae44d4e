"""FFT, STFT/iSTFT and mel features.

Two flavours live here: plain numpy functions for analysis and metrics, and
tape-aware versions (``*_t``) used inside codec losses and the spectral
decoder head. Both share the same DFT bases so they agree numerically.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .numcore import Tensor, ops
from .numcore.tensor import record


class DspError(ValueError):
    pass


# ---------------------------------------------------------------------------
# FFT (power-of-two lengths)
# ---------------------------------------------------------------------------


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@functools.lru_cache(maxsize=64)
def _dft_matrix(n: int, sign: float, ctype: type) -> np.ndarray:
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n).astype(ctype)


@functools.lru_cache(maxsize=64)
def _twiddles(n2: int, n1: int, sign: float, ctype: type) -> np.ndarray:
    return np.exp(sign * 2j * np.pi * np.outer(np.arange(n2), np.arange(n1)) / (n1 * n2)).astype(ctype)


def _fft_core(x: np.ndarray, sign: float) -> np.ndarray:
    """Cooley-Tukey in four-step form: n = n1 * n2 with n1, n2 powers of two.

    Short transforms (n <= 64) are done as a matrix product; longer ones run
    n2 transforms of length n1, a twiddle multiply, then recurse on length n2.
    """
    n = x.shape[-1]
    if not _is_pow2(n):
        raise DspError(f"FFT length must be a power of two, got {n}")
    x = np.asarray(x)
    ctype = np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128
    x = x.astype(ctype, copy=False)
    if n <= 64:
        return x @ _dft_matrix(n, sign, ctype)
    n1 = 1 << ((n.bit_length() - 1) // 2)
    n2 = n // n1
    a = np.swapaxes(x.reshape(x.shape[:-1] + (n1, n2)), -1, -2) @ _dft_matrix(n1, sign, ctype)
    a = np.swapaxes(a * _twiddles(n2, n1, sign, ctype), -1, -2)
    a = _fft_core(a, sign)
    return np.swapaxes(a, -1, -2).reshape(x.shape)


def fft(x: np.ndarray) -> np.ndarray:
    """Forward DFT along the last axis (iterative Cooley-Tukey, power-of-two lengths)."""
    return _fft_core(np.asarray(x), -1.0)


def ifft(spectrum: np.ndarray) -> np.ndarray:
    spectrum = np.asarray(spectrum)
    return _fft_core(spectrum, 1.0) / spectrum.shape[-1]


# ---------------------------------------------------------------------------
# real DFT bases (any length); used by STFT frames that are not powers of two
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=16)
def _rdft_basis(n: int) -> tuple[np.ndarray, np.ndarray]:
    """(n, n//2+1) cosine and negative-sine analysis matrices."""
    k = np.arange(n // 2 + 1)
    t = np.arange(n)[:, None]
    ang = 2 * np.pi * t * k[None, :] / n
    return np.cos(ang), -np.sin(ang)


@functools.lru_cache(maxsize=16)
def _irdft_basis(n: int) -> tuple[np.ndarray, np.ndarray]:
    """(n//2+1, n) synthesis matrices so frame = re @ C + im @ S."""
    bins = n // 2 + 1
    k = np.arange(bins)[:, None]
    t = np.arange(n)[None, :]
    w = np.full((bins, 1), 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    ang = 2 * np.pi * k * t / n
    return w * np.cos(ang) / n, -w * np.sin(ang) / n


def rfft(x: np.ndarray) -> np.ndarray:
    """Non-negative-frequency half of the DFT of real ``x`` (power-of-two length).

    Even and odd samples are packed into one complex sequence of half length,
    so the work is a single N/2-point FFT plus an O(N) untangling pass.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if n < 4:
        return fft(x)[..., : n // 2 + 1]
    if not _is_pow2(n):
        raise DspError(f"FFT length must be a power of two, got {n}")
    m = n // 2
    z = fft(x[..., 0::2] + 1j * x[..., 1::2])
    k = np.arange(m + 1)
    zk = z[..., k % m]
    zc = np.conj(z[..., (m - k) % m])
    even = 0.5 * (zk + zc)
    odd = -0.5j * (zk - zc)
    return even + np.exp(-2j * np.pi * k / n).astype(z.dtype) * odd


def irfft(spectrum: np.ndarray, n: int) -> np.ndarray:
    """Real inverse of :func:`rfft` for ``n//2 + 1`` bins (imaginary parts of DC/Nyquist ignored)."""
    spectrum = np.asarray(spectrum)
    if not _is_pow2(n) or spectrum.shape[-1] != n // 2 + 1:
        raise DspError(f"irfft needs a power-of-two n and n//2+1 bins, got n={n}, bins={spectrum.shape[-1]}")
    if n < 4:
        full = np.concatenate([spectrum, np.conj(spectrum[..., 1 : n - n // 2][..., ::-1])], axis=-1)
        return np.real(ifft(full))
    spectrum = spectrum.copy()
    spectrum[..., 0] = spectrum[..., 0].real
    spectrum[..., -1] = spectrum[..., -1].real
    m = n // 2
    k = np.arange(m)
    xk = spectrum[..., :m]
    xc = np.conj(spectrum[..., m - k])
    even = 0.5 * (xk + xc)
    odd = 0.5 * (xk - xc) * np.exp(2j * np.pi * k / n).astype(spectrum.dtype)
    z = ifft(even + 1j * odd)
    out = np.empty(spectrum.shape[:-1] + (n,), dtype=z.real.dtype)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def rfft_frames(frames: np.ndarray) -> np.ndarray:
    n = frames.shape[-1]
    if _is_pow2(n):
        return rfft(frames)
    c, s = _rdft_basis(n)
    f = np.asarray(frames, dtype=np.float64)
    return f @ c + 1j * (f @ s)


def irfft_frames(spec: np.ndarray, n: int) -> np.ndarray:
    c, s = _irdft_basis(n)
    return np.real(spec) @ c + np.imag(spec) @ s


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class StftConfig:
    fft_size: int
    hop: int
    window: np.ndarray = field(default=None, compare=False, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.window is None:
            object.__setattr__(self, "window", hann(self.fft_size))
        if self.fft_size < 2 or self.hop < 1 or self.fft_size % self.hop:
            raise DspError(f"hop {self.hop} must divide fft_size {self.fft_size}")
        if len(self.window) != self.fft_size:
            raise DspError(f"window length {len(self.window)} != fft_size {self.fft_size}")
        env = self.overlap_envelope
        if env.min() <= 1e-8 or np.ptp(env) > 1e-9 * env.max():
            raise DspError(f"window/hop pair ({self.fft_size}, {self.hop}) violates the overlap-add (COLA) condition")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def overlap_envelope(self) -> np.ndarray:
        """Steady-state sum of squared windows over one hop (constant under COLA)."""
        w2 = np.asarray(self.window, dtype=np.float64) ** 2
        return w2.reshape(-1, self.hop).sum(axis=0)

    def n_frames(self, length: int) -> int:
        return (length - self.fft_size) // self.hop + 1


@dataclass
class Spectrogram:
    values: np.ndarray  # (frames, bins), complex or magnitude
    fft_size: int

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.fft_size // 2 + 1:
            raise DspError(f"spectrogram shape {self.values.shape} inconsistent with fft_size {self.fft_size}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


def frame_signal(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    n = (len(x) - size) // hop + 1
    if n < 1:
        raise DspError(f"signal length {len(x)} shorter than frame size {size}")
    idx = np.arange(size)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def stft(signal: np.ndarray, cfg: StftConfig) -> Spectrogram:
    """Frames = floor((len - fft_size) / hop) + 1; no centre padding."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or len(x) < cfg.fft_size:
        raise DspError(f"stft needs a 1-D signal of at least {cfg.fft_size} samples, got shape {x.shape}")
    frames = frame_signal(x, cfg.fft_size, cfg.hop) * cfg.window
    return Spectrogram(rfft_frames(frames), cfg.fft_size)


def istft(spec: Spectrogram, cfg: StftConfig) -> np.ndarray:
    """Weighted overlap-add inverse; exact wherever every sample is covered by a full set of frames.

    Samples near the edges are normalised by the local window-power sum, so
    the output is still a best-effort inverse there.
    """
    if spec.fft_size != cfg.fft_size:
        raise DspError(f"spectrogram fft_size {spec.fft_size} != config {cfg.fft_size}")
    frames = irfft_frames(spec.values, cfg.fft_size) * cfg.window
    n = spec.frames
    length = (n - 1) * cfg.hop + cfg.fft_size
    out = np.zeros(length)
    env = np.zeros(length)
    w2 = np.asarray(cfg.window, dtype=np.float64) ** 2
    for i in range(n):
        sl = slice(i * cfg.hop, i * cfg.hop + cfg.fft_size)
        out[sl] += frames[i]
        env[sl] += w2
    return np.where(env > 1e-10, out / np.maximum(env, 1e-10), 0.0)


def interior(cfg: StftConfig, n_frames: int) -> slice:
    """Sample range of an istft output covered by the full number of overlapping frames."""
    return slice(cfg.fft_size - cfg.hop, (n_frames - 1) * cfg.hop + cfg.hop)


# ---------------------------------------------------------------------------
# mel features
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=32)
def mel_filterbank(sample_rate: int, fft_size: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters (n_mels, bins) on the HTK mel scale.

    Filters narrower than a bin spacing fall back to their nearest bin so no
    row is empty.
    """
    bins = fft_size // 2 + 1
    if not 1 <= n_mels <= bins:
        raise DspError(f"n_mels must be in [1, {bins}], got {n_mels}")
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(bins) * sample_rate / fft_size
    fb = np.zeros((n_mels, bins))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - freqs) / max(hi - mid, 1e-9)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
        if fb[i].sum() <= 0:
            fb[i, int(np.argmin(np.abs(freqs - mid)))] = 1.0
    return fb


def mel_centers(sample_rate: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    fmax = sample_rate / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def power_spectrogram(signal: np.ndarray, cfg: StftConfig) -> np.ndarray:
    return np.abs(stft(signal, cfg).values) ** 2


def mel_spectrogram(signal: np.ndarray, cfg: StftConfig, n_mels: int, sample_rate: int) -> np.ndarray:
    """(frames, n_mels) mel-weighted power spectrum."""
    fb = mel_filterbank(sample_rate, cfg.fft_size, n_mels)
    return power_spectrogram(signal, cfg) @ fb.T


# ---------------------------------------------------------------------------
# tape-aware versions for losses and the spectral decoder head
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def _analysis_consts(fft_size: int, dtype: str) -> tuple[np.ndarray, np.ndarray]:
    c, s = _rdft_basis(fft_size)
    w = hann(fft_size)[:, None]
    return (w * c).astype(dtype), (w * s).astype(dtype)


def rfft_t(frames: Tensor) -> tuple[Tensor, Tensor]:
    """Real FFT of power-of-two frames on the tape -> (re, im) with n//2+1 bins."""
    n = frames.shape[-1]
    bins = n // 2 + 1
    spec = rfft(frames.data)
    both = np.concatenate([spec.real, spec.imag], axis=-1).astype(frames.dtype)

    def bw(g):
        # d/dx of Re/Im parts is Re(sum_k G_k e^{+i 2 pi k t / n}); DC and Nyquist
        # terms are real-valued, the rest appear once, hence the Hermitian weights
        spec_g = g[..., :bins] + 1j * g[..., bins:]
        spec_g[..., 1:-1] *= 0.5
        spec_g[..., 0] = spec_g[..., 0].real
        spec_g[..., -1] = spec_g[..., -1].real
        return (irfft(spec_g, n) * n,)

    out = record(both, (frames,), bw, "rfft")
    return out[..., :bins], out[..., bins:]


def stft_t(x: Tensor, fft_size: int, hop: int) -> tuple[Tensor, Tensor]:
    """Hann-windowed STFT of a (B, L) tensor -> real and imaginary parts (B, T, bins)."""
    frames = ops.frame(x, fft_size, hop)
    if _is_pow2(fft_size):
        return rfft_t(frames * Tensor(hann(fft_size).astype(x.dtype)))
    c, s = _analysis_consts(fft_size, x.dtype.str)
    return ops.matmul(frames, Tensor(c)), ops.matmul(frames, Tensor(s))


def stft_magnitude_t(x: Tensor, fft_size: int, hop: int, eps: float = 1e-7) -> Tensor:
    re, im = stft_t(x, fft_size, hop)
    return ops.sqrt(re * re + im * im + eps)


@functools.lru_cache(maxsize=16)
def _synthesis_consts(fft_size: int, hop: int, n_frames: int, dtype: str):
    c, s = _irdft_basis(fft_size)
    w = hann(fft_size)[None, :]
    length = (n_frames - 1) * hop + fft_size
    env = np.zeros(length)
    w2 = hann(fft_size) ** 2
    for i in range(n_frames):
        env[i * hop:i * hop + fft_size] += w2
    inv_env = 1.0 / np.maximum(env, 1e-3 * w2.max())
    return (c * w).astype(dtype), (s * w).astype(dtype), inv_env.astype(dtype)


def istft_t(re: Tensor, im: Tensor, fft_size: int, hop: int, trim: int = 0) -> Tensor:
    """Inverse of :func:`stft_t` for (B, T, bins) parts; ``trim`` samples dropped at both ends."""
    n_frames = re.shape[1]
    c, s, inv_env = _synthesis_consts(fft_size, hop, n_frames, re.dtype.str)
    frames = ops.matmul(re, Tensor(c)) + ops.matmul(im, Tensor(s))
    out = ops.overlap_add(frames, hop) * Tensor(inv_env)
    if trim:
        out = out[:, trim:out.shape[1] - trim]
    return out


def mel_t(power: Tensor, sample_rate: int, fft_size: int, n_mels: int) -> Tensor:
    fb = mel_filterbank(sample_rate, fft_size, n_mels).T.astype(power.dtype)
    return ops.matmul(power, Tensor(fb))
