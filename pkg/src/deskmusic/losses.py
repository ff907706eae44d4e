"""Reconstruction losses shared by both codecs."""

from __future__ import annotations

from dataclasses import dataclass

from . import dsp
from .numcore import Tensor, ops


@dataclass(frozen=True)
class ReconLossConfig:
    resolutions: tuple[tuple[int, int], ...]  # (fft_size, hop) pairs
    sample_rate: int
    mel_fft: int = 1024
    n_mels: int = 64
    spectral_weight: float = 0.1
    mel_weight: float = 0.1
    wave_weight: float = 10.0


def recon_loss(y: Tensor, x: Tensor, cfg: ReconLossConfig) -> Tensor:
    """Multi-resolution STFT magnitude L1 + mel-magnitude L1 + waveform MSE.

    The waveform term anchors phase; magnitude-only terms cannot reward it.
    The mel term is linear in magnitude: a log-mel term over-weights
    near-silent bands and pulled the short desk runs away from phase.
    """
    total = ops.mse(y, x) * cfg.wave_weight
    mags = {}
    for fft_size, hop in cfg.resolutions:
        my = dsp.stft_magnitude_t(y, fft_size, hop)
        mx = dsp.stft_magnitude_t(x, fft_size, hop)
        mags[(fft_size, hop)] = (my, mx)
        total = total + ops.l1(my, mx) * (cfg.spectral_weight / len(cfg.resolutions))
    if cfg.mel_weight == 0:
        return total
    key = (cfg.mel_fft, cfg.mel_fft // 4)
    py, px = mags[key] if key in mags else (
        dsp.stft_magnitude_t(y, *key),
        dsp.stft_magnitude_t(x, *key),
    )
    mel_y = dsp.mel_t(py, cfg.sample_rate, cfg.mel_fft, cfg.n_mels)
    mel_x = dsp.mel_t(px, cfg.sample_rate, cfg.mel_fft, cfg.n_mels)
    return total + ops.l1(mel_y, mel_x) * cfg.mel_weight
