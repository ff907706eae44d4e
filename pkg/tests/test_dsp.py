import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deskmusic import dsp
from deskmusic import numcore as nc

finite = st.floats(-1.0, 1.0, allow_nan=False, width=64)


def test_fft_of_impulse_is_flat():
    x = np.zeros(8)
    x[0] = 1.0
    np.testing.assert_allclose(dsp.fft(x), np.ones(8), atol=1e-12)


def test_fft_of_constant_is_dc_only():
    expected = np.zeros(8, dtype=complex)
    expected[0] = 8
    np.testing.assert_allclose(dsp.fft(np.ones(8)), expected, atol=1e-12)


def test_fft_rejects_non_power_of_two():
    with pytest.raises(dsp.DspError):
        dsp.fft(np.ones(12))


def test_fft_matches_direct_dft():
    rng = np.random.default_rng(0)
    x = rng.normal(size=64) + 1j * rng.normal(size=64)
    n = np.arange(64)
    direct = np.exp(-2j * np.pi * np.outer(n, n) / 64) @ x
    np.testing.assert_allclose(dsp.fft(x), direct, atol=1e-9)


@given(arrays(np.float64, st.sampled_from([1, 2, 16, 128, 1024]), elements=finite))
@settings(max_examples=60, deadline=None)
def test_fft_roundtrip(x):
    assert np.max(np.abs(dsp.ifft(dsp.fft(x)) - x)) < 1e-6


@given(arrays(np.float64, 256, elements=finite))
@settings(max_examples=40, deadline=None)
def test_parseval(x):
    time_energy = np.sum(x**2)
    freq_energy = np.sum(np.abs(dsp.fft(x)) ** 2) / len(x)
    assert freq_energy == pytest.approx(time_energy, rel=1e-6, abs=1e-12)


@given(arrays(np.float64, 64, elements=finite), arrays(np.float64, 64, elements=finite), finite, finite)
@settings(max_examples=40, deadline=None)
def test_fft_linearity(x, y, a, b):
    lhs = dsp.fft(a * x + b * y)
    rhs = a * dsp.fft(x) + b * dsp.fft(y)
    assert np.max(np.abs(lhs - rhs)) < 1e-6


def test_stft_frame_count():
    cfg = dsp.StftConfig(256, 64)
    assert dsp.stft(np.zeros(1024), cfg).frames == 13
    assert cfg.n_frames(1024) == 13


def test_stft_of_zero_is_zero():
    spec = dsp.stft(np.zeros(2048), dsp.StftConfig(256, 64))
    assert np.all(spec.values == 0)
    assert spec.bins == 129


@pytest.mark.parametrize("fft_size,hop", [(256, 64), (1280, 320), (512, 128)])
def test_istft_reconstructs_interior(fft_size, hop):
    rng = np.random.default_rng(fft_size)
    x = rng.uniform(-1, 1, size=fft_size * 6 + 37)
    cfg = dsp.StftConfig(fft_size, hop)
    spec = dsp.stft(x, cfg)
    y = dsp.istft(spec, cfg)
    inner = dsp.interior(cfg, spec.frames)
    assert np.max(np.abs(y[inner] - x[: len(y)][inner])) < 1e-6


@given(arrays(np.float64, st.integers(512, 2000), elements=finite))
@settings(max_examples=30, deadline=None)
def test_istft_roundtrip_property(x):
    cfg = dsp.StftConfig(256, 64)
    spec = dsp.stft(x, cfg)
    y = dsp.istft(spec, cfg)
    inner = dsp.interior(cfg, spec.frames)
    assert np.max(np.abs(y[inner] - x[: len(y)][inner]), initial=0.0) < 1e-6


def test_cola_violation_rejected():
    with pytest.raises(dsp.DspError, match="COLA"):
        dsp.StftConfig(256, 128)  # Hann at 50% overlap is not power-complementary
    with pytest.raises(dsp.DspError):
        dsp.StftConfig(256, 100)


def test_mel_of_zero_is_zero():
    cfg = dsp.StftConfig(1024, 256)
    mel = dsp.mel_spectrogram(np.zeros(4096), cfg, 40, 24000)
    assert mel.shape == (13, 40) and np.all(mel == 0)


def test_mel_rows_nonempty_and_range_checked():
    fb = dsp.mel_filterbank(24000, 256, 100)
    assert np.all(fb.sum(axis=1) > 0)
    with pytest.raises(dsp.DspError):
        dsp.mel_filterbank(24000, 256, 200)


def test_mel_peak_band_for_440hz():
    sr, n_mels = 24000, 64
    cfg = dsp.StftConfig(2048, 512)
    t = np.arange(sr) / sr
    mel = dsp.mel_spectrogram(np.sin(2 * np.pi * 440 * t), cfg, n_mels, sr)
    # oracle: adjacent triangles cross halfway between centres, so the band
    # "containing" a frequency is the one whose centre is nearest in Hz
    centers = dsp.mel_centers(sr, n_mels)
    expected = int(np.argmin(np.abs(centers - 440.0)))
    band_energy = mel.sum(axis=0)
    assert int(np.argmax(band_energy)) == expected
    assert np.sum(band_energy == band_energy.max()) == 1


def test_mel_energy_quadratic_in_amplitude():
    rng = np.random.default_rng(1)
    x = rng.normal(size=8192) * 0.1
    cfg = dsp.StftConfig(1024, 256)
    e1 = dsp.mel_spectrogram(x, cfg, 40, 24000).sum()
    e2 = dsp.mel_spectrogram(2 * x, cfg, 40, 24000).sum()
    assert e2 == pytest.approx(4 * e1, rel=1e-9)


def test_tape_stft_matches_numpy_stft():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3000))
    with nc.precision(np.float64):
        re, im = dsp.stft_t(nc.tensor(x), 512, 128)
    ref = dsp.stft(x[1], dsp.StftConfig(512, 128)).values
    np.testing.assert_allclose(re.data[1] + 1j * im.data[1], ref, atol=1e-9)


def test_tape_istft_inverts_tape_stft_interior():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1280 * 5))
    with nc.precision(np.float64):
        re, im = dsp.stft_t(nc.tensor(x), 1280, 320)
        y = dsp.istft_t(re, im, 1280, 320).data
    inner = dsp.interior(dsp.StftConfig(1280, 320), re.shape[1])
    assert np.max(np.abs(y[0, inner] - x[0, inner])) < 1e-9


def test_tape_spectral_ops_have_correct_gradients():
    rng = np.random.default_rng(4)

    def mag_loss(x):
        return nc.ops.sum(dsp.stft_magnitude_t(x, 16, 4))

    def synth_loss(re, im, w):
        return nc.ops.sum(dsp.istft_t(re, im, 16, 4, trim=6) * w)

    assert nc.check_gradients(mag_loss, [rng.normal(size=(1, 40))]) < 1e-4
    args = [rng.normal(size=(1, 5, 9)), rng.normal(size=(1, 5, 9)), rng.normal(size=(1, 20))]
    assert nc.check_gradients(synth_loss, args) < 1e-4
