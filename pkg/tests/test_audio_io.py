import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deskmusic import audio_io as aio
from deskmusic import dsp


def _stereo_pcm16(path, left, right, rate=24000):
    frames = np.stack([left, right], axis=1)
    payload = np.round(frames * 32767).astype("<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, 2, rate, rate * 4, 4, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_pcm16_roundtrip_within_quantization(tmp_path):
    rng = np.random.default_rng(0)
    w = aio.Waveform(rng.uniform(-1, 1, 5000), 24000)
    aio.write_wav(tmp_path / "a.wav", w, 16)
    back = aio.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 24000 and len(back) == 5000
    assert np.max(np.abs(back.samples - w.samples)) <= 1 / 32768


@given(arrays(np.float32, st.integers(0, 300), elements=st.floats(-1, 1, width=32)))
@settings(max_examples=30, deadline=None)
def test_float32_roundtrip_bit_exact(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("f32") / "x.wav"
    aio.write_wav(path, aio.Waveform(x, 48000), 32)
    back = aio.read_wav(path)
    assert back.samples.tobytes() == x.tobytes()


def test_stereo_opposite_channels_downmix_to_silence(tmp_path):
    n = 100
    _stereo_pcm16(tmp_path / "s.wav", np.full(n, 0.5), np.full(n, -0.5))
    mono = aio.read_wav(tmp_path / "s.wav")
    assert len(mono) == n and np.all(mono.samples == 0.0)


def test_malformed_and_unsupported_headers(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"not a wave file at all")
    with pytest.raises(aio.WavFormatError):
        aio.read_wav(tmp_path / "junk.wav")
    fmt = struct.pack("<HHIIHH", 1, 1, 24000, 72000, 3, 24)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", 0)
    (tmp_path / "p24.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(aio.UnsupportedEncodingError):
        aio.read_wav(tmp_path / "p24.wav")
    with pytest.raises(aio.UnsupportedEncodingError):
        aio.write_wav(tmp_path / "x.wav", aio.Waveform(np.zeros(4), 24000), 24)


def test_written_header_fields(tmp_path):
    aio.write_wav(tmp_path / "h.wav", aio.Waveform(np.zeros(3), 24000), 16)
    raw = (tmp_path / "h.wav").read_bytes()
    assert raw[:4] == b"RIFF" and struct.unpack_from("<I", raw, 4)[0] == len(raw) - 8
    assert struct.unpack_from("<HHIIHH", raw, 20) == (1, 1, 24000, 48000, 2, 16)
    assert raw[36:40] == b"data" and struct.unpack_from("<I", raw, 40)[0] == 6


def test_resample_lengths():
    one_sec = aio.Waveform(np.zeros(48000), 48000)
    assert len(aio.resample(one_sec, 24000)) == 24000
    assert len(aio.resample(aio.Waveform(np.zeros(24000), 24000), 48000)) == 48000
    assert len(aio.resample(aio.Waveform(np.zeros(1001), 48000), 24000)) == 501


def test_resample_preserves_dc():
    for src, dst in ((48000, 24000), (24000, 48000)):
        out = aio.resample(aio.Waveform(np.full(4000, 0.3), src), dst).samples
        assert np.max(np.abs(out[200:-200] - 0.3)) < 1e-3


def test_resample_keeps_tone_peak_at_1khz():
    t = np.arange(48000) / 48000
    down = aio.resample(aio.Waveform(0.5 * np.sin(2 * np.pi * 1000 * t), 48000), 24000)
    spec = np.abs(dsp.fft(down.samples[:16384].astype(np.float64) * dsp.hann(16384)))
    peak_hz = np.argmax(spec[: 8193]) * 24000 / 16384
    assert abs(peak_hz - 1000) <= 24000 / 16384


def test_upsample_matches_zero_stuffing_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=300)
    h = aio.lowpass_kernel()
    z = np.zeros(600)
    z[0::2] = x
    oracle = np.convolve(z, 2 * h, mode="same")
    got = aio.resample(aio.Waveform(x, 24000), 48000).samples
    np.testing.assert_allclose(got, oracle, atol=1e-5)


def test_downsample_matches_filter_then_decimate_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=301)
    oracle = np.convolve(x, aio.lowpass_kernel(), mode="same")[0::2]
    got = aio.resample(aio.Waveform(x, 48000), 24000).samples
    np.testing.assert_allclose(got, oracle, atol=1e-5)


def test_resample_rejects_other_ratios():
    with pytest.raises(aio.AudioError):
        aio.resample(aio.Waveform(np.zeros(10), 16000), 48000)
    with pytest.raises(aio.AudioError):
        aio.resample(aio.Waveform(np.zeros(10), 48000), 16000)


def test_segment_examples():
    sr = 24000
    clips = aio.segment(aio.Waveform(np.zeros(75 * sr), sr), 30)
    assert [len(c) for c in clips] == [30 * sr, 30 * sr, 15 * sr]
    assert len(aio.segment(aio.Waveform(np.zeros(30 * sr), sr), 30)) == 1
    assert aio.segment(aio.Waveform(np.zeros(sr // 2), sr), 30) == []
    with pytest.raises(aio.AudioError):
        aio.segment(aio.Waveform(np.zeros(10), sr), 0)


@given(st.integers(0, 5000), st.floats(0.5, 20.0))
@settings(max_examples=50, deadline=None)
def test_segment_concatenation_reproduces_input(n, clip_seconds):
    sr = 100
    x = np.arange(n, dtype=np.float32) / 5000
    clips = aio.segment(aio.Waveform(x, sr), clip_seconds)
    joined = np.concatenate([c.samples for c in clips] + [np.zeros(0, np.float32)])
    rest = x[len(joined):]
    assert np.array_equal(np.concatenate([joined, rest]), x)
    assert len(rest) < sr
    assert all(len(c) == round(clip_seconds * sr) for c in clips[:-1])


def test_waveform_validation():
    with pytest.raises(aio.AudioError):
        aio.Waveform(np.array([0.0, np.nan]), 24000)
    with pytest.raises(aio.AudioError):
        aio.require_rate(aio.Waveform(np.zeros(3), 48000), 24000)
