import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskmusic import numcore as nc
from deskmusic import vq
from deskmusic.acoustic_codec import (
    DESK_AC,
    FULL_AC,
    AcCodecTrainer,
    AcousticCodec,
    AcousticLatent,
    random_crops,
)
from deskmusic.audio_io import AudioError, Waveform
from deskmusic.semantic_codec import DESK_SEM, CodecError


@pytest.fixture(scope="module")
def codec():
    return AcousticCodec(seed=0)


def test_presets():
    assert DESK_AC.frame_rate == 150 and FULL_AC.frame_rate == 150
    assert math.prod(FULL_AC.strides) == 320 and len(FULL_AC.strides) == 6
    assert FULL_AC.n_stages == 4 and FULL_AC.codebook_size == 2048 and FULL_AC.latent_dim == 1024
    assert DESK_AC.frame_rate / DESK_SEM.frame_rate == 2


@pytest.mark.parametrize("seconds", [1, 2])
def test_frames_per_second(codec, seconds):
    lat = codec.encode(Waveform(np.zeros(48000 * seconds), 48000))
    assert len(lat) == 150 * seconds
    assert len(codec.decode(lat)) == 48000 * seconds


@given(st.integers(1, 3000))
@settings(max_examples=15, deadline=None)
def test_frame_arithmetic(codec, n):
    lat = codec.encode(Waveform(np.random.default_rng(n).normal(size=n) * 0.1, 48000))
    assert len(lat) == math.ceil(n / 320)
    assert len(codec.decode(lat)) == 320 * len(lat)


def test_rvq_roundtrip_on_codeword_sums(codec):
    codes = np.array([[3, 1, 4, 1], [0, 255, 7, 9]])
    z = codec.dequantize(codes)
    again, quant = codec.quantize(z)
    np.testing.assert_allclose(quant, z, atol=1e-5)
    np.testing.assert_allclose(codec.dequantize(again), z, atol=1e-5)


def test_decode_from_codes_matches_latent(codec):
    codes = np.random.default_rng(0).integers(0, 256, size=(20, 4))
    a = codec.decode(codes, codes=True)
    b = codec.decode(codec.dequantize(codes))
    np.testing.assert_array_equal(a.samples, b.samples)
    with pytest.raises(vq.VqError):
        codec.decode(np.full((3, 4), 256), codes=True)


def test_zero_latent_zero_bias_is_silent():
    c = AcousticCodec(seed=2)
    for conv in c.decoder.convs:
        conv.bias.data[...] = 0.0
    assert np.all(c.decode(np.zeros((10, 64))).samples == 0.0)


def test_latent_validation_and_rate(codec):
    with pytest.raises(CodecError):
        AcousticLatent(np.full((2, 64), np.inf))
    with pytest.raises(AudioError):
        codec.encode(Waveform(np.zeros(100), 24000))


def test_crop_policy():
    rng = np.random.default_rng(0)
    crops = random_crops([np.arange(50000, dtype=np.float32)], 3, rng, 48000)
    assert crops.shape == (3, 48000)
    assert all(np.all(np.diff(c) == 1) for c in crops)
    with pytest.raises(CodecError):
        random_crops([np.zeros(100)], 1, rng, 48000)
    trainer = AcCodecTrainer(AcousticCodec(seed=0))
    assert trainer.crop_length == 48000
    with pytest.raises(CodecError):
        trainer.step(np.zeros((1, 24000), np.float32))


def test_training_reduces_loss():
    t = np.arange(48000) / 48000
    crops = np.stack([0.5 * np.sin(2 * np.pi * f * t) for f in (150, 300)]).astype(np.float32)
    codec = AcousticCodec(seed=0)
    trainer = AcCodecTrainer(codec)
    losses = [trainer.step(crops) for _ in range(8)]
    assert losses[0] > 0 and np.mean(losses[-2:]) < losses[0]
    for table in codec.tables():
        assert np.all(np.isfinite(table))
    nc.clear_tape()
