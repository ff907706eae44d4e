import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskmusic import numcore as nc
from deskmusic.audio_io import AudioError, Waveform
from deskmusic.losses import ReconLossConfig, recon_loss
from deskmusic.numcore import Tensor
from deskmusic.semantic_codec import (
    DESK_SEM,
    FULL_SEM,
    CodecError,
    SemanticCodec,
    SemanticTokenSeq,
    SemCodecConfig,
    SemCodecTrainer,
    SemTrainConfig,
)


@pytest.fixture(scope="module")
def codec():
    return SemanticCodec(seed=0)


def test_rate_arithmetic():
    assert DESK_SEM.sample_rate / DESK_SEM.hop == 75
    assert FULL_SEM.bitrate == 900.0
    assert FULL_SEM.vocab_size == 4096 and FULL_SEM.code_dim == 768


def test_config_validation():
    with pytest.raises(CodecError):
        SemCodecConfig(vocab_size=1)
    with pytest.raises(CodecError):
        SemCodecConfig(strides=(4, 4, 4, 4))
    assert SemCodecConfig.from_dict(DESK_SEM.to_dict()) == DESK_SEM


def test_one_second_gives_75_tokens(codec):
    seq = codec.encode(Waveform(np.zeros(24000), 24000))
    assert len(seq) == 75 and seq.duration_seconds == 1.0


@given(st.integers(1, 2000))
@settings(max_examples=15, deadline=None)
def test_token_and_sample_counts(codec, n):
    seq = codec.encode(Waveform(np.random.default_rng(n).normal(size=n) * 0.1, 24000))
    assert len(seq) == math.ceil(n / 320)
    assert len(codec.decode(seq)) == 320 * len(seq)


def test_codes_are_nearest_codewords(codec):
    x = np.random.default_rng(0).normal(size=(1, 3200)).astype(np.float32) * 0.1
    with nc.no_grad():
        h = codec.features(Tensor(x)).data[0]
    d = ((h[:, None, :].astype(np.float64) - codec.codebook.data[None]) ** 2).sum(-1)
    assert np.array_equal(codec.encode_array(x)[0], d.argmin(1))


def test_wrong_rate_and_bad_codes(codec):
    with pytest.raises(AudioError):
        codec.encode(Waveform(np.zeros(480), 48000))
    with pytest.raises(CodecError):
        codec.decode_array(np.array([[0, 256]]))
    with pytest.raises(CodecError):
        SemanticTokenSeq([300], 256)


def test_zero_decoder_is_silent():
    c = SemanticCodec(seed=1)
    for p in c.decoder.parameters():
        p.data[...] = 0.0
    out = c.decode(SemanticTokenSeq(np.arange(10), 256))
    assert len(out) == 3200 and np.all(out.samples == 0.0)


def test_token_stream_roundtrip_and_errors():
    seq = SemanticTokenSeq(np.array([0, 4095, 17]), 4096)
    raw = seq.to_bytes()
    assert raw[:4] == b"SEMT" and len(raw) == 16 + 6
    back = SemanticTokenSeq.from_bytes(raw)
    assert back.vocab_size == 4096 and back.codes.tolist() == [0, 4095, 17]
    with pytest.raises(CodecError):
        SemanticTokenSeq.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CodecError):
        SemanticTokenSeq.from_bytes(raw[:-1])
    with pytest.raises(CodecError):
        SemanticTokenSeq([0], 70000).to_bytes()


def test_recon_loss_zero_on_perfect_reconstruction():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 4800)).astype(np.float32))
    with nc.no_grad():
        assert recon_loss(x, x, ReconLossConfig(((256, 64), (1024, 256)), 24000)).item() == 0.0


def test_training_steps_reduce_loss_and_init_codebook():
    t = np.arange(4800) / 24000
    batch = np.stack([0.5 * np.sin(2 * np.pi * f * t) for f in (150, 225, 300, 375)]).astype(np.float32)
    codec = SemanticCodec(seed=0)
    trainer = SemCodecTrainer(codec, SemTrainConfig(batch=4, warmup=1))
    losses = [trainer.step(batch) for _ in range(15)]
    assert losses[0] > 0 and np.mean(losses[-3:]) < losses[0]
    assert np.all(np.isfinite(codec.codebook.data))
    assert len(np.unique(codec.codebook.data, axis=0)) == 256


def test_nonfinite_batch_aborts():
    trainer = SemCodecTrainer(SemanticCodec(seed=0))
    trainer.initialized = True
    bad = np.full((1, 640), np.nan, np.float32)
    with pytest.raises(nc.NonFiniteError):
        trainer.step(bad)
    assert nc.tape_size() == 0
