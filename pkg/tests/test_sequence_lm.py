import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskmusic import numcore as nc
from deskmusic import sequence_lm as lm
from deskmusic.audio_io import Waveform
from deskmusic.semantic_codec import SemanticCodec

SMALL = lm.LmConfig(d_model=32, n_layers=2, n_heads=2, d_ff=64, window=8, max_text=32, max_seconds=30)


@pytest.fixture(scope="module")
def small_model():
    return lm.TokenLM(SMALL, seed=0)


schemas = st.builds(
    lm.PromptSchema,
    text_tokens=st.lists(st.integers(0, 255), max_size=20).map(tuple),
    time_start=st.integers(0, 30),
    time_end=st.integers(0, 30),
    structure=st.sampled_from(lm.STRUCTURES),
    label=st.sampled_from(lm.LABELS),
    audio_tokens=st.lists(st.integers(0, 255), max_size=40).map(tuple),
)


def test_length_examples():
    s = lm.PromptSchema((1, 2, 3), 0, 1, "verse", "jazz", (0, 1, 2, 3, 4))
    assert len(lm.build_sequence(s, SMALL)) == 12
    s = lm.PromptSchema((), 0, 1, "none", "none", tuple(range(75)))
    assert len(lm.build_sequence(s, SMALL)) == 79


@given(schemas)
@settings(max_examples=60, deadline=None)
def test_build_parse_roundtrip(schema):
    ids = lm.build_sequence(schema, SMALL)
    assert len(ids) == schema.m + schema.n + 4
    assert max(ids) < SMALL.n_vocab
    assert lm.parse_sequence(ids, SMALL) == schema


def test_special_order_and_ranges():
    v = SMALL.vocab
    s = lm.PromptSchema((65,), 2, 7, "chorus", "pop", (9,))
    ids = lm.build_sequence(s, SMALL)
    assert ids == [65, v.ts_offset + 2, v.te_offset + 7, v.structure_offset + 2, v.label_offset + lm.LABELS.index("pop"),
                   v.audio_offset + 9]
    assert SMALL.n_vocab > SMALL.sem_vocab + 256 + 4


def test_schema_errors():
    with pytest.raises(lm.LmError):
        lm.PromptSchema((), 0, 0, "bridge", "none", ())
    with pytest.raises(lm.LmError):
        lm.build_sequence(lm.PromptSchema((), 0, 31, "none", "none", ()), SMALL)
    with pytest.raises(lm.LmError):
        lm.build_sequence(lm.PromptSchema((), 0, 1, "none", "none", (256,)), SMALL)
    with pytest.raises(lm.LmError):
        lm.build_sequence(lm.PromptSchema((), 0, 1, "none", "none", (0,) * (75 * 30 + 1)), SMALL)
    with pytest.raises(lm.LmError):
        lm.parse_sequence([1, 2, 3], SMALL)


def test_config_presets():
    assert lm.DESK_LM.max_seq_len >= 75 * 480
    assert lm.FULL_LM_05B.d_model == 896 and lm.FULL_LM_15B.d_model == 1536
    assert lm.FULL_LM_05B.n_vocab == 156032
    with pytest.raises(lm.LmError):
        lm.LmConfig(vocab_size=100)


def test_forward_shape_and_causality(small_model):
    rng = np.random.default_rng(0)
    ids = rng.integers(0, SMALL.n_vocab, size=(1, 20))
    with nc.no_grad():
        base = small_model(ids).data
        assert base.shape == (1, 20, SMALL.n_vocab)
        for j in (0, 7, 19):
            pert = ids.copy()
            pert[0, j] = (pert[0, j] + 1) % SMALL.n_vocab
            out = small_model(pert).data
            np.testing.assert_array_equal(out[0, :j], base[0, :j])
            assert not np.allclose(out[0, j], base[0, j])


def test_bad_ids_rejected(small_model):
    with pytest.raises(lm.LmError):
        small_model(np.array([[SMALL.n_vocab]]))


def test_random_init_cross_entropy_near_uniform(small_model):
    rng = np.random.default_rng(1)
    ids = rng.integers(0, SMALL.n_vocab, size=(4, 30))
    with nc.no_grad():
        logits = small_model(ids[:, :-1])
        ce = nc.ops.cross_entropy(nc.ops.reshape(logits, (-1, SMALL.n_vocab)), ids[:, 1:].reshape(-1)).item()
    assert abs(ce - np.log(SMALL.n_vocab)) <= 0.1 * np.log(SMALL.n_vocab)


def test_sliding_window_mask():
    mask = lm.attention_mask(6, np.array([2]), window=2)[0]
    assert mask[5].tolist() == [True, True, False, False, True, True]
    assert not mask[2, 3]


def test_cached_decoding_matches_full_forward(small_model):
    schema = lm.make_schema("rock", list(range(20)), structure="verse", label="metal", max_text=SMALL.max_text)
    ids = lm.build_sequence(schema, SMALL)
    plen = len(lm.conditioning_ids(schema, SMALL.vocab))
    with nc.no_grad():
        full = small_model(np.array([ids]), [plen]).data[0]
    dec = lm.CachedDecoder(small_model)
    cache, last = dec.prefill(ids[:plen])
    np.testing.assert_allclose(last[0], full[plen - 1], atol=1e-5)
    for i in range(plen, len(ids)):
        np.testing.assert_allclose(dec.step(cache, np.array([ids[i]]))[0], full[i], atol=1e-5)
    assert cache.nbytes == 2 * 4 * SMALL.n_layers * SMALL.n_heads * (SMALL.max_prefix + SMALL.window) * SMALL.head_dim


def test_cfg_dropout_extremes_and_rate():
    s = lm.PromptSchema((1, 2), 0, 3, "intro", "folk", (5, 6))
    rng = np.random.default_rng(0)
    dropped = lm.cfg_dropout(s, rng, 1.0)
    assert dropped.unconditional and dropped.audio_tokens == s.audio_tokens
    assert lm.build_sequence(dropped, SMALL) == [SMALL.vocab.uncond] + [SMALL.vocab.audio_offset + a for a in (5, 6)]
    assert lm.cfg_dropout(s, rng, 0.0) == s
    rate = np.mean([lm.cfg_dropout(s, rng).unconditional for _ in range(10000)])
    assert 0.68 <= rate <= 0.72


def test_cfg_logits_identities():
    rng = np.random.default_rng(2)
    c, u = rng.normal(size=50), rng.normal(size=50)
    assert np.array_equal(lm.cfg_logits(c, u, 1.0), c)
    assert np.array_equal(lm.cfg_logits(c, u, 0.0), u)
    for scale in (0.5, 3.0, 10.0):
        assert np.array_equal(lm.cfg_logits(u, u, scale), u)
    with pytest.raises(lm.LmError):
        lm.cfg_logits(c, u[:3], 2.0)


@given(st.lists(st.integers(-20, 20).map(float), min_size=2, max_size=30), st.floats(0, 10), st.integers(-100, 100))
@settings(max_examples=50, deadline=None)
def test_cfg_argmax_invariant_when_equal(logits, scale, shift):
    u = np.array(logits)
    assert np.argmax(lm.cfg_logits(u, u, scale)) == np.argmax(u)
    ids_a, p_a = lm.topk_distribution(u, 3)
    ids_b, p_b = lm.topk_distribution(u + shift, 3)
    assert list(ids_a) == list(ids_b)
    np.testing.assert_allclose(p_a, p_b, atol=1e-9)


def test_topk_support_argmax_and_ties():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=64)
    top = set(np.argsort(-logits)[:5])
    assert all(lm.sample_topk(logits, 5, rng) in top for _ in range(10000))
    assert lm.sample_topk(logits, 1, rng) == int(np.argmax(logits))
    ids, _ = lm.topk_distribution(np.array([1.0, 2.0, 2.0, 2.0]), 2)
    assert list(ids) == [1, 2]


def test_topk_matches_renormalized_softmax():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=8)
    ids, p = lm.topk_distribution(logits, 3)
    draws = np.array([lm.sample_topk(logits, 3, rng) for _ in range(100000)])
    emp = np.array([np.mean(draws == i) for i in ids])
    assert 0.5 * np.abs(emp - p).sum() <= 0.02
    assert np.isin(draws, ids).all()


def test_gen_params_validation():
    with pytest.raises(lm.LmError):
        lm.GenParams(cfg_scale=-1)
    with pytest.raises(lm.LmError):
        lm.GenParams(top_k=0)
    assert lm.GenParams().cfg_scale == 3.0 and lm.GenParams().top_k == 350


def test_t2m_length_and_determinism(small_model):
    p = lm.GenParams(seed=7, top_k=10)
    a = lm.generate_t2m(small_model, "calm piano", 1.0, p)
    b = lm.generate_t2m(small_model, "calm piano", 1.0, p)
    assert len(a) == 75 and np.array_equal(a.codes, b.codes)
    assert a.duration_seconds == 1.0
    assert not np.array_equal(a.codes, lm.generate_t2m(small_model, "calm piano", 1.0, lm.GenParams(seed=8)).codes)
    with pytest.raises(lm.LmError):
        lm.generate_t2m(small_model, "x", 31.0, p)


def test_continuation_prefix_and_length(small_model):
    codec = SemanticCodec(seed=0)
    prompt = Waveform(np.random.default_rng(0).normal(size=48000) * 0.1, 24000)
    enc = codec.encode(prompt).codes
    out = lm.generate_continuation(small_model, codec, prompt, 3.0, lm.GenParams(seed=1))
    assert len(out) == 150 + 225
    assert np.array_equal(out.codes[:150], enc)
    same = lm.generate_continuation(small_model, codec, prompt, 0.0, lm.GenParams(seed=1))
    assert np.array_equal(same.codes, enc)


def test_padding_and_text_targets_ignored():
    v = SMALL.vocab
    short = (lm.build_sequence(lm.PromptSchema((70,), 0, 1, "none", "none", (1,)), SMALL), 5)
    long = (lm.build_sequence(lm.PromptSchema((70, 71), 0, 1, "none", "none", (1, 2, 3)), SMALL), 6)
    inputs, targets, prefix = lm.batch_arrays([short, long], v)
    assert inputs.shape == (2, 8)
    assert (targets[0, 5:] == -100).all() and (inputs[0, 5:] == v.pad).all()
    assert targets[1, 0] == -100  # second text byte is given, not predicted
    assert prefix.tolist() == [5, 6]


def test_padding_contributes_nothing_to_loss():
    model = lm.TokenLM(SMALL, seed=3)
    s = lm.PromptSchema((70,), 0, 1, "none", "none", (1, 2))
    trainer = lm.LmTrainer(model, lm.LmTrainConfig(drop_prob=0.0))
    alone = trainer.loss([s]).item()
    nc.clear_tape()
    longer = lm.PromptSchema((70,), 0, 1, "none", "none", tuple(range(10)))
    inputs, targets, prefix = lm.batch_arrays(trainer.prepare([s, longer]), SMALL.vocab)
    with nc.no_grad():
        logits = model(inputs, prefix).data[0]
    keep = targets[0] != -100
    x = logits[keep]
    nll = np.log(np.exp(x - x.max(1, keepdims=True)).sum(1)) + x.max(1) - x[np.arange(len(x)), targets[0][keep]]
    assert abs(nll.mean() - alone) < 1e-5


def test_training_reduces_loss_and_stage_one_is_unconditional():
    model = lm.TokenLM(SMALL, seed=0)
    s = lm.make_schema("jazz", list(range(12)), label="jazz", max_text=SMALL.max_text)
    tr = lm.LmTrainer(model, lm.LmTrainConfig(lr=3e-3, warmup=1, stage=1))
    assert all(seq[0] == SMALL.vocab.uncond for seq, _ in tr.prepare([s] * 5))
    losses = [tr.step([s] * 4) for _ in range(30)]
    assert losses[-1] < losses[0]
    with pytest.raises(lm.LmError):
        lm.LmTrainConfig(stage=4)
