import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskmusic import audio_io as aio
from deskmusic import corpus as cp
from deskmusic import evalkit as ek
from deskmusic.audio_io import Waveform


def _gauss1d(mu, sigma):
    return ek.EmbeddingStats(np.array([mu]), np.array([[sigma**2]]))


@pytest.fixture(scope="module")
def trained(eval_corpus):
    manifest, root = eval_corpus
    waves = [cp.load_view(r, root) for r in manifest.records]
    feats = [ek.log_mel(w) for w in waves]
    labels = np.array([cp.GENRES.index(r.genre) for r in manifest.records])
    clf, report = ek.fit_classifier(feats, labels, steps=200, seed=0)
    train, held = ek._split(labels, 0.25, np.random.default_rng(0))
    caps = [r.caption for r in manifest.records]
    enc = ek.fit_dual_encoder([feats[i] for i in train], [caps[i] for i in train], seed=0)
    return dict(waves=waves, feats=feats, labels=labels, clf=clf, report=report, enc=enc, held=held, caps=caps)


def test_fd_identity_and_1d_closed_form():
    a = ek.EmbeddingStats(np.array([1.0, -2.0]), np.array([[2.0, 0.3], [0.3, 1.0]]))
    assert ek.frechet_distance(a, a) == 0.0
    for (m1, s1, m2, s2) in [(0.0, 1.0, 1.0, 2.0), (3.0, 0.5, -1.0, 0.1), (0.2, 4.0, 0.2, 4.5)]:
        got = ek.frechet_distance(_gauss1d(m1, s1), _gauss1d(m2, s2))
        assert abs(got - ((m1 - m2) ** 2 + (s1 - s2) ** 2)) < 1e-9


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 3), st.floats(-5, 5), st.floats(0.01, 3)), min_size=1, max_size=6))
@settings(max_examples=40, deadline=None)
def test_fd_diagonal_is_sum_of_1d(dims):
    m1, s1, m2, s2 = (np.array(v) for v in zip(*dims))
    a = ek.EmbeddingStats(m1, np.diag(s1**2))
    b = ek.EmbeddingStats(m2, np.diag(s2**2))
    expect = float(np.sum((m1 - m2) ** 2 + (s1 - s2) ** 2))
    assert abs(ek.frechet_distance(a, b) - expect) < 1e-8 * max(1.0, expect)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_fd_symmetric_and_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    a = ek.EmbeddingStats.from_embeddings(rng.normal(size=(d + 3, d)))
    b = ek.EmbeddingStats.from_embeddings(rng.normal(size=(d + 5, d)) * 2 + 1)
    assert ek.frechet_distance(a, b) == ek.frechet_distance(b, a)
    assert ek.frechet_distance(a, b) >= 0


def test_stats_validation_and_dimension_mismatch():
    with pytest.raises(ek.EvalError):
        ek.EmbeddingStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ek.EvalError):
        ek.EmbeddingStats(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(ek.EvalError):
        ek.frechet_distance(_gauss1d(0, 1), ek.EmbeddingStats(np.zeros(2), np.eye(2)))


def test_stats_accumulation_is_order_independent():
    x = np.random.default_rng(0).normal(size=(60, 4))
    whole = ek.EmbeddingStats.from_embeddings(x)
    parts = [ek.StatsAccumulator.of(x[i : i + 7]) for i in range(0, 60, 7)]
    fwd = parts[0]
    for p in parts[1:]:
        fwd = fwd.merge(p)
    rev = parts[-1]
    for p in parts[-2::-1]:
        rev = rev.merge(p)
    for s in (fwd.stats(), rev.stats()):
        np.testing.assert_allclose(s.mean, whole.mean, atol=1e-6)
        np.testing.assert_allclose(s.cov, whole.cov, atol=1e-6)
    np.testing.assert_allclose(whole.cov, np.cov(x.T), atol=1e-10)


def test_kl_examples():
    p = ek.LabelDist(np.array([1.0, 0.0]))
    q = ek.LabelDist(np.array([0.5, 0.5]))
    assert abs(ek.kl_labels(p, q) - math.log(2)) < 1e-9
    assert ek.kl_labels(q, q) == 0.0
    a, b = ek.LabelDist(np.array([0.9, 0.1])), ek.LabelDist(np.array([0.5, 0.5]))
    assert ek.kl_labels(a, b) != ek.kl_labels(b, a)
    assert ek.kl_labels(q, p) == pytest.approx(0.5 * math.log(0.5 / 1.0) + 0.5 * math.log(0.5 / 1e-10))
    for bad in ([0.5, 0.6], [-0.1, 1.1], []):
        with pytest.raises(ek.EvalError):
            ek.LabelDist(np.array(bad))


@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=8), st.lists(st.floats(0.01, 1), min_size=2, max_size=8))
@settings(max_examples=60, deadline=None)
def test_kl_gibbs(p, q):
    n = min(len(p), len(q))
    p, q = np.array(p[:n]), np.array(q[:n])
    pd, qd = ek.LabelDist(p / p.sum()), ek.LabelDist(q / q.sum())
    assert ek.kl_labels(pd, qd) >= 0
    assert ek.kl_labels(pd, pd) <= 1e-9


def test_cosine_examples():
    v = np.array([1.0, 2.0, 3.0])
    assert ek.cosine(v, v) == pytest.approx(1.0)
    assert ek.cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    with pytest.raises(ek.EvalError):
        ek.cosine(np.zeros(3), v)


def test_si_snr_oracles():
    rng = np.random.default_rng(0)
    x = rng.normal(size=4000)
    assert ek.si_snr(3.0 * x, x) > 100
    noise = rng.normal(size=4000)
    noise -= (noise @ (x - x.mean())) / ((x - x.mean()) @ (x - x.mean())) * (x - x.mean())
    noise *= np.linalg.norm(x - x.mean()) / np.linalg.norm(noise - noise.mean()) / np.sqrt(10)
    assert ek.si_snr(x + noise, x) == pytest.approx(10.0, abs=0.05)


def test_untrained_uniform_classifier():
    clf = ek.GenreClassifier(seed=0)
    clf.head.weight.data[...] = 0.0
    clf.head.bias.data[...] = 0.0
    dist = clf.classify(Waveform(np.random.default_rng(0).normal(size=24000) * 0.1, 24000))
    np.testing.assert_allclose(dist.probs, 1 / len(cp.GENRES), atol=1e-6)


def test_classifier_gate_and_fit(trained):
    assert trained["report"].heldout_accuracy >= 0.8
    assert trained["report"].train_accuracy >= 0.9
    dist = trained["clf"].classify(trained["waves"][0])
    assert abs(dist.probs.sum() - 1) < 1e-6


def test_classifier_warns_when_gate_fails():
    rng = np.random.default_rng(0)
    feats = [rng.normal(size=(100, ek.N_MELS)).astype(np.float32) for _ in range(32)]
    with pytest.warns(ek.ClassifierWarning):
        ek.fit_classifier(feats, [i % 8 for i in range(32)], steps=2)


def test_jazz_vs_metal_kl_separates(trained, eval_corpus):
    manifest, _ = eval_corpus
    waves, clf = trained["waves"], trained["clf"]
    jazz = [w for w, r in zip(waves, manifest.records) if r.genre == "jazz"]
    metal = [w for w, r in zip(waves, manifest.records) if r.genre == "metal"]
    p = ek._mean_dist([clf.classify(w) for w in jazz])
    q = ek._mean_dist([clf.classify(w) for w in metal])
    assert ek.kl_labels(p, q) > 1.0


def test_alignment_ranks_matched_pairs_higher(trained):
    enc, held = trained["enc"], trained["held"]
    audio = [trained["waves"][i] for i in held]
    caps = [trained["caps"][i] for i in held]
    scores = np.array([[ek.alignment_score(c, w, enc) for c in caps] for w in audio])
    assert np.all(np.abs(scores) <= 1.0)
    off = scores[~np.eye(len(held), dtype=bool)]
    assert np.diag(scores).mean() > off.mean()


def test_fd_monotone_under_noise(trained):
    enc = trained["enc"]
    waves = trained["waves"][:32]
    ref = ek.EmbeddingStats.from_embeddings(np.stack([enc.embed_audio(w) for w in waves]))
    rng = np.random.default_rng(0)
    fds = []
    for sigma in (0.0, 0.01, 0.05):
        noisy = [Waveform(w.samples + sigma * rng.standard_normal(len(w)), w.sample_rate) for w in waves]
        fds.append(ek.frechet_distance(ref, ek.EmbeddingStats.from_embeddings(np.stack([enc.embed_audio(w) for w in noisy]))))
    assert fds[0] == 0.0 and fds[0] <= fds[1] <= fds[2]


def _write_dir(path, waves, names):
    path.mkdir()
    for w, n in zip(waves, names):
        aio.write_wav(path / n, w, 32)


def test_evaluate_run_identical_and_smoke(trained, tmp_path):
    kit = ek.EvalKit(trained["clf"], trained["enc"], trained["report"])
    names = [f"g{i}.wav" for i in range(4)]
    waves = trained["waves"][:4]
    _write_dir(tmp_path / "gen", waves, names)
    _write_dir(tmp_path / "ref", waves, names)
    (tmp_path / "gen" / "captions.json").write_text(json.dumps(dict(zip(names, trained["caps"][:4]))))
    rep = ek.evaluate_run(tmp_path / "gen", tmp_path / "ref", kit, metadata={"seed": 0})
    ek.validate_report(rep)
    assert rep["fd"] == 0.0 and rep["kl"] == 0.0 and rep["n"] == 4
    assert math.isfinite(rep["align"]) and rep["si_snr"] > 100
    assert rep["arrows"] == {"kl": "lower", "fd": "lower", "align": "higher", "si_snr": "higher"}
    json.dumps(rep)


def test_evaluate_run_empty_dir(trained, tmp_path):
    kit = ek.EvalKit(trained["clf"], trained["enc"])
    (tmp_path / "empty").mkdir()
    _write_dir(tmp_path / "ref", trained["waves"][:1], ["a.wav"])
    with pytest.raises(ek.EvalError, match="no WAV"):
        ek.evaluate_run(tmp_path / "empty", tmp_path / "ref", kit)


def test_fd_warns_and_clamps_indefinite():
    bad = ek.EmbeddingStats.__new__(ek.EmbeddingStats)
    object.__setattr__(bad, "mean", np.zeros(2))
    object.__setattr__(bad, "cov", np.array([[1.0, 0.0], [0.0, -0.5]]))
    object.__setattr__(bad, "n", 0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        value = ek.frechet_distance(bad, ek.EmbeddingStats(np.zeros(2), np.eye(2)))
    assert value >= 0 and any("clamped" in str(w.message) for w in caught)
