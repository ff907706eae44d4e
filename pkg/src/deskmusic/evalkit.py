"""Objective metrics with self-contained toy evaluators.

Fréchet distance is computed between Gaussian fits of audio embeddings, KL
between genre-label distributions, and the alignment score as the cosine of
text and audio embeddings. The embedder and the classifier are small models
trained on the synthetic corpus, so absolute values are only comparable
within this package.
"""

from __future__ import annotations

import json
import math
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsp
from . import numcore as nc
from .audio_io import Waveform, read_wav, resample
from .corpus import GENRES, DatasetManifest, load_view
from .numcore import Tensor, nn, ops

FEATURE_RATE = 24000
N_MELS = 40
FEATURE_STFT = dsp.StftConfig(1024, 256)
CROP_FRAMES = 90  # about 1 s of features
KL_FLOOR = 1e-10
EMBED_DIM = 32
TEXT_BUCKETS = 512
ARROWS = {"kl": "lower", "fd": "lower", "align": "higher", "si_snr": "higher"}


class EvalError(ValueError):
    pass


class ClassifierWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# metric primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int = 0

    def __post_init__(self) -> None:
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if mu.ndim != 1 or cov.shape != (len(mu), len(mu)):
            raise EvalError(f"mean {mu.shape} and covariance {cov.shape} do not match")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise EvalError("covariance is not symmetric")
        if len(mu) and np.linalg.eigvalsh(cov).min() < -1e-8 * max(1.0, np.abs(cov).max()):
            raise EvalError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @classmethod
    def from_embeddings(cls, x: np.ndarray) -> "EmbeddingStats":
        return StatsAccumulator.of(x).stats()


@dataclass
class StatsAccumulator:
    """Running sums for mean and covariance; ``merge`` is associative."""

    n: int = 0
    total: np.ndarray | None = None
    outer: np.ndarray | None = None

    @classmethod
    def of(cls, x: np.ndarray) -> "StatsAccumulator":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return cls(len(x), x.sum(0), x.T @ x)

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        return StatsAccumulator(self.n + other.n, self.total + other.total, self.outer + other.outer)

    def stats(self) -> EmbeddingStats:
        if self.n < 1:
            raise EvalError("no embeddings accumulated")
        mu = self.total / self.n
        cov = self.outer / self.n - np.outer(mu, mu)
        if self.n > 1:
            cov *= self.n / (self.n - 1)
        cov = 0.5 * (cov + cov.T)
        w, v = np.linalg.eigh(cov)
        cov = (v * np.maximum(w, 0.0)) @ v.T  # rounding can leave tiny negative eigenvalues
        return EmbeddingStats(mu, 0.5 * (cov + cov.T), self.n)


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() < -1e-8 * max(1.0, np.abs(w).max()):
        warnings.warn(f"{what} has eigenvalue {w.min():.3g}; clamped to 0", RuntimeWarning, stacklevel=3)
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    sa = _psd_sqrt(a, "covariance")
    w = np.linalg.eigvalsh(0.5 * (sa @ b @ sa + (sa @ b @ sa).T))
    if w.min() < -1e-8 * max(1.0, np.abs(w).max()):
        warnings.warn(f"covariance product has eigenvalue {w.min():.3g}; clamped to 0", RuntimeWarning, stacklevel=3)
    return float(np.sqrt(np.maximum(w, 0.0)).sum())


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)); symmetrized so swapping arguments is exact."""
    if a.dim != b.dim:
        raise EvalError(f"embedding dimensions differ: {a.dim} vs {b.dim}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    diff = a.mean - b.mean
    cross = 0.5 * (_trace_sqrt_product(a.cov, b.cov) + _trace_sqrt_product(b.cov, a.cov))
    value = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * cross
    return max(value, 0.0)


@dataclass(frozen=True)
class LabelDist:
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or len(p) == 0:
            raise EvalError("label distribution must be a non-empty vector")
        if not np.all(np.isfinite(p)) or p.min() < 0 or abs(p.sum() - 1.0) > 1e-6:
            raise EvalError(f"invalid label distribution (min {p.min():.3g}, sum {p.sum():.9f})")
        object.__setattr__(self, "probs", p)


def kl_labels(p: LabelDist, q: LabelDist) -> float:
    """sum p ln(p / q) with q floored at 1e-10; terms with p == 0 contribute nothing."""
    if len(p.probs) != len(q.probs):
        raise EvalError(f"label sets differ: {len(p.probs)} vs {len(q.probs)}")
    mask = p.probs > 0
    pp = p.probs[mask]
    qq = np.maximum(q.probs[mask], KL_FLOOR)
    return max(float(np.sum(pp * (np.log(pp) - np.log(qq)))), 0.0)


def si_snr(estimate: np.ndarray, reference: np.ndarray, eps: float = 1e-12) -> float:
    """Scale-invariant SNR in dB after removing the means."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    n = min(len(est), len(ref))
    est, ref = est[:n] - est[:n].mean(), ref[:n] - ref[:n].mean()
    target = (est @ ref) / (ref @ ref + eps) * ref
    noise = est - target
    return float(10.0 * np.log10((target @ target + eps) / (noise @ noise + eps)))


def spectral_distance(estimate: np.ndarray, reference: np.ndarray, sample_rate: int) -> float:
    """Mean L1 distance between log-mel spectrograms (dB-like units)."""
    a = log_mel(Waveform(estimate, sample_rate))
    b = log_mel(Waveform(reference, sample_rate))
    n = min(len(a), len(b))
    return float(np.abs(a[:n] - b[:n]).mean())


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise EvalError("cannot score a zero-norm embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def log_mel(wave: Waveform) -> np.ndarray:
    """(frames, N_MELS) log-mel power at 24 kHz; 48 kHz input is resampled first."""
    if wave.sample_rate != FEATURE_RATE:
        wave = resample(wave, FEATURE_RATE)
    x = wave.samples
    if len(x) < FEATURE_STFT.fft_size:
        x = np.pad(x, (0, FEATURE_STFT.fft_size - len(x)))
    return np.log(dsp.mel_spectrogram(x, FEATURE_STFT, N_MELS, FEATURE_RATE) + 1e-6).astype(np.float32)


def pooled(feats: np.ndarray) -> np.ndarray:
    """Per-band mean and standard deviation over time."""
    return np.concatenate([feats.mean(0), feats.std(0)]).astype(np.float32)


def _crops(feats: Sequence[np.ndarray], rng: np.random.Generator | None, frames: int = CROP_FRAMES) -> np.ndarray:
    out = np.empty((len(feats), frames, N_MELS), np.float32)
    for i, f in enumerate(feats):
        if len(f) < frames:
            f = np.resize(f, (frames, N_MELS))  # short clips wrap around
        start = 0 if rng is None else int(rng.integers(len(f) - frames + 1))
        out[i] = f[start : start + frames]
    return out


# ---------------------------------------------------------------------------
# toy genre classifier
# ---------------------------------------------------------------------------


class GenreClassifier(nn.Module):
    def __init__(self, n_labels: int = len(GENRES), width: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.conv1 = nn.Conv1d(N_MELS, width, 5, rng, padding=2)
        self.conv2 = nn.Conv1d(width, width, 5, rng, padding=2)
        self.head = nn.Linear(width, n_labels, rng)
        self.feat_mean = nn.param(np.zeros(N_MELS))
        self.feat_std = nn.param(np.ones(N_MELS))
        self.labels = tuple(GENRES[:n_labels]) if n_labels <= len(GENRES) else tuple(map(str, range(n_labels)))

    def trainable(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if not name.startswith("feat_")]

    def logits(self, feats: np.ndarray) -> Tensor:
        """(B, frames, N_MELS) log-mel -> (B, labels)."""
        x = (feats - self.feat_mean.data) / self.feat_std.data
        h = ops.gelu(self.conv1(Tensor(np.ascontiguousarray(x.transpose(0, 2, 1), dtype=np.float32))))
        h = ops.gelu(self.conv2(h))
        return self.head(ops.mean(h, axis=2))

    def predict_proba(self, feats: np.ndarray) -> np.ndarray:
        with nc.no_grad():
            return ops.softmax(self.logits(feats), axis=-1).data.astype(np.float64)

    def classify(self, wave: Waveform) -> LabelDist:
        p = self.predict_proba(log_mel(wave)[None])[0]
        return LabelDist(p / p.sum())


@dataclass
class ClassifierReport:
    train_accuracy: float
    heldout_accuracy: float
    n_train: int
    n_heldout: int
    gate: float = 0.8

    @property
    def passed(self) -> bool:
        return self.heldout_accuracy >= self.gate


def _split(labels: np.ndarray, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train / held-out index split."""
    train, held = [], []
    for g in np.unique(labels):
        idx = rng.permutation(np.nonzero(labels == g)[0])
        k = int(round(frac * len(idx)))
        held.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train, int)), np.sort(np.array(held, int))


def fit_classifier(
    feats: Sequence[np.ndarray], labels: Sequence[int], steps: int = 150, seed: int = 0, heldout: float = 0.25,
    lr: float = 3e-3, batch: int = 32,
) -> tuple[GenreClassifier, ClassifierReport]:
    """Train on log-mel features; warns when held-out accuracy misses the 80% gate."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(feats) != len(labels) or len(feats) == 0:
        raise EvalError("need one label per feature matrix")
    rng = np.random.default_rng(seed)
    tr, ho = _split(labels, heldout, rng) if heldout > 0 else (np.arange(len(labels)), np.array([], int))
    clf = GenreClassifier(seed=seed)
    stacked = np.concatenate([feats[i] for i in tr])
    clf.feat_mean.data = stacked.mean(0).astype(np.float32)
    clf.feat_std.data = (stacked.std(0) + 1e-3).astype(np.float32)
    opt = nc.Adam(clf.trainable(), nc.LrSchedule(lr, 10))
    for _ in range(steps):
        pick = rng.choice(tr, size=min(batch, len(tr)), replace=False)
        loss = ops.cross_entropy(clf.logits(_crops([feats[i] for i in pick], rng)), labels[pick])
        nc.backward(loss)
        opt.step()

    def accuracy(idx: np.ndarray) -> float:
        if not len(idx):
            return float("nan")
        pred = [int(np.argmax(clf.predict_proba(feats[i][None])[0])) for i in idx]
        return float(np.mean(np.array(pred) == labels[idx]))

    report = ClassifierReport(accuracy(tr), accuracy(ho), len(tr), len(ho))
    if len(ho) and not report.passed:
        warnings.warn(
            f"genre classifier held-out accuracy {report.heldout_accuracy:.2f} is below {report.gate:.2f}; "
            "KL values are not meaningful", ClassifierWarning, stacklevel=2,
        )
    return clf, report


def train_toy_classifier(manifest: DatasetManifest, root: str | Path, **kw) -> tuple[GenreClassifier, ClassifierReport]:
    counts = {g: sum(r.genre == g for r in manifest.records) for g in GENRES}
    if min(counts.values()) < 16:
        warnings.warn(f"fewer than 16 clips for some genres: {counts}", ClassifierWarning, stacklevel=2)
    feats = [log_mel(load_view(r, root)) for r in manifest.records]
    return fit_classifier(feats, [GENRES.index(r.genre) for r in manifest.records], **kw)


# ---------------------------------------------------------------------------
# toy dual encoder
# ---------------------------------------------------------------------------


def text_buckets(caption: str) -> np.ndarray:
    """Hashed bag of lower-cased words."""
    words = "".join(c if c.isalnum() else " " for c in caption.lower()).split()
    ids = [zlib.crc32(w.encode("utf-8")) % TEXT_BUCKETS for w in words]
    bag = np.zeros(TEXT_BUCKETS, np.float32)
    np.add.at(bag, ids, 1.0)
    return bag / max(1.0, float(bag.sum()))


class DualEncoder(nn.Module):
    def __init__(self, dim: int = EMBED_DIM, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.a1 = nn.Linear(2 * N_MELS, hidden, rng)
        self.a2 = nn.Linear(hidden, dim, rng)
        self.t1 = nn.Linear(TEXT_BUCKETS, hidden, rng)
        self.t2 = nn.Linear(hidden, dim, rng)
        self.feat_mean = nn.param(np.zeros(2 * N_MELS))
        self.feat_std = nn.param(np.ones(2 * N_MELS))

    def trainable(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if not name.startswith("feat_")]

    def audio_t(self, pooled_feats: np.ndarray) -> Tensor:
        x = (pooled_feats - self.feat_mean.data) / self.feat_std.data
        return self.a2(ops.gelu(self.a1(Tensor(x.astype(np.float32)))))

    def text_t(self, bags: np.ndarray) -> Tensor:
        return self.t2(ops.gelu(self.t1(Tensor(bags.astype(np.float32)))))

    def embed_audio(self, wave: Waveform) -> np.ndarray:
        with nc.no_grad():
            return self.audio_t(pooled(log_mel(wave))[None]).data[0].astype(np.float64)

    def embed_text(self, caption: str) -> np.ndarray:
        with nc.no_grad():
            return self.text_t(text_buckets(caption)[None]).data[0].astype(np.float64)


def _unit(x: Tensor) -> Tensor:
    return x / ops.sqrt(ops.sum(x * x, axis=-1, keepdims=True) + 1e-8)


def contrastive_loss(audio: Tensor, text: Tensor, temperature: float = 0.1) -> Tensor:
    """Symmetric InfoNCE over a batch of matched pairs."""
    sim = ops.matmul(_unit(audio), ops.transpose(_unit(text))) * (1.0 / temperature)
    target = np.arange(sim.shape[0])
    return (ops.cross_entropy(sim, target) + ops.cross_entropy(ops.transpose(sim), target)) * 0.5


def fit_dual_encoder(
    feats: Sequence[np.ndarray], captions: Sequence[str], steps: int = 200, seed: int = 0, lr: float = 3e-3,
    batch: int = 32,
) -> DualEncoder:
    if len(feats) != len(captions) or len(feats) < 2:
        raise EvalError("need at least two (audio, caption) pairs")
    rng = np.random.default_rng(seed)
    enc = DualEncoder(seed=seed)
    pooled_all = np.stack([pooled(f) for f in feats])
    enc.feat_mean.data = pooled_all.mean(0).astype(np.float32)
    enc.feat_std.data = (pooled_all.std(0) + 1e-3).astype(np.float32)
    bags = np.stack([text_buckets(c) for c in captions])
    opt = nc.Adam(enc.trainable(), nc.LrSchedule(lr, 10))
    for _ in range(steps):
        pick = rng.choice(len(feats), size=min(batch, len(feats)), replace=False)
        loss = contrastive_loss(enc.audio_t(pooled_all[pick]), enc.text_t(bags[pick]))
        nc.backward(loss)
        opt.step()
    return enc


def alignment_score(caption: str, wave: Waveform, embedder: DualEncoder) -> float:
    return cosine(embedder.embed_text(caption), embedder.embed_audio(wave))


# ---------------------------------------------------------------------------
# bundle and run evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalKit:
    classifier: GenreClassifier
    embedder: DualEncoder
    report: ClassifierReport | None = None


def train_evalkit(manifest: DatasetManifest, root: str | Path, seed: int = 0, steps: int = 150) -> EvalKit:
    feats = [log_mel(load_view(r, root)) for r in manifest.records]
    clf, report = fit_classifier(feats, [GENRES.index(r.genre) for r in manifest.records], steps=steps, seed=seed)
    enc = fit_dual_encoder(feats, [r.caption for r in manifest.records], steps=steps, seed=seed)
    return EvalKit(clf, enc, report)


def _wavs(d: str | Path) -> list[Path]:
    d = Path(d)
    if not d.is_dir():
        raise EvalError(f"not a directory: {d}")
    files = sorted(d.glob("*.wav"))
    if not files:
        raise EvalError(f"no WAV files in {d}")
    return files


def _mean_dist(dists: list[LabelDist]) -> LabelDist:
    p = np.mean([d.probs for d in dists], axis=0)
    return LabelDist(p / p.sum())


def evaluate_run(
    generated: str | Path, reference: str | Path, kit: EvalKit, captions: dict[str, str] | None = None,
    metadata: dict | None = None,
) -> dict:
    """Table-style report: kl, fd, align, si_snr (paired names only), n, arrows, metadata.

    KL is KL(reference || generated), averaged over files paired by name, or
    between the set-mean label distributions when names do not pair up.
    Captions default to ``captions.json`` in the generated directory.
    """
    gen_files, ref_files = _wavs(generated), _wavs(reference)
    gen = {p.name: read_wav(p) for p in gen_files}
    ref = {p.name: read_wav(p) for p in ref_files}
    if captions is None and (Path(generated) / "captions.json").exists():
        captions = json.loads((Path(generated) / "captions.json").read_text(encoding="utf-8"))
    g_emb = np.stack([kit.embedder.embed_audio(w) for w in gen.values()])
    r_emb = np.stack([kit.embedder.embed_audio(w) for w in ref.values()])
    fd = frechet_distance(EmbeddingStats.from_embeddings(r_emb), EmbeddingStats.from_embeddings(g_emb))
    g_lab = {k: kit.classifier.classify(w) for k, w in gen.items()}
    r_lab = {k: kit.classifier.classify(w) for k, w in ref.items()}
    paired = sorted(set(gen) & set(ref)) if set(gen) == set(ref) else []
    if paired:
        kl = float(np.mean([kl_labels(r_lab[k], g_lab[k]) for k in paired]))
    else:
        kl = kl_labels(_mean_dist(list(r_lab.values())), _mean_dist(list(g_lab.values())))
    align = None
    if captions:
        scores = [alignment_score(captions[k], w, kit.embedder) for k, w in gen.items() if k in captions]
        align = float(np.mean(scores)) if scores else None
    snr = None
    if paired and all(gen[k].sample_rate == ref[k].sample_rate for k in paired):
        snr = float(np.mean([si_snr(gen[k].samples, ref[k].samples) for k in paired]))
    report = {
        "kl": kl,
        "fd": fd,
        "align": align,
        "si_snr": snr,
        "n": len(gen),
        "n_reference": len(ref),
        "arrows": dict(ARROWS),
        "metadata": dict(metadata or {}),
    }
    if kit.report is not None:
        report["metadata"].setdefault("classifier_heldout_accuracy", kit.report.heldout_accuracy)
    return report


REPORT_KEYS = ("kl", "fd", "align", "si_snr", "n", "n_reference", "arrows", "metadata")


def validate_report(report: dict) -> None:
    missing = [k for k in REPORT_KEYS if k not in report]
    if missing:
        raise EvalError(f"report lacks keys {missing}")
    for k in ("kl", "fd"):
        if not isinstance(report[k], float) or not math.isfinite(report[k]):
            raise EvalError(f"report field {k} must be a finite number")


__all__ = [
    "ClassifierReport",
    "DualEncoder",
    "EmbeddingStats",
    "EvalError",
    "EvalKit",
    "GenreClassifier",
    "LabelDist",
    "StatsAccumulator",
    "alignment_score",
    "evaluate_run",
    "fit_classifier",
    "fit_dual_encoder",
    "frechet_distance",
    "kl_labels",
    "log_mel",
    "si_snr",
    "spectral_distance",
    "train_evalkit",
    "train_toy_classifier",
]
