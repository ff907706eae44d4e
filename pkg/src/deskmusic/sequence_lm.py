"""Autoregressive token LM over a unified text/special/audio vocabulary.

Sequence layout for one training example::

    text bytes (m) | ts | te | structure | label | audio tokens (n)      T = m + n + 4

The unconditional variant used for classifier-free guidance replaces the
first m + 4 tokens with a single sentinel. Generation runs the conditional and
unconditional streams side by side with a key/value cache and mixes their
logits before top-K sampling.

Attention is causal with a sliding window over audio positions; the
conditioning prefix stays visible to every position (it is pinned in the
cache), so memory during generation is bounded by prefix + window no matter
how long the output is.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .audio_io import Waveform
from .corpus import GENRES, SECTIONS
from .numcore import Tensor, nn, ops
from .semantic_codec import SemanticCodec, SemanticTokenSeq

TEXT_VOCAB = 256
MAX_SECONDS = 480
STRUCTURES = SECTIONS + ("none",)
LABELS = ("none",) + GENRES
TOKEN_RATE = 75
CFG_DROP_PROB = 0.7
FULL_VOCAB = 156032
STAGES = (1, 2, 3)


class LmError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Id ranges of the unified vocabulary, in order."""

    sem_vocab: int = 256
    text_vocab: int = TEXT_VOCAB
    max_seconds: int = MAX_SECONDS

    @property
    def n_time(self) -> int:
        return self.max_seconds + 1

    @property
    def ts_offset(self) -> int:
        return self.text_vocab

    @property
    def te_offset(self) -> int:
        return self.ts_offset + self.n_time

    @property
    def structure_offset(self) -> int:
        return self.te_offset + self.n_time

    @property
    def label_offset(self) -> int:
        return self.structure_offset + len(STRUCTURES)

    @property
    def uncond(self) -> int:
        return self.label_offset + len(LABELS)

    @property
    def pad(self) -> int:
        return self.uncond + 1

    @property
    def audio_offset(self) -> int:
        return self.pad + 1

    @property
    def n_specials(self) -> int:
        return 2 * self.n_time + len(STRUCTURES) + len(LABELS) + 2

    @property
    def size(self) -> int:
        return self.audio_offset + self.sem_vocab

    def is_audio(self, ids: np.ndarray) -> np.ndarray:
        return np.asarray(ids) >= self.audio_offset


@dataclass(frozen=True)
class LmConfig:
    sem_vocab: int = 256
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    window: int = 1024
    max_text: int = 256
    max_seconds: int = MAX_SECONDS
    vocab_size: int | None = None  # None: exactly the layout size

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads or (self.d_model // self.n_heads) % 2:
            raise LmError("d_model must split into heads of even width")
        if self.window < 1:
            raise LmError("attention window must be positive")
        layout = Vocab(self.sem_vocab, TEXT_VOCAB, self.max_seconds)
        if self.vocab_size is not None and self.vocab_size < layout.size:
            raise LmError(f"vocab_size {self.vocab_size} is smaller than the token layout ({layout.size})")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.sem_vocab, TEXT_VOCAB, self.max_seconds)

    @property
    def n_vocab(self) -> int:
        return self.vocab_size if self.vocab_size is not None else self.vocab.size

    @property
    def max_prefix(self) -> int:
        return self.max_text + 4

    @property
    def max_seq_len(self) -> int:
        return self.max_prefix + TOKEN_RATE * self.max_seconds

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        return cls(**d)


DESK_LM = LmConfig()
# full-scale backbone widths; vocabulary kept at the full-scale constant
FULL_LM_05B = LmConfig(sem_vocab=4096, d_model=896, n_layers=24, n_heads=14, d_ff=4864, vocab_size=FULL_VOCAB)
FULL_LM_15B = LmConfig(sem_vocab=4096, d_model=1536, n_layers=28, n_heads=12, d_ff=8960, vocab_size=FULL_VOCAB)


@dataclass(frozen=True)
class PromptSchema:
    text_tokens: tuple[int, ...]
    time_start: int
    time_end: int
    structure: str
    label: str
    audio_tokens: tuple[int, ...]
    unconditional: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "text_tokens", tuple(int(t) for t in self.text_tokens))
        object.__setattr__(self, "audio_tokens", tuple(int(t) for t in self.audio_tokens))
        if self.structure not in STRUCTURES:
            raise LmError(f"structure must be one of {STRUCTURES}, got {self.structure!r}")
        if self.label not in LABELS:
            raise LmError(f"label must be one of {LABELS}, got {self.label!r}")
        if any(not 0 <= t < TEXT_VOCAB for t in self.text_tokens):
            raise LmError("text tokens must be bytes")

    @property
    def m(self) -> int:
        return len(self.text_tokens)

    @property
    def n(self) -> int:
        return len(self.audio_tokens)


def encode_text(caption: str, max_text: int = DESK_LM.max_text) -> tuple[int, ...]:
    """Byte-level tokens of a caption, truncated to ``max_text``."""
    return tuple(caption.encode("utf-8")[:max_text])


def make_schema(
    caption: str,
    audio_tokens: Sequence[int],
    time_start: float = 0.0,
    time_end: float | None = None,
    structure: str = "none",
    label: str = "none",
    max_text: int = DESK_LM.max_text,
) -> PromptSchema:
    end = len(audio_tokens) / TOKEN_RATE if time_end is None else time_end
    return PromptSchema(encode_text(caption, max_text), int(round(time_start)), int(round(end)), structure, label,
                        tuple(audio_tokens))


def _time_token(seconds: int, offset: int, vocab: Vocab) -> int:
    if not 0 <= seconds <= vocab.max_seconds:
        raise LmError(f"timestamp {seconds}s outside [0, {vocab.max_seconds}]")
    return offset + seconds


def conditioning_ids(schema: PromptSchema, vocab: Vocab) -> list[int]:
    if schema.unconditional:
        return [vocab.uncond]
    return [
        *schema.text_tokens,
        _time_token(schema.time_start, vocab.ts_offset, vocab),
        _time_token(schema.time_end, vocab.te_offset, vocab),
        vocab.structure_offset + STRUCTURES.index(schema.structure),
        vocab.label_offset + LABELS.index(schema.label),
    ]


def build_sequence(schema: PromptSchema, cfg: LmConfig = DESK_LM) -> list[int]:
    vocab = cfg.vocab
    if any(not 0 <= a < vocab.sem_vocab for a in schema.audio_tokens):
        raise LmError(f"audio token outside [0, {vocab.sem_vocab})")
    if schema.m > cfg.max_text:
        raise LmError(f"caption of {schema.m} bytes exceeds max_text {cfg.max_text}")
    if schema.n > cfg.max_seconds * TOKEN_RATE:
        raise LmError(f"{schema.n} audio tokens exceed {cfg.max_seconds} s")
    ids = conditioning_ids(schema, vocab) + [vocab.audio_offset + a for a in schema.audio_tokens]
    if len(ids) > cfg.max_seq_len:
        raise LmError(f"sequence of {len(ids)} tokens exceeds max_seq_len {cfg.max_seq_len}")
    return ids


def parse_sequence(ids: Sequence[int], cfg: LmConfig = DESK_LM) -> PromptSchema:
    vocab = cfg.vocab
    ids = [int(i) for i in ids]
    if ids and ids[0] == vocab.uncond:
        audio = ids[1:]
        if any(i < vocab.audio_offset for i in audio):
            raise LmError("non-audio token after the unconditional sentinel")
        return PromptSchema((), 0, 0, "none", "none", tuple(i - vocab.audio_offset for i in audio), True)
    m = 0
    while m < len(ids) and ids[m] < vocab.text_vocab:
        m += 1
    if len(ids) < m + 4:
        raise LmError("sequence is missing its four special tokens")
    ts, te, st, lb = ids[m : m + 4]
    ranges = [
        (ts, vocab.ts_offset, vocab.n_time),
        (te, vocab.te_offset, vocab.n_time),
        (st, vocab.structure_offset, len(STRUCTURES)),
        (lb, vocab.label_offset, len(LABELS)),
    ]
    for tok, lo, count in ranges:
        if not lo <= tok < lo + count:
            raise LmError(f"token {tok} is not in the expected special range [{lo}, {lo + count})")
    audio = ids[m + 4 :]
    if any(i < vocab.audio_offset or i >= vocab.size for i in audio):
        raise LmError("non-audio token in the audio segment")
    return PromptSchema(
        tuple(ids[:m]),
        ts - vocab.ts_offset,
        te - vocab.te_offset,
        STRUCTURES[st - vocab.structure_offset],
        LABELS[lb - vocab.label_offset],
        tuple(i - vocab.audio_offset for i in audio),
    )


# ---------------------------------------------------------------------------
# guidance and sampling
# ---------------------------------------------------------------------------


def cfg_dropout(schema: PromptSchema, rng: np.random.Generator, p: float = CFG_DROP_PROB) -> PromptSchema:
    """With probability ``p`` replace the conditioning by the unconditional sentinel."""
    if not 0.0 <= p <= 1.0:
        raise LmError(f"drop probability must be in [0, 1], got {p}")
    if rng.random() < p:
        return replace(schema, text_tokens=(), time_start=0, time_end=0, structure="none", label="none",
                       unconditional=True)
    return schema


def cfg_logits(cond: np.ndarray, uncond: np.ndarray, scale: float) -> np.ndarray:
    """``uncond + scale * (cond - uncond)``; scale 1 returns ``cond`` exactly."""
    cond = np.asarray(cond)
    uncond = np.asarray(uncond)
    if cond.shape != uncond.shape:
        raise LmError(f"guidance needs equal shapes, got {cond.shape} and {uncond.shape}")
    if scale < 0:
        raise LmError(f"guidance scale must be >= 0, got {scale}")
    if scale == 1.0:
        return cond.copy()
    return uncond + scale * (cond - uncond)


@dataclass(frozen=True)
class GenParams:
    cfg_scale: float = 3.0
    top_k: int = 350
    temperature: float = 1.0
    max_new_tokens: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.cfg_scale < 0:
            raise LmError("cfg_scale must be >= 0")
        if self.top_k < 1:
            raise LmError("top_k must be >= 1")
        if self.temperature <= 0:
            raise LmError("temperature must be positive")


def topk_distribution(logits: np.ndarray, k: int, temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """(ids, probabilities) of the renormalized softmax over the ``k`` highest logits.

    Ties at the k-th value keep the lowest indices.
    """
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise LmError("logits must be finite")
    k = min(k, x.shape[-1])
    ids = np.argsort(-x, kind="stable")[:k]
    z = x[ids] / temperature
    p = np.exp(z - z.max())
    return ids, p / p.sum()


def sample_topk(logits: np.ndarray, k: int, rng: np.random.Generator, temperature: float = 1.0) -> int:
    ids, p = topk_distribution(logits, k, temperature)
    if len(ids) == 1:
        return int(ids[0])
    c = np.cumsum(p)
    j = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return int(ids[min(j, len(ids) - 1)])


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def rope_tables(positions: np.ndarray, head_dim: int, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rope_t(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c, s = Tensor(cos), Tensor(sin)
    return ops.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


def _rope_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def attention_mask(length: int, prefix_lens: np.ndarray, window: int) -> np.ndarray:
    """Boolean (B, T, T): causal, sliding window, prefix positions always visible."""
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    causal = j <= i
    in_window = (i - j) < window
    pinned = j[None] < np.asarray(prefix_lens)[:, None, None]
    return causal[None] & (in_window[None] | pinned)


class Block(nn.Module):
    def __init__(self, cfg: LmConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d, rng)
        self.proj = nn.Linear(d, d, rng, gain=1.0 / math.sqrt(2 * cfg.n_layers))
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.d_ff, rng)
        self.fc2 = nn.Linear(cfg.d_ff, d, rng, gain=1.0 / math.sqrt(2 * cfg.n_layers))
        self._cfg = cfg

    def __call__(self, x: Tensor, cos: np.ndarray, sin: np.ndarray, bias: np.ndarray) -> Tensor:
        cfg = self._cfg
        b, t, d = x.shape
        h, dh = cfg.n_heads, cfg.head_dim
        qkv = ops.reshape(self.qkv(self.ln1(x)), (b, t, 3, h, dh))
        qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
        q = _rope_t(qkv[0], cos, sin)
        k = _rope_t(qkv[1], cos, sin)
        v = qkv[2]
        scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)) + Tensor(bias)
        att = ops.matmul(ops.softmax(scores, axis=-1), v)
        att = ops.reshape(ops.transpose(att, (0, 2, 1, 3)), (b, t, d))
        x = x + self.proj(att)
        return x + self.fc2(ops.gelu(self.fc1(self.ln2(x))))


class TokenLM(nn.Module):
    def __init__(self, cfg: LmConfig = DESK_LM, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.embed = nn.Embedding(cfg.n_vocab, cfg.d_model, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.n_vocab, rng, bias=False, gain=0.02)
        self._cfg = cfg

    @property
    def config(self) -> LmConfig:
        return self._cfg

    def _check_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.dtype.kind not in "iu":
            raise LmError(f"token ids must be integers, got {ids.dtype}")
        if ids.size and (ids.min() < 0 or ids.max() >= self._cfg.n_vocab):
            raise LmError(f"token id outside [0, {self._cfg.n_vocab})")
        return ids

    def __call__(self, ids: np.ndarray, prefix_lens: Sequence[int] | None = None) -> Tensor:
        """Logits (B, T, V) for token ids (B, T)."""
        ids = self._check_ids(np.atleast_2d(ids))
        b, t = ids.shape
        if t > self._cfg.max_seq_len:
            raise LmError(f"sequence of {t} tokens exceeds max_seq_len {self._cfg.max_seq_len}")
        prefix = np.zeros(b, np.int64) if prefix_lens is None else np.asarray(prefix_lens)
        dtype = self.embed.weight.dtype
        cos, sin = rope_tables(np.arange(t), self._cfg.head_dim, dtype)
        mask = attention_mask(t, prefix, self._cfg.window)
        bias = np.where(mask, 0.0, -1e9).astype(dtype)[:, None]
        x = self.embed(ids)
        for block in self.blocks:
            x = block(x, cos, sin, bias)
        return self.head(self.ln_f(x))


# ---------------------------------------------------------------------------
# cached incremental decoding (plain numpy, no tape)
# ---------------------------------------------------------------------------


def _ln(x: np.ndarray, w: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps) * w + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


class KVCache:
    """Per-row pinned prefix slots plus a shared ring buffer of the last ``window`` positions.

    Slots ``[0, max_prefix)`` hold the conditioning prefix; slots after that
    form the ring. Memory is O(layers x rows x (max_prefix + window))
    regardless of how many tokens are generated.
    """

    def __init__(self, cfg: LmConfig, rows: int, dtype=np.float32):
        shape = (cfg.n_layers, rows, cfg.n_heads, cfg.max_prefix + cfg.window, cfg.head_dim)
        self.k = np.zeros(shape, dtype)
        self.v = np.zeros(shape, dtype)
        self.prefix_len = np.zeros(rows, np.int64)
        self.ring_count = 0
        self.pos = np.zeros(rows, np.int64)
        self.max_prefix = cfg.max_prefix
        self.window = cfg.window

    @property
    def nbytes(self) -> int:
        return self.k.nbytes + self.v.nbytes

    @classmethod
    def stack(cls, caches: Sequence["KVCache"], cfg: LmConfig) -> "KVCache":
        """Merge single-row caches that hold only prefix entries."""
        if any(c.ring_count for c in caches):
            raise LmError("only prefix-only caches can be stacked")
        out = cls(cfg, len(caches), caches[0].k.dtype)
        for r, c in enumerate(caches):
            out.k[:, r] = c.k[:, 0]
            out.v[:, r] = c.v[:, 0]
            out.prefix_len[r] = c.prefix_len[0]
            out.pos[r] = c.pos[0]
        return out


class CachedDecoder:
    """Runs the trained weights one token at a time against a :class:`KVCache`."""

    def __init__(self, model: TokenLM):
        self.cfg = model.config
        sd = model.state_dict()
        self.w = {k: np.asarray(v) for k, v in sd.items()}
        self.dtype = self.w["embed.weight"].dtype

    def step(self, cache: KVCache, tokens: np.ndarray, to_prefix: bool = False) -> np.ndarray:
        """Feed one token per row; returns logits (rows, V)."""
        cfg, w = self.cfg, self.w
        rows = len(tokens)
        h, dh = cfg.n_heads, cfg.head_dim
        if to_prefix and np.any(cache.prefix_len >= cfg.max_prefix):
            raise LmError(f"conditioning prefix exceeds {cfg.max_prefix} tokens")
        x = w["embed.weight"][np.asarray(tokens)]
        cos, sin = rope_tables(cache.pos, dh, self.dtype)
        cos, sin = cos[:, None, :], sin[:, None, :]
        rr = np.arange(rows)
        if to_prefix:
            write = cache.prefix_len
            plen = cache.prefix_len + 1
            n_ring = min(cache.ring_count, cache.window)
        else:
            write = np.full(rows, cache.max_prefix + cache.ring_count % cache.window)
            plen = cache.prefix_len
            n_ring = min(cache.ring_count + 1, cache.window)
        # only the used prefix slots and filled ring slots take part (views, no gather)
        p_used = int(plen.max())
        ring = slice(cache.max_prefix, cache.max_prefix + n_ring)
        bias = np.zeros((rows, 1, 1, p_used + n_ring), self.dtype)
        bias[..., :p_used] = np.where(np.arange(p_used)[None] < plen[:, None], 0.0, -np.inf)[:, None, None, :]
        scale = 1.0 / math.sqrt(dh)
        for li in range(cfg.n_layers):
            p = f"blocks.{li}."
            a = _ln(x, w[p + "ln1.weight"], w[p + "ln1.bias"])
            qkv = (a @ w[p + "qkv.weight"] + w[p + "qkv.bias"]).reshape(rows, 3, h, dh)
            q = _rope_np(qkv[:, 0], cos, sin)
            cache.k[li, rr, :, write] = _rope_np(qkv[:, 1], cos, sin)
            cache.v[li, rr, :, write] = qkv[:, 2]
            kl, vl = cache.k[li], cache.v[li]
            qe = q[:, :, None, :]
            s = np.concatenate(
                [qe @ np.swapaxes(kl[:, :, :p_used], -1, -2), qe @ np.swapaxes(kl[:, :, ring], -1, -2)], axis=-1
            ) * scale + bias
            s = np.exp(s - s.max(-1, keepdims=True))
            s /= s.sum(-1, keepdims=True)
            att = (s[..., :p_used] @ vl[:, :, :p_used] + s[..., p_used:] @ vl[:, :, ring]).reshape(rows, cfg.d_model)
            x = x + att @ w[p + "proj.weight"] + w[p + "proj.bias"]
            f = _gelu(_ln(x, w[p + "ln2.weight"], w[p + "ln2.bias"]) @ w[p + "fc1.weight"] + w[p + "fc1.bias"])
            x = x + f @ w[p + "fc2.weight"] + w[p + "fc2.bias"]
        if to_prefix:
            cache.prefix_len += 1
        else:
            cache.ring_count += 1
        cache.pos += 1
        return _ln(x, w["ln_f.weight"], w["ln_f.bias"]) @ w["head.weight"]

    def prefill(self, prefix: Sequence[int]) -> tuple[KVCache, np.ndarray]:
        """Single-row cache holding ``prefix`` as pinned positions; returns logits after the last token."""
        if not prefix:
            raise LmError("prefix must contain at least one token")
        cache = KVCache(self.cfg, 1, self.dtype)
        logits = None
        for tok in prefix:
            logits = self.step(cache, np.array([tok]), to_prefix=True)
        return cache, logits


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _audio_logits(logits: np.ndarray, vocab: Vocab) -> np.ndarray:
    return logits[..., vocab.audio_offset : vocab.audio_offset + vocab.sem_vocab]


def generate_tokens(
    model: TokenLM,
    cond_prefix: Sequence[int],
    audio_prompt: Sequence[int],
    n_new: int,
    params: GenParams,
    on_step: Callable[[int], None] | None = None,
) -> np.ndarray:
    """Guided sampling of ``n_new`` audio tokens after ``audio_prompt``.

    Conditional and unconditional streams share one batched cache; only
    audio ids are eligible for sampling, and generation stops at the budget.
    """
    cfg = model.config
    vocab = cfg.vocab
    if n_new < 0:
        raise LmError("token budget must be non-negative")
    if len(cond_prefix) + len(audio_prompt) + n_new > cfg.max_seq_len:
        raise LmError(f"{len(cond_prefix) + len(audio_prompt) + n_new} tokens exceed max_seq_len {cfg.max_seq_len}")
    rng = np.random.default_rng(params.seed)
    dec = CachedDecoder(model)
    cond, cond_last = dec.prefill(list(cond_prefix))
    uncond, uncond_last = dec.prefill([vocab.uncond])
    cache = KVCache.stack([cond, uncond], cfg)
    out = np.empty(n_new, np.int64)
    k = min(params.top_k, vocab.sem_vocab)
    last = np.concatenate([cond_last, uncond_last])
    for a in audio_prompt:
        last = dec.step(cache, np.full(2, vocab.audio_offset + int(a)))
    for i in range(n_new):
        mixed = cfg_logits(_audio_logits(last[0], vocab), _audio_logits(last[1], vocab), params.cfg_scale)
        tok = sample_topk(mixed, k, rng, params.temperature)
        out[i] = tok
        if on_step is not None:
            on_step(i)
        if i + 1 < n_new:
            last = dec.step(cache, np.full(2, vocab.audio_offset + tok))
    return out


def _duration_tokens(seconds: float, cfg: LmConfig) -> int:
    if seconds < 0 or seconds > cfg.max_seconds:
        raise LmError(f"duration {seconds}s outside [0, {cfg.max_seconds}]")
    return int(round(TOKEN_RATE * seconds))


def generate_t2m(
    model: TokenLM,
    caption: str,
    duration_s: float,
    params: GenParams = GenParams(),
    structure: str = "none",
    label: str = "none",
) -> SemanticTokenSeq:
    cfg = model.config
    n = _duration_tokens(duration_s, cfg)
    if params.max_new_tokens is not None:
        n = min(n, params.max_new_tokens)
    schema = make_schema(caption, (), 0, duration_s, structure, label, cfg.max_text)
    prefix = conditioning_ids(schema, cfg.vocab)
    codes = generate_tokens(model, prefix, (), n, params)
    return SemanticTokenSeq(codes, cfg.sem_vocab)


def generate_continuation(
    model: TokenLM,
    codec: SemanticCodec,
    audio_prompt: Waveform,
    extra_duration_s: float,
    params: GenParams = GenParams(),
    caption: str = "",
    structure: str = "none",
    label: str = "none",
) -> SemanticTokenSeq:
    """Encode the prompt, keep its tokens as the prefix and extend by ``extra_duration_s``."""
    cfg = model.config
    prompt = codec.encode(audio_prompt).codes
    n_new = _duration_tokens(extra_duration_s, cfg)
    if params.max_new_tokens is not None:
        n_new = min(n_new, params.max_new_tokens)
    if len(prompt) > TOKEN_RATE * cfg.max_seconds:
        raise LmError(f"prompt of {len(prompt)} tokens exceeds the {cfg.max_seconds}s limit")
    total_s = min(cfg.max_seconds, (len(prompt) + n_new) / TOKEN_RATE)
    if n_new == 0:
        return SemanticTokenSeq(prompt.copy(), cfg.sem_vocab)
    schema = make_schema(caption, (), 0, total_s, structure, label, cfg.max_text)
    prefix = conditioning_ids(schema, cfg.vocab)
    new = generate_tokens(model, prefix, prompt, n_new, params)
    return SemanticTokenSeq(np.concatenate([prompt, new]), cfg.sem_vocab)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class LmTrainConfig:
    stage: int = 2
    lr: float = 1e-3
    warmup: int = 20
    batch: int = 8
    drop_prob: float = CFG_DROP_PROB
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise LmError(f"stage must be one of {STAGES}, got {self.stage}")


def batch_arrays(seqs: Sequence[tuple[list[int], int]], vocab: Vocab) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(inputs, targets, prefix lengths) with right padding; padded and text targets are ignored."""
    t = max(len(s) for s, _ in seqs) - 1
    inputs = np.full((len(seqs), t), vocab.pad, np.int64)
    targets = np.full((len(seqs), t), -100, np.int64)
    prefix = np.zeros(len(seqs), np.int64)
    for r, (ids, plen) in enumerate(seqs):
        ids = np.asarray(ids)
        inputs[r, : len(ids) - 1] = ids[:-1]
        tgt = ids[1:].copy()
        tgt[tgt < vocab.text_vocab] = -100  # text is given, not predicted
        targets[r, : len(ids) - 1] = tgt
        prefix[r] = plen
    return inputs, targets, prefix


class LmTrainer:
    """Next-token training with per-sample condition dropout.

    Stage 1 trains on audio tokens only (every example unconditional); stages
    2 and 3 use caption + audio with dropout at ``drop_prob``.
    """

    def __init__(self, model: TokenLM, cfg: LmTrainConfig | None = None, state: nc.OptimState | None = None):
        self.model = model
        self.cfg = cfg or LmTrainConfig()
        self.rng = np.random.default_rng(self.cfg.seed)
        self.opt = nc.Adam(model.parameters(), nc.LrSchedule(self.cfg.lr, self.cfg.warmup), state=state)

    def prepare(self, schemas: Sequence[PromptSchema]) -> list[tuple[list[int], int]]:
        mcfg = self.model.config
        out = []
        for s in schemas:
            if self.cfg.stage == 1:
                s = cfg_dropout(s, self.rng, 1.0)
            else:
                s = cfg_dropout(s, self.rng, self.cfg.drop_prob)
            out.append((build_sequence(s, mcfg), len(conditioning_ids(s, mcfg.vocab))))
        return out

    def loss(self, schemas: Sequence[PromptSchema]) -> Tensor:
        inputs, targets, prefix = batch_arrays(self.prepare(schemas), self.model.config.vocab)
        logits = self.model(inputs, prefix)
        return ops.cross_entropy(ops.reshape(logits, (-1, logits.shape[-1])), targets.reshape(-1))

    def step(self, schemas: Sequence[PromptSchema]) -> float:
        loss = self.loss(schemas)
        value = loss.item()
        if not np.isfinite(value):
            nc.clear_tape()
            raise nc.NonFiniteError(f"LM loss is {value}; step aborted")
        nc.backward(loss)
        self.opt.step()
        return value


def corpus_schemas(
    records: Sequence, token_seqs: Sequence[np.ndarray], stage: int = 2, max_text: int = DESK_LM.max_text
) -> list[PromptSchema]:
    """Training schemas from manifest records and their semantic tokens."""
    out = []
    for rec, codes in zip(records, token_seqs):
        structure = rec.structure[0] if len(rec.structure) == 1 else "none"
        caption = rec.caption if stage != 1 else ""
        out.append(make_schema(caption, codes, 0, len(codes) / TOKEN_RATE, structure, rec.genre, max_text))
    return out


__all__ = [
    "CFG_DROP_PROB",
    "FULL_VOCAB",
    "GenParams",
    "KVCache",
    "LmConfig",
    "LmError",
    "LmTrainConfig",
    "LmTrainer",
    "PromptSchema",
    "TokenLM",
    "Vocab",
    "build_sequence",
    "cfg_dropout",
    "cfg_logits",
    "generate_continuation",
    "generate_t2m",
    "parse_sequence",
    "sample_topk",
]
