"""Nearest-codeword and residual vector quantization, k-means init, VQ losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import ops


class VqError(ValueError):
    pass


def sq_distances(h: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape (N, V), computed in float64."""
    h = np.asarray(h, dtype=np.float64)
    table = np.asarray(table, dtype=np.float64)
    d = (h * h).sum(-1, keepdims=True) - 2.0 * h @ table.T + (table * table).sum(-1)
    return np.maximum(d, 0.0)


def nearest(h: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``table`` for each row of ``h``; ties go to the lowest index."""
    h2 = np.atleast_2d(h)
    if h2.shape[-1] != table.shape[1]:
        raise VqError(f"vector width {h2.shape[-1]} does not match codebook width {table.shape[1]}")
    d = sq_distances(h2, table)
    best = d.min(axis=1, keepdims=True)
    # the expanded form can split exact ties by rounding; re-check near-ties exactly
    near = d <= best + 1e-9 * (1.0 + best)
    if np.any(near.sum(axis=1) > 1):
        for i in np.nonzero(near.sum(axis=1) > 1)[0]:
            cand = np.nonzero(near[i])[0]
            exact = ((np.asarray(h2[i], np.float64) - table[cand].astype(np.float64)) ** 2).sum(-1)
            d[i, cand] = exact
            d[i, np.setdiff1d(np.arange(d.shape[1]), cand)] = np.inf
    return np.argmin(d, axis=1)


def quantize(h: np.ndarray, table: np.ndarray) -> tuple[int, np.ndarray]:
    code = int(nearest(np.asarray(h)[None], table)[0])
    return code, table[code]


@dataclass
class Codebook:
    table: np.ndarray

    def __post_init__(self) -> None:
        self.table = np.asarray(self.table, dtype=np.float32)
        if self.table.ndim != 2 or self.table.shape[0] < 2:
            raise VqError(f"codebook must be (V>=2, D), got {self.table.shape}")
        if not np.all(np.isfinite(self.table)):
            raise VqError("codebook has non-finite entries")

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def has_duplicates(self) -> bool:
        return len(np.unique(self.table, axis=0)) < self.size

    def encode(self, h: np.ndarray) -> np.ndarray:
        return nearest(h, self.table)


def kmeans(features: np.ndarray, k: int, rng: np.random.Generator, iters: int = 20) -> np.ndarray:
    """k-means++ seeding then Lloyd iterations; returns k distinct centroids.

    When there are fewer distinct feature vectors than ``k`` the extra
    centroids are jittered copies so the codebook never has duplicate rows.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise VqError("k-means needs at least one feature vector")
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d = ((x - centers[0]) ** 2).sum(-1)
    for j in range(1, k):
        total = d.sum()
        idx = rng.choice(n, p=d / total) if total > 0 else rng.integers(n)
        centers[j] = x[idx]
        d = np.minimum(d, ((x - centers[j]) ** 2).sum(-1))
    for _ in range(iters):
        assign = np.argmin(sq_distances(x, centers), axis=1)
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        live = counts > 0
        centers[live] = sums[live] / counts[live, None]
    scale = float(x.std()) + float(np.abs(x).max()) + 1e-6
    centers = centers.astype(np.float32)
    while True:
        _, first = np.unique(centers, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(k), first)
        if not len(dup):
            return centers
        centers[dup] += rng.normal(scale=1e-3 * scale, size=(len(dup), x.shape[1])).astype(np.float32)


def rvq_quantize(x: np.ndarray, tables: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Greedy residual quantization of rows of ``x``.

    Returns (codes (N, S), quantized (N, C), residual norms (N, S+1)); column
    ``i`` of the norms is the residual entering stage ``i``.
    """
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    residual = x2.copy()
    quant = np.zeros_like(x2)
    codes = np.zeros((len(x2), len(tables)), dtype=np.int64)
    norms = [np.linalg.norm(residual, axis=1)]
    for s, table in enumerate(tables):
        c = nearest(residual, table)
        e = np.asarray(table, dtype=np.float64)[c]
        codes[:, s] = c
        quant += e
        residual -= e
        norms.append(np.linalg.norm(residual, axis=1))
    return codes, quant, np.stack(norms, axis=1)


def rvq_dequantize(codes: np.ndarray, tables: Sequence[np.ndarray]) -> np.ndarray:
    codes = np.atleast_2d(codes)
    if codes.shape[1] != len(tables):
        raise VqError(f"codes have {codes.shape[1]} stages, codec has {len(tables)}")
    out = np.zeros((len(codes), tables[0].shape[1]))
    for s, table in enumerate(tables):
        if codes[:, s].min(initial=0) < 0 or codes[:, s].max(initial=0) >= len(table):
            raise VqError(f"stage {s} code out of range [0, {len(table)})")
        out += np.asarray(table, dtype=np.float64)[codes[:, s]]
    return out


@dataclass
class VqOutput:
    quantized: nc.Tensor  # straight-through: forward = codeword, backward = identity to h
    codes: np.ndarray
    codebook_loss: nc.Tensor
    commit_loss: nc.Tensor


def vq_straight_through(h: nc.Tensor, table: nc.Tensor) -> VqOutput:
    """Quantize rows of ``h`` (..., D) against ``table`` (V, D) on the tape."""
    flat = h.data.reshape(-1, h.shape[-1])
    codes = nearest(flat, table.data).reshape(h.shape[:-1])
    e = ops.embedding(table, codes)
    codebook = ops.mse(ops.detach(h), e)
    commit = ops.mse(h, ops.detach(e))
    q = h + ops.detach(e - h)
    return VqOutput(q, codes, codebook, commit)


def rvq_straight_through(h: nc.Tensor, tables: Sequence[nc.Tensor]) -> VqOutput:
    """Residual version; losses are summed over stages, codes have a trailing stage axis."""
    residual = h
    total = None
    codebook = None
    commit = None
    all_codes = []
    for table in tables:
        out = vq_straight_through(residual, table)
        e = ops.embedding(table, out.codes)
        total = ops.detach(e) if total is None else total + ops.detach(e)
        codebook = out.codebook_loss if codebook is None else codebook + out.codebook_loss
        commit = out.commit_loss if commit is None else commit + out.commit_loss
        residual = ops.detach(residual - e)
        all_codes.append(out.codes)
    q = h + ops.detach(total - h)
    return VqOutput(q, np.stack(all_codes, axis=-1), codebook, commit)


def utilization(codes: np.ndarray, size: int) -> float:
    return len(np.unique(codes)) / size


def dead_codes(codes: np.ndarray, size: int) -> np.ndarray:
    return np.setdiff1d(np.arange(size), np.unique(codes))
