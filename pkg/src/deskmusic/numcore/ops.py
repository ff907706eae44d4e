"""Differentiable operations over :class:`Tensor`.

Each op computes its forward result with numpy and registers a closure that
maps the output gradient to input gradients. Broadcasting follows numpy; the
tape sums broadcast gradients back to operand shapes.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, as_tensor, record

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return record(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad**exponent
    return record(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return record(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return record(out, (a,), bw, "gelu")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return record(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    sign = np.sign(a.data)
    return record(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clip(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    mask = np.ones_like(x, dtype=bool)
    if lo is not None:
        mask &= x >= lo
    if hi is not None:
        mask &= x <= hi
    return record(out, (a,), lambda g: (g * mask,), "clip")


def detach(a) -> Tensor:
    return as_tensor(a).detach()


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return record(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {src} as {tuple(shape)}") from None
    return record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record(np.array(out) if basic else out, (a,), bw, "getitem")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concatenate: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return record(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concatenate")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concatenate([expand_dims(t, axis) for t in ts], axis=axis)


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = list(a.shape)
    axis = axis % (a.ndim + 1)
    shape.insert(axis, 1)
    return reshape(a, shape)


def pad(a, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    out = np.pad(a.data, widths)
    sl = tuple(slice(lo, out.shape[i] - hi) for i, (lo, hi) in enumerate(widths))
    return record(out, (a,), lambda g: (g[sl],), "pad")


def repeat(a, repeats: int, axis: int) -> Tensor:
    """``np.repeat`` along one axis (each element repeated ``repeats`` times)."""
    a = as_tensor(a)
    axis = axis % a.ndim
    shape = a.shape

    def bw(g):
        split = shape[:axis] + (shape[axis], repeats) + shape[axis + 1:]
        return (g.reshape(split).sum(axis=axis + 1),)

    return record(np.repeat(a.data, repeats, axis=axis), (a,), bw, "repeat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return record(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# normalization, softmax, losses
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), bw, "log_softmax")


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = xd.shape[-1]

    def bw(g):
        gx = inv / n * (n * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return (gx,)

    out = record(xhat, (x,), bw, "layer_norm")
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab}): min {ids.min()}, max {ids.max()}")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return record(table.data[ids], (table,), bw, "embedding")


def cross_entropy(logits, targets, ignore_index: int = -100) -> Tensor:
    """Mean token cross-entropy over rows whose target is not ``ignore_index``.

    ``logits`` is (N, V) and ``targets`` (N,). Ignored rows contribute nothing
    to the value or the gradient.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    x = logits.data
    keep = targets != ignore_index
    count = max(int(keep.sum()), 1)
    safe_t = np.where(keep, targets, 0)
    if keep.any() and (safe_t.min() < 0 or safe_t.max() >= x.shape[1]):
        raise IndexError(f"cross_entropy target out of range [0, {x.shape[1]})")
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(x.shape[0])
    nll = lse - shifted[rows, safe_t]
    value = np.asarray((nll * keep).sum() / count, dtype=x.dtype)

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, safe_t] -= 1.0
        p *= (keep / count)[:, None]
        return (p * g,)

    return record(value, (logits,), bw, "cross_entropy")


def mse(a, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


def l1(a, b) -> Tensor:
    return mean(abs(sub(a, b)))


# ---------------------------------------------------------------------------
# convolutions and framing
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kernel: int, stride: int, n_out: int) -> np.ndarray:
    """Strided view (B, C, n_out, K) over a padded (B, C, L) array."""
    b, c, _ = xp.shape
    sb, sc, sl = xp.strides
    return as_strided(xp, shape=(b, c, n_out, kernel), strides=(sb, sc, sl * stride, sl), writeable=False)


def _col2im(cols: np.ndarray, stride: int, length: int) -> np.ndarray:
    """Scatter-add (B, n, C, K) patches into a (B, C, length) array."""
    b, n, c, k = cols.shape
    out = np.zeros((b, c, length), dtype=cols.dtype)
    if k % stride == 0:
        m = k // stride
        for j in range(m):
            block = cols[:, :, :, j * stride:(j + 1) * stride]
            out[:, :, j * stride:j * stride + n * stride] += block.transpose(0, 2, 1, 3).reshape(b, c, n * stride)
    else:
        for j in range(k):
            out[:, :, j:j + stride * (n - 1) + 1:stride] += cols[:, :, :, j].transpose(0, 2, 1)
    return out


def _padding(padding) -> tuple[int, int]:
    if isinstance(padding, int):
        return padding, padding
    lo, hi = padding
    return int(lo), int(hi)


def conv1d(x, weight, bias=None, stride: int = 1, padding=0) -> Tensor:
    """1-D cross-correlation. x (B, Cin, L), weight (Cout, Cin, K) -> (B, Cout, Lout)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} and weight {weight.shape} do not conform")
    pl, pr = _padding(padding)
    k = weight.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr))) if (pl or pr) else x.data
    length = xp.shape[2]
    n_out = (length - k) // stride + 1
    if n_out < 1:
        raise ShapeError(f"conv1d: input length {x.shape[2]} too short for kernel {k}")
    cols = _im2col(xp, k, stride, n_out)
    wd = weight.data
    out = np.tensordot(cols, wd, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)
    in_len = x.shape[2]

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
        gcols = np.tensordot(g, wd, axes=([1], [0]))  # (B, n, Cin, K)
        gx = _col2im(gcols, stride, length)[:, :, pl:pl + in_len]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, bw, "conv1d")


def conv_transpose1d(x, weight, bias=None, stride: int = 1, crop=0) -> Tensor:
    """Transposed conv. x (B, Cin, L), weight (Cin, Cout, K) -> (B, Cout, (L-1)*stride + K - crops)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose1d: input {x.shape} and weight {weight.shape} do not conform")
    cl, cr = _padding(crop)
    n = x.shape[2]
    k = weight.shape[2]
    full_len = (n - 1) * stride + k
    wd, xd = weight.data, x.data
    cols = np.tensordot(xd, wd, axes=([1], [0]))  # (B, n, Cout, K)
    full = _col2im(cols, stride, full_len)
    out = full[:, :, cl:full_len - cr]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (cl, cr))) if (cl or cr) else g
        gcols = _im2col(np.ascontiguousarray(gfull), k, stride, n)  # (B, Cout, n, K)
        gx = np.tensordot(gcols, wd, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
        gw = np.tensordot(xd, gcols, axes=([0, 2], [0, 2]))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, bw, "conv_transpose1d")


def frame(x, size: int, hop: int) -> Tensor:
    """Slice (B, L) into overlapping frames (B, T, size) with T = (L - size) // hop + 1."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"frame expects (B, L), got {x.shape}")
    b, length = x.shape
    n = (length - size) // hop + 1
    if n < 1:
        raise ShapeError(f"frame: length {length} shorter than frame size {size}")
    xd = np.ascontiguousarray(x.data)
    sb, sl = xd.strides
    out = np.array(as_strided(xd, shape=(b, n, size), strides=(sb, sl * hop, sl), writeable=False))

    def bw(g):
        full = _col2im(g[:, :, None, :], hop, (n - 1) * hop + size)[:, 0]
        if full.shape[1] < length:
            full = np.pad(full, ((0, 0), (0, length - full.shape[1])))
        return (full,)

    return record(out, (x,), bw, "frame")


def overlap_add(frames, hop: int) -> Tensor:
    """Sum (B, T, N) frames at stride ``hop`` into (B, (T-1)*hop + N)."""
    frames = as_tensor(frames)
    if frames.ndim != 3:
        raise ShapeError(f"overlap_add expects (B, T, N), got {frames.shape}")
    b, t, n = frames.shape
    fd = frames.data
    out = _col2im(fd[:, :, None, :], hop, (t - 1) * hop + n)[:, 0]

    def bw(g):
        gd = np.ascontiguousarray(g)
        sb, sl = gd.strides
        return (np.array(as_strided(gd, shape=(b, t, n), strides=(sb, sl * hop, sl), writeable=False)),)

    return record(out, (frames,), bw, "overlap_add")
