"""IMCK checkpoint bundles.

Layout, all integers little-endian::

    b"IMCK" | u32 version | u64 meta_len | meta JSON (UTF-8)
           | u64 table_len | table JSON | payload

The metadata holds the module kind, a config echo and the step count. The
table lists ``{name, dtype, shape, offset, nbytes}`` per tensor with offsets
relative to the payload start. Tensors are stored as little-endian float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import nn

MAGIC = b"IMCK"
VERSION = 1
SUPPORTED_VERSIONS = (1,)
_DTYPE = "<f4"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict[str, np.ndarray]


def _encode(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    table, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype=_DTYPE)
        raw = arr.tobytes()
        table.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    meta, tab = _encode(metadata), _encode(table)
    head = MAGIC + struct.pack("<IQ", VERSION, len(meta)) + meta + struct.pack("<Q", len(tab)) + tab
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(head + b"".join(chunks))
        tmp.replace(path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e


def _parse(raw: bytes, source: str) -> tuple[dict, list[dict], memoryview]:
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: not an IMCK checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<IQ", raw, 4)
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointError(f"{source}: checkpoint version {version} is not supported (supported: {SUPPORTED_VERSIONS})")
    pos = 16
    if pos + meta_len + 8 > len(raw):
        raise CheckpointError(f"{source}: truncated metadata block")
    try:
        meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable metadata: {e}") from e
    pos += meta_len
    (tab_len,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if pos + tab_len > len(raw):
        raise CheckpointError(f"{source}: truncated tensor table")
    try:
        table = json.loads(raw[pos : pos + tab_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable tensor table: {e}") from e
    payload = memoryview(raw)[pos + tab_len :]
    _check_table(table, len(payload), source)
    return meta, table, payload


def _check_table(table: list[dict], size: int, source: str) -> None:
    spans = []
    for entry in table:
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{source}: tensor {entry.get('name')} has unsupported dtype {entry.get('dtype')}")
        expect = 4 * int(np.prod(entry["shape"], dtype=np.int64))
        if entry["nbytes"] != expect:
            raise CheckpointError(f"{source}: tensor {entry['name']} size {entry['nbytes']} != shape {entry['shape']}")
        start, end = entry["offset"], entry["offset"] + entry["nbytes"]
        if start < 0 or end > size:
            raise CheckpointError(f"{source}: tensor {entry['name']} [{start}, {end}) is out of bounds ({size} payload bytes)")
        spans.append((start, end, entry["name"]))
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"{source}: tensors {n0} and {n1} overlap")


def _read(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e


def load_checkpoint(path: str | Path) -> Checkpoint:
    meta, table, payload = _parse(_read(path), str(path))
    tensors = {}
    for entry in table:
        buf = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(buf, dtype=_DTYPE).reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(meta, tensors)


def inspect_checkpoint(path: str | Path) -> dict:
    """Metadata and tensor table after bounds and overlap checks."""
    meta, table, payload = _parse(_read(path), str(path))
    return {"version": VERSION, "metadata": meta, "tensors": table, "payload_bytes": len(payload)}


# ---------------------------------------------------------------------------
# module helpers
# ---------------------------------------------------------------------------

_OPT_M, _OPT_V = "optim.m.", "optim.v."


def save_module(
    path: str | Path, kind: str, module: nn.Module, config: dict, step: int = 0,
    opt_state: nc.OptimState | None = None, opt_names: list[str] | None = None, extra: dict | None = None,
) -> None:
    """Parameters plus, when given, Adam moments keyed by parameter name."""
    tensors = dict(module.state_dict())
    if opt_state is not None:
        names = opt_names or list(tensors)
        for name, m, v in zip(names, opt_state.m, opt_state.v):
            tensors[_OPT_M + name] = m
            tensors[_OPT_V + name] = v
    meta = {"kind": kind, "config": config, "step": int(step), "optimizer": opt_state is not None}
    meta.update(extra or {})
    save_checkpoint(path, tensors, meta)


def restore_module(ckpt: Checkpoint, module: nn.Module, kind: str) -> None:
    if ckpt.metadata.get("kind") != kind:
        raise CheckpointError(f"checkpoint holds a {ckpt.metadata.get('kind')!r} module, expected {kind!r}")
    params = {k: v for k, v in ckpt.tensors.items() if not k.startswith(("optim.",))}
    try:
        module.load_state_dict(params)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint does not match the {kind} module: {e}") from e


def optimizer_state(ckpt: Checkpoint, names: list[str]) -> nc.OptimState | None:
    if not ckpt.metadata.get("optimizer"):
        return None
    try:
        m = [ckpt.tensors[_OPT_M + n].copy() for n in names]
        v = [ckpt.tensors[_OPT_V + n].copy() for n in names]
    except KeyError as e:
        raise CheckpointError(f"optimizer state lacks {e}") from e
    return nc.OptimState(m, v, int(ckpt.metadata.get("step", 0)))


__all__ = [
    "Checkpoint",
    "CheckpointError",
    "MAGIC",
    "SUPPORTED_VERSIONS",
    "VERSION",
    "inspect_checkpoint",
    "load_checkpoint",
    "optimizer_state",
    "restore_module",
    "save_checkpoint",
    "save_module",
]
