"""PGNN checkpoint container.

Layout: ``b"PGNN"``, u16 version, u32 header length, UTF-8 JSON header
(architecture, normalisation, history, tensor manifest), then every tensor
as raw little-endian float64 in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointFormatError
from .model import ArchitectureSpec, Model
from .train import Checkpoint, EpochRecord

PGNN_MAGIC = b"PGNN"
PGNN_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def _manifest(model: Model):
    entries = []
    for group, dicts in (("params", model.params), ("buffers", model.buffers)):
        for k, d in enumerate(dicts):
            for name in sorted(d):
                entries.append((group, k, name, d[name]))
    return entries


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries = _manifest(ckpt.model)
    header = {
        "architecture": ckpt.spec.to_dict(),
        "n_classes": ckpt.n_classes,
        "band_min": [float(v) for v in ckpt.band_min],
        "band_max": [float(v) for v in ckpt.band_max],
        "best_epoch": ckpt.best_epoch,
        "history": [vars(r) for r in ckpt.history],
        "tensors": [
            {"group": g, "layer": k, "name": n, "shape": list(np.shape(a))} for g, k, n, a in entries
        ],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for *_, a in entries)
    return _PREFIX.pack(PGNN_MAGIC, PGNN_VERSION, len(head)) + head + body


def from_bytes(data: bytes, path=None) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointFormatError("truncated header", path)
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != PGNN_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}", path)
    if version != PGNN_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", path)
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CheckpointFormatError("truncated header", path)
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt header: {exc}", path) from None
    spec = ArchitectureSpec.from_dict(header["architecture"])
    n_layers = len(spec.layers)
    params = [dict() for _ in range(n_layers)]
    buffers = [dict() for _ in range(n_layers)]
    offset = start + hlen
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        nbytes = 8 * count
        if len(data) < offset + nbytes:
            raise CheckpointFormatError("truncated tensor payload", path)
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(t["shape"])
        (params if t["group"] == "params" else buffers)[t["layer"]][t["name"]] = arr
        offset += nbytes
    if offset != len(data):
        raise CheckpointFormatError(f"{len(data) - offset} trailing bytes", path)
    return Checkpoint(
        Model(spec, params, buffers),
        np.array(header["band_min"], dtype=np.float64),
        np.array(header["band_max"], dtype=np.float64),
        [EpochRecord(**r) for r in header["history"]],
        header["best_epoch"],
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), path)
