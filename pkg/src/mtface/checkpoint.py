"""Versioned tensor checkpoint format.

Layout::

    b"MTFCKPT\\0"            8-byte magic
    uint32 LE               format version
    uint32 LE               header length in bytes
    header                  UTF-8 JSON: {"tensors": [{"name", "dtype", "shape"}...], "meta": {...}}
    payload                 raw C-order little-endian tensor bytes, in header order

Nothing time-dependent is written, so identical tensors give identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTFCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs = [], []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
        a = a.astype(dt, copy=False)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        blobs.append(a.tobytes(order="C"))
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode())
    pos = 16 + hlen
    out = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        out[e["name"]] = np.frombuffer(raw[pos:pos + n], dtype=dt).reshape(e["shape"]).copy()
        pos += n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out, header.get("meta", {})
