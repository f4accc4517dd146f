"""Versioned binary container of named tensors with a JSON header.

Layout::

    b"RGSEPTNS"               8-byte magic
    uint32 LE                 format version
    uint64 LE                 header length in bytes
    header                    UTF-8 JSON: {"meta": {...}, "tensors": [...]}
    payload                   raw little-endian tensor bytes, concatenated

Each tensor entry records name, dtype, shape, offset and nbytes relative to
the payload start.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"RGSEPTNS"
VERSION = 1


class ContainerError(ValueError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append(dict(name=name, dtype=dt.str, shape=list(arr.shape),
                            offset=offset, nbytes=len(raw)))
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}).encode()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContainerError(f"{path}: not a tensor container")
    if len(data) < 20:
        raise ContainerError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ContainerError(f"{path}: tensor {e['name']!r} is truncated")
        tensors[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, header["meta"]
