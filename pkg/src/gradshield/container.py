"""Self-describing tensor container shared by checkpoints, datasets and adversarial batches.

Layout::

    b"GSHLD1\\n"
    uint64 LE  header length H
    H bytes    UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape"}, ...]}
    for each tensor, in header order: prod(shape) float64 little-endian values
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GSHLD1\n"


class ContainerError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries = []
    blobs = []
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True).encode()
    return b"".join([MAGIC, struct.pack("<Q", len(header)), header, *blobs])


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not data.startswith(MAGIC):
        raise ContainerError("not a GSHLD1 container (bad header string)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise ContainerError(f"truncated container at offset {pos}")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + hlen:
        raise ContainerError(f"truncated header at offset {pos}")
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        nbytes = 8 * count
        if len(data) < pos + nbytes:
            raise ContainerError(f"truncated tensor {entry['name']!r} at offset {pos}")
        tensors[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} trailing bytes after offset {pos}")
    return tensors, header["meta"]


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    """Write a container atomically; returns its SHA-256 hex digest."""
    data = encode(tensors, meta)
    atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
