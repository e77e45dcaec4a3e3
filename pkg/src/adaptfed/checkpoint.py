"""Flat little-endian float64 checkpoints with a JSON shape header.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then the
concatenated ``<f8`` payload of every entry in header order.  The header
lists ``{"name", "shape"}`` per entry plus free-form ``meta``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(entries: list[tuple[str, np.ndarray]], meta: dict | None = None) -> bytes:
    header = {
        "schema_version": SCHEMA_VERSION,
        "dtype": "<f8",
        "entries": [{"name": name, "shape": list(np.shape(a))} for name, a in entries],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in entries)
    return struct.pack("<Q", len(head)) + head + payload


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + n].decode("utf-8"))
    pos = 8 + n
    out = {}
    for e in header["entries"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        out[e["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(e["shape"]).copy()
        pos += 8 * count
    if pos != len(blob):
        raise ValueError("checkpoint payload length does not match its header")
    return out, header.get("meta", {})


def payload_bytes(blob: bytes) -> int:
    (n,) = struct.unpack("<Q", blob[:8])
    return len(blob) - 8 - n


def save(path, entries, meta=None) -> None:
    atomic_write(path, encode(entries, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
