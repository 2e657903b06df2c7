"""Checkpoint format: a JSON header followed by raw little-endian float64 tensors.

Layout::

    bytes 0..7      uint64 little-endian, length L of the JSON header
    bytes 8..8+L    UTF-8 JSON {"tensors": [{"name", "shape", "offset"}], "meta": {...}}
    remainder       concatenated '<f8' C-order tensor data; offsets are relative
                    to the start of this region

Keys are written in sorted order so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

from ._io import atomic_write_bytes


def dump_tensors(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        a = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        raw = a.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def parse_tensors(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    (hlen,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    base = 8 + hlen
    out = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        a = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        out[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return out, header.get("meta", {})


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write_bytes(path, dump_tensors(tensors, meta))


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return parse_tensors(fh.read())
