"""Binary weight container with a JSON header.

Layout (all integers little-endian)::

    bytes 0..7    magic b"SBPWGT01"
    bytes 8..15   uint64 header length H
    bytes 16..    H bytes of UTF-8 JSON
    then          raw array data, each array C-contiguous little-endian,
                  starting at an 8-byte aligned offset relative to the data block

The header is a JSON object with model metadata (``architecture``,
``classes``, ``seed``, ``training_split_hash`` ...) and an ``arrays`` list of
``{"name", "dtype", "shape", "offset", "nbytes"}`` entries.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

MAGIC = b"SBPWGT01"


def save_weights(path: str | Path, header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes(order="C")
        pad = (-offset) % 8
        if pad:
            blobs.append(b"\0" * pad)
            offset += pad
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta = dict(header)
    meta["arrays"] = entries
    hbytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    return path


def load_weights(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a weight container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for e in header.pop("arrays"):
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ValueError(f"{path}: truncated array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def hash_ids(ids: Iterable[str]) -> str:
    """Order-independent digest of a set of record identifiers."""
    h = hashlib.sha256()
    for s in sorted(ids):
        h.update(s.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()[:16]
