"""Byte-deterministic named-tensor container.

Layout: b"SAEC" | version u16 | header length u32 | JSON header | raw tensors.
The header lists each tensor's name, dtype, shape and byte offset, plus a
free-form ``meta`` object. JSON keys are sorted so identical content always
produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .activations import BadMagic, Truncated, UnsupportedVersion

MAGIC = b"SAEC"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        blob = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path} is not a tensor container")
    if len(raw) < _PREFIX.size:
        raise Truncated("container header")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise UnsupportedVersion(f"container version {version}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise Truncated("container JSON header")
    header = json.loads(raw[_PREFIX.size : start])
    out = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        lo = start + e["offset"]
        hi = lo + count * dt.itemsize
        if hi > len(raw):
            raise Truncated(f"tensor {e['name']}")
        out[e["name"]] = np.frombuffer(raw[lo:hi], dtype=dt).reshape(e["shape"]).copy()
    return out, header["meta"]
