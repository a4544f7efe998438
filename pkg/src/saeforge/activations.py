"""On-disk activation format, row cursors and the shuffled training buffer.

File layout (little-endian throughout)::

    b"SAEB" | version u16 | d_model u32 | n_rows u64 | flags u32
    n_rows * d_model float32, row-major
    one section per set flag bit, in bit order: u64 payload length, payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

MAGIC = b"SAEB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIQI")

FLAG_SEQ_LENS = 1 << 0
FLAG_TOKEN_IDS = 1 << 1
FLAG_VOCAB = 1 << 2
FLAG_LABELS = 1 << 3
FLAG_MASK = 1 << 4
_KNOWN_FLAGS = FLAG_SEQ_LENS | FLAG_TOKEN_IDS | FLAG_VOCAB | FLAG_LABELS | FLAG_MASK


class DatasetError(Exception):
    """Base class for dataset format and invariant errors; ``code`` is stable."""

    code = "dataset_error"

    def __init__(self, message: str = ""):
        super().__init__(f"{self.code.replace('_', ' ')}: {message}" if message else self.code.replace("_", " "))


class BadMagic(DatasetError):
    code = "bad_magic"


class UnsupportedVersion(DatasetError):
    code = "unsupported_version"


class Truncated(DatasetError):
    code = "truncated"


class TrailingBytes(DatasetError):
    code = "trailing_bytes"


class SidecarMismatch(DatasetError, ValueError):
    code = "sidecar_mismatch"


class DataExhausted(Exception):
    """Raised by the buffer when the source cannot supply another batch."""


@dataclass
class ActivationDataset:
    data: np.ndarray
    seq_lens: Optional[np.ndarray] = None
    token_ids: Optional[np.ndarray] = None
    vocab: Optional[list[str]] = None
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    label_classes: dict[str, int] = field(default_factory=dict)
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise SidecarMismatch(f"data must be 2-D, got shape {self.data.shape}")
        if self.seq_lens is not None:
            self.seq_lens = np.asarray(self.seq_lens, dtype=np.int64)
        if self.token_ids is not None:
            self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
        self.labels = {k: np.asarray(v, dtype=np.int64) for k, v in self.labels.items()}

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def d_model(self) -> int:
        return self.data.shape[1]

    def validate(self) -> None:
        n = self.n_rows
        if self.seq_lens is not None:
            if np.any(self.seq_lens < 0) or int(self.seq_lens.sum()) != n:
                raise SidecarMismatch(f"seq_lens sum to {int(self.seq_lens.sum())}, expected {n}")
        if self.token_ids is not None and self.token_ids.shape != (n,):
            raise SidecarMismatch(f"token_ids has shape {self.token_ids.shape}, expected ({n},)")
        if self.vocab is not None and self.token_ids is not None and n:
            if self.token_ids.min() < 0 or self.token_ids.max() >= len(self.vocab):
                raise SidecarMismatch("token id outside vocab")
        if self.mask is not None and self.mask.shape != (n,):
            raise SidecarMismatch(f"mask has shape {self.mask.shape}, expected ({n},)")
        if set(self.labels) != set(self.label_classes):
            raise SidecarMismatch("every label column needs a declared class count")
        for name, col in self.labels.items():
            if col.shape != (n,):
                raise SidecarMismatch(f"label column {name!r} has shape {col.shape}, expected ({n},)")
            k = self.label_classes[name]
            if n and (col.min() < 0 or col.max() >= k):
                raise SidecarMismatch(f"label column {name!r} has values outside [0, {k})")

    def usable_index(self) -> np.ndarray:
        """Row indices that are not masked out."""
        if self.mask is None:
            return np.arange(self.n_rows)
        return np.flatnonzero(self.mask)

    def usable_rows(self) -> np.ndarray:
        if self.mask is None:
            return self.data
        return self.data[self.mask]

    def sequence_bounds(self) -> list[tuple[int, int]]:
        if self.seq_lens is None:
            raise ValueError("dataset has no sequence structure")
        ends = np.cumsum(self.seq_lens)
        starts = ends - self.seq_lens
        return list(zip(starts.tolist(), ends.tolist()))

    def head(self, n: int) -> "ActivationDataset":
        """Leading whole sequences holding at most ``n`` rows (at least one sequence)."""
        if n >= self.n_rows:
            return self
        lens = self.seq_lens
        if lens is not None:
            keep = max(1, int(np.searchsorted(np.cumsum(lens), n, side="right")))
            lens = lens[:keep]
            n = int(lens.sum())
        return ActivationDataset(
            self.data[:n],
            seq_lens=lens,
            token_ids=None if self.token_ids is None else self.token_ids[:n],
            vocab=self.vocab,
            labels={k: v[:n] for k, v in self.labels.items()},
            label_classes=dict(self.label_classes),
            mask=None if self.mask is None else self.mask[:n],
        )

    def equals(self, other: "ActivationDataset") -> bool:
        """Bit-exact comparison of data and all sidecars."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            same(self.data, other.data)
            and same(self.seq_lens, other.seq_lens)
            and same(self.token_ids, other.token_ids)
            and same(self.mask, other.mask)
            and self.vocab == other.vocab
            and list(self.labels) == list(other.labels)
            and all(same(self.labels[k], other.labels[k]) for k in self.labels)
            and self.label_classes == other.label_classes
        )


def _flags(ds: ActivationDataset) -> int:
    flags = 0
    if ds.seq_lens is not None:
        flags |= FLAG_SEQ_LENS
    if ds.token_ids is not None:
        flags |= FLAG_TOKEN_IDS
    if ds.vocab is not None:
        flags |= FLAG_VOCAB
    if ds.labels:
        flags |= FLAG_LABELS
    if ds.mask is not None:
        flags |= FLAG_MASK
    return flags


def _encode_strings(items: list[str]) -> bytes:
    out = [struct.pack("<I", len(items))]
    for s in items:
        b = s.encode("utf-8")
        out.append(struct.pack("<I", len(b)))
        out.append(b)
    return b"".join(out)


def write_dataset(dataset: ActivationDataset, path) -> None:
    dataset.validate()
    flags = _flags(dataset)
    sections = []
    if flags & FLAG_SEQ_LENS:
        sections.append(dataset.seq_lens.astype("<u8").tobytes())
    if flags & FLAG_TOKEN_IDS:
        sections.append(dataset.token_ids.astype("<i8").tobytes())
    if flags & FLAG_VOCAB:
        sections.append(_encode_strings(dataset.vocab))
    if flags & FLAG_LABELS:
        parts = [struct.pack("<I", len(dataset.labels))]
        for name, col in dataset.labels.items():
            b = name.encode("utf-8")
            parts.append(struct.pack("<I", len(b)) + b)
            parts.append(struct.pack("<I", dataset.label_classes[name]))
            parts.append(col.astype("<i4").tobytes())
        sections.append(b"".join(parts))
    if flags & FLAG_MASK:
        sections.append(dataset.mask.astype(np.uint8).tobytes())

    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, dataset.d_model, dataset.n_rows, flags))
        f.write(dataset.data.astype("<f4").tobytes())
        for payload in sections:
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise Truncated(f"{what} needs {n} bytes, {len(self.buf) - self.pos} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(s, what))


def _decode_strings(r: _Reader) -> list[str]:
    (count,) = r.unpack("<I", "vocab count")
    out = []
    for _ in range(count):
        (ln,) = r.unpack("<I", "vocab entry length")
        out.append(bytes(r.take(ln, "vocab entry")).decode("utf-8"))
    return out


def read_dataset(path) -> ActivationDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"{path} does not start with {MAGIC!r}")
    r = _Reader(raw)
    _, version, d, n, flags = r.unpack(_HEADER.format, "header")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"version {version}, this reader handles {FORMAT_VERSION}")
    if flags & ~_KNOWN_FLAGS:
        raise UnsupportedVersion(f"unknown flag bits {flags & ~_KNOWN_FLAGS:#x}")
    data = np.frombuffer(r.take(4 * n * d, "data section"), dtype="<f4").reshape(n, d).astype(np.float32)

    def section(what: str) -> _Reader:
        (ln,) = r.unpack("<Q", f"{what} length")
        return _Reader(bytes(r.take(ln, what)))

    kw: dict = {}
    if flags & FLAG_SEQ_LENS:
        s = section("seq_lens")
        kw["seq_lens"] = np.frombuffer(s.buf, dtype="<u8").astype(np.int64)
    if flags & FLAG_TOKEN_IDS:
        s = section("token_ids")
        kw["token_ids"] = np.frombuffer(s.buf, dtype="<i8").astype(np.int64)
    if flags & FLAG_VOCAB:
        kw["vocab"] = _decode_strings(section("vocab"))
    if flags & FLAG_LABELS:
        s = section("labels")
        (ncols,) = s.unpack("<I", "label count")
        labels, classes = {}, {}
        for _ in range(ncols):
            (ln,) = s.unpack("<I", "label name length")
            name = bytes(s.take(ln, "label name")).decode("utf-8")
            (k,) = s.unpack("<I", "label class count")
            labels[name] = np.frombuffer(s.take(4 * n, f"label {name}"), dtype="<i4").astype(np.int64)
            classes[name] = k
        kw["labels"], kw["label_classes"] = labels, classes
    if flags & FLAG_MASK:
        s = section("mask")
        kw["mask"] = np.frombuffer(s.take(n, "mask"), dtype=np.uint8).astype(bool)
    if r.pos != len(raw):
        raise TrailingBytes(f"{len(raw) - r.pos} bytes after last section")
    ds = ActivationDataset(data, **kw)
    ds.validate()
    return ds


class RowSource(Protocol):
    def read(self, n: int) -> np.ndarray:
        """Return up to ``n`` rows; fewer (possibly zero) once exhausted."""
        ...


class DatasetCursor:
    """Sequential reader over the unmasked rows of a dataset."""

    def __init__(self, dataset: ActivationDataset):
        self.rows = dataset.usable_rows()
        self.pos = 0

    def read(self, n: int) -> np.ndarray:
        out = self.rows[self.pos : self.pos + n]
        self.pos += out.shape[0]
        return out


class ActivationBuffer:
    """Shuffled sampling buffer that refills from ``source`` when half empty.

    On refill the remaining live rows and the fresh rows are permuted
    together; consecutive batches are then drawn from that permutation,
    which is the same law as drawing without replacement from the buffer.
    """

    def __init__(self, source: RowSource, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.source = source
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self._rows: Optional[np.ndarray] = None
        self._pos = 0
        self._source_done = False
        self.refill_log: list[int] = []  # live count at each refill

    @property
    def live(self) -> int:
        return 0 if self._rows is None else self._rows.shape[0] - self._pos

    def _refill(self) -> None:
        live = self.live
        self.refill_log.append(live)
        fresh = self.source.read(self.capacity - live)
        if fresh.shape[0] < self.capacity - live:
            self._source_done = True
        parts = [fresh] if self._rows is None else [self._rows[self._pos :], fresh]
        combined = np.concatenate(parts, axis=0)
        self._rows = combined[self.rng.permutation(combined.shape[0])]
        self._pos = 0

    def sample(self, batch_size: int) -> np.ndarray:
        if batch_size > self.capacity:
            raise ValueError(f"batch_size {batch_size} exceeds buffer capacity {self.capacity}")
        if self.live <= self.capacity / 2 and not self._source_done:
            self._refill()
        if self.live < batch_size:
            raise DataExhausted(f"{self.live} rows left, batch of {batch_size} requested")
        out = self._rows[self._pos : self._pos + batch_size]
        self._pos += batch_size
        return out


def estimate_norm_scale(data, sample_count: int = 100_000, seed: int = 0) -> float:
    """Scale ``c`` such that rows divided by ``c`` have mean squared norm 1."""
    rows = data.usable_rows() if isinstance(data, ActivationDataset) else np.asarray(data)
    if rows.shape[0] == 0:
        raise ValueError("no usable rows to estimate the norm scale from")
    if rows.shape[0] > sample_count:
        idx = np.sort(np.random.default_rng(seed).choice(rows.shape[0], sample_count, replace=False))
        rows = rows[idx]
    ms = float(np.mean(np.sum(np.square(rows, dtype=np.float64), axis=1)))
    if not ms > 0:
        raise ValueError("activations have zero mean squared norm")
    return float(np.sqrt(ms))
