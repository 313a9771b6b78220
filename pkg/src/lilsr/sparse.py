"""Sparse vectors, collections, and the binary collection format."""

from __future__ import annotations

import struct
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

COLLECTION_MAGIC = b"LSRC"
COLLECTION_VERSION = 1
_HEADER = struct.Struct("<4sIII")

# Footprint accounting assumes 16-bit token ids and 16-bit weights.
BYTES_PER_ENTRY = 4
MAX_16BIT_VOCAB = 1 << 16


class CollectionFormatError(ValueError):
    """Base class for malformed collection files."""


class HeaderError(CollectionFormatError):
    pass


class TruncatedPayloadError(CollectionFormatError):
    pass


class TokenOrderError(CollectionFormatError):
    pass


class TokenRangeError(CollectionFormatError):
    pass


class WeightError(CollectionFormatError):
    pass


class EmptyDocumentError(CollectionFormatError):
    pass


class SparseVector:
    """Sorted ``(token_id, weight)`` pairs with strictly positive weights.

    Non-positive weights are dropped on construction; duplicate ids and
    non-finite weights raise ``ValueError``. Unsorted input is sorted.
    """

    __slots__ = ("indices", "values")

    def __init__(self, indices: Iterable[int] = (), values: Iterable[float] = ()):
        idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64)
        val = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
        if idx.ndim != 1 or val.ndim != 1 or idx.shape != val.shape:
            raise ValueError("indices and values must be 1-d sequences of equal length")
        if not np.all(np.isfinite(val)):
            raise ValueError("weights must be finite")
        if idx.size and idx.min() < 0:
            raise ValueError("token ids must be non-negative")
        keep = val > 0
        idx, val = idx[keep], val[keep]
        order = np.argsort(idx, kind="stable")
        idx, val = idx[order], val[order]
        if idx.size > 1 and np.any(idx[1:] == idx[:-1]):
            raise ValueError("duplicate token ids")
        self.indices = idx.astype(np.int32)
        self.values = val
        self.indices.flags.writeable = False
        self.values.flags.writeable = False

    @classmethod
    def _trusted(cls, indices: np.ndarray, values: np.ndarray) -> SparseVector:
        # caller guarantees canonical form
        obj = cls.__new__(cls)
        obj.indices = indices
        obj.values = values
        return obj

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> SparseVector:
        pairs = list(pairs)
        return cls([p[0] for p in pairs], [p[1] for p in pairs])

    @classmethod
    def from_dict(cls, mapping: dict[int, float]) -> SparseVector:
        return cls(list(mapping.keys()), list(mapping.values()))

    @classmethod
    def from_dense(cls, dense) -> SparseVector:
        dense = np.asarray(dense, dtype=np.float64)
        nz = np.flatnonzero(dense > 0)
        return cls(nz, dense[nz])

    def to_dense(self, size: int) -> np.ndarray:
        out = np.zeros(size, dtype=np.float64)
        out[self.indices] = self.values
        return out

    def to_dict(self) -> dict[int, float]:
        return dict(zip(self.indices.tolist(), self.values.tolist()))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def __len__(self) -> int:
        return self.nnz

    def __iter__(self) -> Iterator[tuple[int, float]]:
        return zip(self.indices.tolist(), self.values.tolist())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return np.array_equal(self.indices, other.indices) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.indices.tobytes(), self.values.tobytes()))

    def __repr__(self) -> str:
        body = ", ".join(f"({i}, {w:g})" for i, w in list(self)[:8])
        more = ", ..." if self.nnz > 8 else ""
        return f"SparseVector([{body}{more}])"


def dot(a: SparseVector, b: SparseVector) -> float:
    _, ia, ib = np.intersect1d(a.indices, b.indices, assume_unique=True, return_indices=True)
    return float(np.dot(a.values[ia], b.values[ib]))


def l1_norm(a: SparseVector) -> float:
    return float(np.sum(a.values))


class Collection:
    """Immutable sequence of non-empty sparse documents over a vocabulary.

    Stored as CSR arrays; ``doc_id`` is the row position.
    """

    def __init__(self, vectors: Sequence[SparseVector], vocab_size: int):
        vocab_size = int(vocab_size)
        if vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        lengths = np.fromiter((v.nnz for v in vectors), dtype=np.int64, count=len(vectors))
        if np.any(lengths == 0):
            raise ValueError(f"empty document at position {int(np.argmin(lengths))}")
        indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        if vectors:
            indices = np.concatenate([v.indices for v in vectors]).astype(np.int32)
            values = np.concatenate([v.values for v in vectors]).astype(np.float64)
        else:
            indices = np.zeros(0, dtype=np.int32)
            values = np.zeros(0, dtype=np.float64)
        if indices.size and int(indices.max()) >= vocab_size:
            raise ValueError(f"token id {int(indices.max())} >= vocab_size {vocab_size}")
        self._set(indptr, indices, values, vocab_size)

    def _set(self, indptr, indices, values, vocab_size):
        self.indptr = indptr
        self.indices = indices
        self.values = values
        self.vocab_size = vocab_size
        for arr in (indptr, indices, values):
            arr.flags.writeable = False

    @classmethod
    def from_csr(cls, indptr, indices, values, vocab_size: int) -> Collection:
        """Build from raw CSR arrays, validating every invariant."""
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int32)
        values = np.asarray(values, dtype=np.float64)
        _validate_csr(indptr, indices, values, int(vocab_size), errors=_VALUE_ERRORS)
        obj = cls.__new__(cls)
        obj._set(indptr.copy(), indices.copy(), values.copy(), int(vocab_size))
        return obj

    @property
    def n_docs(self) -> int:
        return int(self.indptr.size - 1)

    @property
    def total_nnz(self) -> int:
        return int(self.indptr[-1])

    def __len__(self) -> int:
        return self.n_docs

    def __getitem__(self, i: int) -> SparseVector:
        if i < 0:
            i += self.n_docs
        if not 0 <= i < self.n_docs:
            raise IndexError(i)
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return SparseVector._trusted(self.indices[lo:hi], self.values[lo:hi])

    def __iter__(self) -> Iterator[SparseVector]:
        for i in range(self.n_docs):
            yield self[i]

    @cached_property
    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.indices, self.indptr), shape=(self.n_docs, self.vocab_size), copy=False
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Collection):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        return f"Collection(n_docs={self.n_docs}, vocab_size={self.vocab_size}, nnz={self.total_nnz})"


@dataclass(frozen=True)
class CollectionStats:
    n_docs: int
    avg_nnz: float
    total_nnz: int
    footprint_bytes: int
    vocab_exceeds_16bit: bool = False

    def summary(self) -> str:
        line = (
            f"docs={self.n_docs} total_nnz={self.total_nnz} avg_nnz={self.avg_nnz:.2f} "
            f"footprint_bytes={self.footprint_bytes}"
        )
        if self.vocab_exceeds_16bit:
            line += " (warning: vocab_size >= 2^16, 16-bit id accounting does not hold)"
        return line


def collection_stats(c: Collection) -> CollectionStats:
    total = c.total_nnz
    return CollectionStats(
        n_docs=c.n_docs,
        avg_nnz=total / c.n_docs if c.n_docs else 0.0,
        total_nnz=total,
        footprint_bytes=BYTES_PER_ENTRY * total,
        vocab_exceeds_16bit=c.vocab_size >= MAX_16BIT_VOCAB,
    )


_FORMAT_ERRORS = {
    "order": TokenOrderError,
    "range": TokenRangeError,
    "weight": WeightError,
    "empty": EmptyDocumentError,
}
_VALUE_ERRORS = dict.fromkeys(_FORMAT_ERRORS, ValueError)


def _validate_csr(indptr, indices, values, vocab_size, errors):
    n_docs = indptr.size - 1
    if indptr[0] != 0 or np.any(np.diff(indptr) < 0) or indptr[-1] != indices.size or indices.size != values.size:
        raise ValueError("inconsistent CSR arrays")
    lengths = np.diff(indptr)
    if np.any(lengths == 0):
        raise errors["empty"](f"document {int(np.argmin(lengths))} is empty")
    if indices.size:
        if indices.min() < 0 or indices.max() >= vocab_size:
            bad = int(np.flatnonzero((indices < 0) | (indices >= vocab_size))[0])
            doc = int(np.searchsorted(indptr, bad, side="right") - 1)
            raise errors["range"](f"document {doc}: token id {int(indices[bad])} out of range [0, {vocab_size})")
        step = np.diff(indices.astype(np.int64))
        starts = np.zeros(indices.size, dtype=bool)
        starts[indptr[:-1][lengths > 0]] = True
        bad_order = (step <= 0) & ~starts[1:]
        if np.any(bad_order):
            pos = int(np.flatnonzero(bad_order)[0]) + 1
            doc = int(np.searchsorted(indptr, pos, side="right") - 1)
            raise errors["order"](
                f"document {doc}: token ids not strictly increasing ({int(indices[pos - 1])}, {int(indices[pos])})"
            )
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            pos = int(np.flatnonzero(~(np.isfinite(values) & (values > 0)))[0])
            doc = int(np.searchsorted(indptr, pos, side="right") - 1)
            raise errors["weight"](f"document {doc}: weight {values[pos]!r} is not finite and positive")
    return n_docs


def collection_to_bytes(c: Collection) -> bytes:
    parts = [_HEADER.pack(COLLECTION_MAGIC, COLLECTION_VERSION, c.vocab_size, c.n_docs)]
    lengths = np.diff(c.indptr)
    ids = c.indices.astype("<u4")
    weights = c.values.astype("<f4")
    for i in range(c.n_docs):
        lo, hi = c.indptr[i], c.indptr[i + 1]
        parts.append(struct.pack("<I", int(lengths[i])))
        parts.append(ids[lo:hi].tobytes())
        parts.append(weights[lo:hi].tobytes())
    return b"".join(parts)


def collection_from_bytes(buf: bytes) -> Collection:
    if len(buf) < _HEADER.size:
        raise HeaderError(f"file too short for header ({len(buf)} bytes)")
    magic, version, vocab_size, n_docs = _HEADER.unpack_from(buf, 0)
    if magic != COLLECTION_MAGIC:
        raise HeaderError(f"bad magic {magic!r}, expected {COLLECTION_MAGIC!r}")
    if version != COLLECTION_VERSION:
        raise HeaderError(f"unsupported format version {version}")
    if vocab_size == 0:
        raise HeaderError("vocab_size is zero")
    offset = _HEADER.size
    id_chunks, w_chunks = [], []
    lengths = np.zeros(n_docs, dtype=np.int64)
    view = memoryview(buf)
    for doc in range(n_docs):
        if offset + 4 > len(buf):
            raise TruncatedPayloadError(f"truncated before document {doc} of {n_docs}")
        (nnz,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        end = offset + 8 * nnz
        if end > len(buf):
            raise TruncatedPayloadError(f"document {doc}: payload needs {8 * nnz} bytes, {len(buf) - offset} left")
        id_chunks.append(np.frombuffer(view[offset : offset + 4 * nnz], dtype="<u4"))
        w_chunks.append(np.frombuffer(view[offset + 4 * nnz : end], dtype="<f4"))
        lengths[doc] = nnz
        offset = end
    if offset != len(buf):
        raise CollectionFormatError(f"{len(buf) - offset} trailing bytes after last document")
    indptr = np.zeros(n_docs + 1, dtype=np.int64)
    np.cumsum(lengths, out=indptr[1:])
    ids = np.concatenate(id_chunks).astype(np.int64) if id_chunks else np.zeros(0, dtype=np.int64)
    weights = np.concatenate(w_chunks).astype(np.float64) if w_chunks else np.zeros(0)
    _validate_csr(indptr, ids, weights, vocab_size, errors=_FORMAT_ERRORS)
    obj = Collection.__new__(Collection)
    obj._set(indptr, ids.astype(np.int32), weights, int(vocab_size))
    return obj


def write_collection(c: Collection, path) -> None:
    Path(path).write_bytes(collection_to_bytes(c))


def read_collection(path) -> Collection:
    return collection_from_bytes(Path(path).read_bytes())
