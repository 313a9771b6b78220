"""Lookup-table query encoder.

Each vocabulary token gets a static score ``log(1 + relu(w . e + b))`` from
its word embedding ``e``. Encoding a query is then a table lookup, with
scores multiplied by how often the token repeats.
"""

from __future__ import annotations

import math
import struct
from collections.abc import Iterable
from pathlib import Path

import numpy as np

from lilsr.sparse import Collection, SparseVector

EMBEDDING_MAGIC = b"LSRE"
EMBEDDING_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIII")

TABLE_HEADER = "#LSRT v1 vocab={}"
IDF_HEADER = "#LSRIDF v1 vocab={} n_docs={}"


class EmptyQueryError(ValueError):
    """A query whose every token scores zero."""


class TableFormatError(ValueError):
    pass


class EmbeddingMatrix:
    def __init__(self, rows):
        rows = np.array(rows, dtype=np.float64, ndmin=2)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValueError("embedding matrix must be 2-d with at least one row")
        if not np.all(np.isfinite(rows)):
            raise ValueError("embedding entries must be finite")
        rows.flags.writeable = False
        self.rows = rows

    @property
    def vocab_size(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def to_bytes(self) -> bytes:
        header = _EMB_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, self.vocab_size, self.dim)
        return header + self.rows.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> EmbeddingMatrix:
        if len(buf) < _EMB_HEADER.size:
            raise TableFormatError("embedding file too short for header")
        magic, version, V, d = _EMB_HEADER.unpack_from(buf, 0)
        if magic != EMBEDDING_MAGIC or version != EMBEDDING_VERSION:
            raise TableFormatError(f"bad embedding header {magic!r} v{version}")
        need = _EMB_HEADER.size + 4 * V * d
        if len(buf) != need:
            raise TableFormatError(f"embedding payload is {len(buf)} bytes, expected {need}")
        rows = np.frombuffer(buf, dtype="<f4", offset=_EMB_HEADER.size).reshape(V, d)
        return cls(rows.astype(np.float64))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> EmbeddingMatrix:
        return cls.from_bytes(Path(path).read_bytes())


class ScoreTable:
    """Non-negative per-token scores indexed by token id."""

    def __init__(self, scores):
        scores = np.array(scores, dtype=np.float64)
        if scores.ndim != 1:
            raise ValueError("scores must be 1-d")
        if not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise ValueError("scores must be finite and non-negative")
        scores.flags.writeable = False
        self.scores = scores

    def __len__(self) -> int:
        return self.scores.size

    def __getitem__(self, token_id: int) -> float:
        return float(self.scores[token_id])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScoreTable):
            return NotImplemented
        return np.array_equal(self.scores, other.scores)

    def save(self, path) -> None:
        lines = [TABLE_HEADER.format(len(self))]
        lines += [f"{i}\t{s!r}" for i, s in enumerate(self.scores.tolist())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> ScoreTable:
        header, rows = _read_table_text(path, "#LSRT v1")
        V = _header_int(header, "vocab")
        return cls(_fill(rows, V, path))


class IdfTable:
    def __init__(self, idf, n_docs: int):
        idf = np.array(idf, dtype=np.float64)
        if idf.ndim != 1 or not np.all(np.isfinite(idf)) or np.any(idf < 0):
            raise ValueError("idf must be a 1-d array of finite non-negative values")
        idf.flags.writeable = False
        self.idf = idf
        self.n_docs = int(n_docs)

    def __len__(self) -> int:
        return self.idf.size

    def save(self, path) -> None:
        lines = [IDF_HEADER.format(len(self), self.n_docs)]
        lines += [f"{i}\t{v!r}" for i, v in enumerate(self.idf.tolist())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> IdfTable:
        header, rows = _read_table_text(path, "#LSRIDF v1")
        V = _header_int(header, "vocab")
        return cls(_fill(rows, V, path), _header_int(header, "n_docs"))


def _read_table_text(path, prefix: str):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(prefix):
        raise TableFormatError(f"{path}: missing '{prefix}' header")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TableFormatError(f"{path}:{lineno}: expected 'token_id<TAB>value'")
        try:
            rows.append((int(parts[0]), float(parts[1]), lineno))
        except ValueError as exc:
            raise TableFormatError(f"{path}:{lineno}: {exc}") from exc
    return lines[0], rows


def _header_int(header: str, key: str) -> int:
    for field in header.split():
        name, _, value = field.partition("=")
        if name == key:
            try:
                return int(value)
            except ValueError:
                break
    raise TableFormatError(f"header {header!r} lacks a valid {key}=")


def _fill(rows, V: int, path) -> np.ndarray:
    if len(rows) > V:
        raise TableFormatError(f"{path}: {len(rows)} entries for a vocabulary of {V}")
    out = np.zeros(V, dtype=np.float64)
    seen = np.zeros(V, dtype=bool)
    for tid, value, lineno in rows:
        if not 0 <= tid < V:
            raise TableFormatError(f"{path}:{lineno}: token id {tid} outside vocabulary of {V}")
        if seen[tid]:
            raise TableFormatError(f"{path}:{lineno}: duplicate token id {tid}")
        if not math.isfinite(value) or value < 0:
            raise TableFormatError(f"{path}:{lineno}: value {value!r} must be finite and non-negative")
        seen[tid] = True
        out[tid] = value
    return out


def score_from_embedding(w, b: float, e) -> float:
    w = np.asarray(w, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if w.shape != e.shape or w.ndim != 1:
        raise ValueError(f"dimension mismatch: w {w.shape} vs e {e.shape}")
    return math.log1p(max(0.0, float(w @ e) + float(b)))


def table_scores(w, b: float, rows: np.ndarray, special_ids: Iterable[int] = ()) -> np.ndarray:
    pre = rows @ np.asarray(w, dtype=np.float64) + float(b)
    scores = np.log1p(np.maximum(pre, 0.0))
    scores[list(special_ids)] = 0.0
    return scores


def build_table(w, b: float, E: EmbeddingMatrix, special_ids: Iterable[int] = ()) -> ScoreTable:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (E.dim,):
        raise ValueError(f"w has shape {w.shape}, embeddings have dim {E.dim}")
    return ScoreTable(table_scores(w, b, E.rows, special_ids))


def encode_query(toks, t: ScoreTable) -> SparseVector:
    """Weight each distinct token by ``count * score``; zero scores drop out."""
    toks = np.asarray(toks, dtype=np.int64)
    if toks.size and (toks.min() < 0 or toks.max() >= len(t)):
        raise ValueError(f"token id outside score table of size {len(t)}")
    ids, counts = np.unique(toks, return_counts=True)
    weights = counts * t.scores[ids]
    keep = weights > 0
    if not np.any(keep):
        raise EmptyQueryError("query maps to empty vector")
    return SparseVector._trusted(ids[keep].astype(np.int32), weights[keep])


def compute_idf(c: Collection) -> IdfTable:
    """Smoothed BM25-style idf over document supports, floored at zero."""
    N = c.n_docs
    df = np.bincount(c.indices, minlength=c.vocab_size).astype(np.float64)
    idf = np.log1p((N - df + 0.5) / (df + 0.5))
    return IdfTable(np.maximum(idf, 0.0), N)


def combine_idf(t: ScoreTable, i: IdfTable) -> ScoreTable:
    if len(t) != len(i):
        raise ValueError(f"score table has {len(t)} entries, idf table {len(i)}")
    return ScoreTable(t.scores * i.idf)
