"""Impact-ordered, truncated, block-clustered inverted index.

Each token's posting list keeps its ``max_postings`` highest-weight documents,
split into blocks of similar documents. Every block carries a summary vector:
the coordinate-wise maximum of its documents, pruned to keep an ``alpha``
fraction of its L1 mass. Summaries give per-block score upper bounds at
query time.
"""

from __future__ import annotations

import math
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from lilsr.sparse import Collection, SparseVector

INDEX_MAGIC = b"LSRI"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<4sIIffQ")

# Cap on the dense projection used when clustering a posting list.
CLUSTER_DIMS = 128
KMEANS_ROUNDS = 3


class IndexFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BuildConfig:
    max_postings: int = 4000
    alpha: float = 0.4
    centroid_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if int(self.max_postings) < 1:
            raise ValueError(f"max_postings must be >= 1, got {self.max_postings}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0 < self.centroid_fraction <= 1:
            raise ValueError(f"centroid_fraction must be in (0, 1], got {self.centroid_fraction}")
        if int(self.seed) < 0:
            raise ValueError("seed must be non-negative")

    def n_centroids(self, list_length: int) -> int:
        # round first so that e.g. 0.1 * 30 does not ceil to 4
        return max(1, math.ceil(round(self.centroid_fraction * list_length, 9)))


@dataclass(frozen=True)
class Block:
    doc_ids: np.ndarray
    summary: SparseVector


@dataclass(frozen=True)
class PostingList:
    token_id: int
    blocks: tuple[Block, ...]

    @property
    def n_postings(self) -> int:
        return sum(len(b.doc_ids) for b in self.blocks)

    def doc_ids(self) -> np.ndarray:
        return np.concatenate([b.doc_ids for b in self.blocks])


@dataclass(frozen=True)
class IndexStats:
    n_lists: int
    n_postings: int
    n_blocks: int
    summary_nnz: int
    summary_mass_retained: float
    index_bytes: int

    def summary(self) -> str:
        return (
            f"lists={self.n_lists} postings={self.n_postings} blocks={self.n_blocks} "
            f"summary_nnz={self.summary_nnz} summary_mass_retained={self.summary_mass_retained:.4f} "
            f"bytes={self.index_bytes}"
        )


class InvertedIndex:
    """Flat-array inverted index over a forward :class:`Collection`.

    Blocks of token ``t`` are ``list_ptr[t]:list_ptr[t + 1]``; documents of
    block ``j`` are ``block_docs[block_ptr[j]:block_ptr[j + 1]]`` and its
    summary is the CSR row ``j`` of ``summary_ptr/summary_idx/summary_val``.
    """

    def __init__(self, forward, config, list_ptr, block_ptr, block_docs, summary_ptr, summary_idx, summary_val):
        self.forward = forward
        self.config = config
        self.list_ptr = np.ascontiguousarray(list_ptr, dtype=np.int64)
        self.block_ptr = np.ascontiguousarray(block_ptr, dtype=np.int64)
        self.block_docs = np.ascontiguousarray(block_docs, dtype=np.int32)
        self.summary_ptr = np.ascontiguousarray(summary_ptr, dtype=np.int64)
        self.summary_idx = np.ascontiguousarray(summary_idx, dtype=np.int32)
        self.summary_val = np.ascontiguousarray(summary_val, dtype=np.float64)

    @property
    def vocab_size(self) -> int:
        return self.forward.vocab_size

    @property
    def n_blocks(self) -> int:
        return int(self.block_ptr.size - 1)

    def tokens(self) -> np.ndarray:
        """Token ids that have a non-empty posting list."""
        return np.flatnonzero(np.diff(self.list_ptr) > 0)

    def block(self, j: int) -> Block:
        docs = self.block_docs[self.block_ptr[j] : self.block_ptr[j + 1]]
        lo, hi = self.summary_ptr[j], self.summary_ptr[j + 1]
        return Block(docs, SparseVector._trusted(self.summary_idx[lo:hi], self.summary_val[lo:hi]))

    def posting_list(self, token_id: int) -> PostingList | None:
        lo, hi = self.list_ptr[token_id], self.list_ptr[token_id + 1]
        if lo == hi:
            return None
        return PostingList(int(token_id), tuple(self.block(j) for j in range(lo, hi)))

    @property
    def posting_lists(self) -> dict[int, PostingList]:
        return {int(t): self.posting_list(t) for t in self.tokens()}

    def to_bytes(self) -> bytes:
        cfg = self.config
        parts = [
            _INDEX_HEADER.pack(
                INDEX_MAGIC, INDEX_VERSION, cfg.max_postings, cfg.alpha, cfg.centroid_fraction, cfg.seed
            )
        ]
        for t in self.tokens():
            lo, hi = int(self.list_ptr[t]), int(self.list_ptr[t + 1])
            parts.append(struct.pack("<II", int(t), hi - lo))
            for j in range(lo, hi):
                d0, d1 = self.block_ptr[j], self.block_ptr[j + 1]
                s0, s1 = self.summary_ptr[j], self.summary_ptr[j + 1]
                parts.append(struct.pack("<I", int(d1 - d0)))
                parts.append(self.block_docs[d0:d1].astype("<u4").tobytes())
                parts.append(struct.pack("<I", int(s1 - s0)))
                parts.append(self.summary_idx[s0:s1].astype("<u4").tobytes())
                parts.append(_round_up_f32(self.summary_val[s0:s1]).tobytes())
        return b"".join(parts)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        return self.config == other.config and all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("list_ptr", "block_ptr", "block_docs", "summary_ptr", "summary_idx", "summary_val")
        )


def _round_up_f32(values: np.ndarray) -> np.ndarray:
    # summaries are upper bounds, so narrowing must never round down
    out = values.astype("<f4")
    low = out.astype(np.float64) < values
    out[low] = np.nextafter(out[low], np.float32(np.inf))
    return out


def _ranges(ptr: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Concatenated positions ``ptr[r]:ptr[r + 1]`` for every ``r`` in ``rows``."""
    starts = ptr[rows]
    lengths = ptr[rows + 1] - starts
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    first = np.zeros(rows.size, dtype=np.int64)
    np.cumsum(lengths[:-1], out=first[1:])
    return np.arange(total, dtype=np.int64) + np.repeat(starts - first, lengths)


def _vectors_to_csr(docs: Sequence[SparseVector]):
    ptr = np.zeros(len(docs) + 1, dtype=np.int64)
    np.cumsum([d.nnz for d in docs], out=ptr[1:])
    idx = np.concatenate([d.indices for d in docs]).astype(np.int32)
    val = np.concatenate([d.values for d in docs]).astype(np.float64)
    vocab = int(idx.max()) + 1 if idx.size else 1
    return ptr, idx, val, vocab


@numba.njit(cache=True)
def _project(ptr, idx, val, rows, dims, mass, col):
    """Unit-length float32 rows of ``rows`` restricted to their ``dims``
    highest-mass tokens (ties: lower id). ``mass`` must be all zero and
    ``col`` all -1 on entry; both are restored before returning."""
    m = rows.size
    cap = 0
    for r in rows:
        cap += ptr[r + 1] - ptr[r]
    used = np.empty(cap, dtype=np.int64)
    n_used = 0
    for r in rows:
        for p in range(ptr[r], ptr[r + 1]):
            t = idx[p]
            if col[t] == -1:
                col[t] = 0
                used[n_used] = t
                n_used += 1
            mass[t] += val[p]
    used = np.sort(used[:n_used])
    if n_used > dims:
        w = np.empty(n_used)
        for i in range(n_used):
            w[i] = -mass[used[i]]
        keep = np.sort(used[np.argsort(w, kind="mergesort")[:dims]])
    else:
        keep = used
    for t in used:
        col[t] = -1
        mass[t] = 0.0
    for j in range(keep.size):
        col[keep[j]] = j
    P = np.zeros((m, keep.size), dtype=np.float32)
    for i in range(m):
        r = rows[i]
        for p in range(ptr[r], ptr[r + 1]):
            j = col[idx[p]]
            if j >= 0:
                P[i, j] = val[p]
    for t in keep:
        col[t] = -1
    _unit_rows(P)
    return P


@numba.njit(cache=True)
def _unit_rows(M):
    for i in range(M.shape[0]):
        norm = np.sqrt(np.sum(M[i].astype(np.float64) ** 2))
        if norm > 0:
            M[i] /= norm


@numba.njit(cache=True)
def _farthest_first(P, n_centroids):
    # Start from the highest-impact row, then repeatedly add the rows least
    # similar to every chosen seed; batches double in size each round.
    m = P.shape[0]
    chosen = np.empty(n_centroids, dtype=np.int64)
    chosen[0] = 0
    n = 1
    best = np.dot(P, np.ascontiguousarray(P[0]))
    taken = np.zeros(m, dtype=np.bool_)
    taken[0] = True
    while n < n_centroids:
        batch = min(n, n_centroids - n)
        cand = np.flatnonzero(~taken)
        new = cand[np.argsort(best[cand], kind="mergesort")[:batch]]
        taken[new] = True
        chosen[n : n + batch] = new
        n += batch
        sims = np.dot(P, np.ascontiguousarray(P[new].T))
        for i in range(m):
            for j in range(batch):
                if sims[i, j] > best[i]:
                    best[i] = sims[i, j]
    return chosen


@numba.njit(cache=True)
def _kmeans_labels(P, n_centroids, rounds):
    # Centroids are kept at unit length: with raw means, large clusters grow
    # heavy on shared head tokens and absorb most of the list.
    m, d = P.shape
    centroids = P[_farthest_first(P, n_centroids)]
    labels = np.zeros(m, dtype=np.int64)
    own = np.empty(m, dtype=np.float32)
    for _ in range(rounds):
        sims = np.dot(P, np.ascontiguousarray(centroids.T))
        counts = np.zeros(n_centroids, dtype=np.int64)
        for i in range(m):
            c = np.argmax(sims[i])
            labels[i] = c
            own[i] = sims[i, c]
            counts[c] += 1
        # refill empty clusters with the worst-fitting movable row
        for c in range(n_centroids):
            if counts[c]:
                continue
            far = -1
            for i in range(m):
                if counts[labels[i]] > 1 and (far < 0 or own[i] < own[far]):
                    far = i
            counts[labels[far]] -= 1
            labels[far] = c
            counts[c] = 1
            own[far] = np.inf
        centroids = np.zeros((n_centroids, d), dtype=np.float32)
        for i in range(m):
            centroids[labels[i]] += P[i]
        _unit_rows(centroids)
    return labels


@numba.njit(cache=True)
def _cluster(ptr, idx, val, rows, n_centroids, dims, rounds, mass, col):
    """Positions into ``rows`` grouped by cluster, plus group boundaries.
    Groups are ordered by their first (highest-impact) member."""
    m = rows.size
    if n_centroids <= 1:
        return np.arange(m), np.array([0, m], dtype=np.int64)
    if n_centroids >= m:
        return np.arange(m), np.arange(m + 1)
    labels = _kmeans_labels(_project(ptr, idx, val, rows, dims, mass, col), n_centroids, rounds)
    # relabel by first occurrence, then counting-sort positions
    rank = np.full(n_centroids, -1, dtype=np.int64)
    n_groups = 0
    for i in range(m):
        if rank[labels[i]] == -1:
            rank[labels[i]] = n_groups
            n_groups += 1
    group_ptr = np.zeros(n_groups + 1, dtype=np.int64)
    for i in range(m):
        group_ptr[rank[labels[i]] + 1] += 1
    group_ptr = np.cumsum(group_ptr)
    fill = group_ptr[:-1].copy()
    order = np.empty(m, dtype=np.int64)
    for i in range(m):
        g = rank[labels[i]]
        order[fill[g]] = i
        fill[g] += 1
    return order, group_ptr


class _Scratch:
    """Per-vocabulary work arrays reused across posting lists."""

    def __init__(self, vocab_size: int):
        self.mass = np.zeros(vocab_size, dtype=np.float64)
        self.col = np.full(vocab_size, -1, dtype=np.int64)
        self.summary = np.zeros(vocab_size, dtype=np.float64)


def _cluster_rows(ptr, idx, val, rows: np.ndarray, n_centroids: int, scratch: _Scratch):
    return _cluster(ptr, idx, val, rows, n_centroids, CLUSTER_DIMS, KMEANS_ROUNDS, scratch.mass, scratch.col)


def cluster_postings(docs: Sequence[SparseVector], n_centroids: int, seed: int = 0) -> list[np.ndarray]:
    """Partition ``docs`` into at most ``n_centroids`` groups of similar vectors.

    Returns arrays of positions into ``docs``. Assumes ``docs`` are given in
    impact order (highest first); the first document seeds the first group.
    The procedure is deterministic, so ``seed`` does not change the result.
    """
    if not docs:
        raise ValueError("cannot cluster an empty posting list")
    if n_centroids < 1:
        raise ValueError("n_centroids must be >= 1")
    ptr, idx, val, vocab = _vectors_to_csr(docs)
    order, group_ptr = _cluster_rows(ptr, idx, val, np.arange(len(docs)), n_centroids, _Scratch(vocab))
    return [order[group_ptr[g] : group_ptr[g + 1]] for g in range(group_ptr.size - 1)]


@numba.njit(cache=True)
def _summary_kernel(fwd_ptr, fwd_idx, fwd_val, docs, group_ptr, alpha, scratch):
    # scratch: zeroed float64 array over the vocabulary, left zeroed
    n_groups = group_ptr.size - 1
    cap = 0
    for d in docs:
        cap += fwd_ptr[d + 1] - fwd_ptr[d]
    out_ptr = np.zeros(n_groups + 1, dtype=np.int64)
    out_idx = np.empty(cap, dtype=np.int32)
    out_val = np.empty(cap, dtype=np.float64)
    full_mass = np.zeros(n_groups, dtype=np.float64)
    touched = np.empty(cap, dtype=np.int64)
    pos = 0
    for g in range(n_groups):
        nt = 0
        for p in range(group_ptr[g], group_ptr[g + 1]):
            d = docs[p]
            for r in range(fwd_ptr[d], fwd_ptr[d + 1]):
                t = fwd_idx[r]
                v = fwd_val[r]
                if scratch[t] == 0.0:
                    touched[nt] = t
                    nt += 1
                if v > scratch[t]:
                    scratch[t] = v
        vals = np.empty(nt, dtype=np.float64)
        total = 0.0
        for i in range(nt):
            vals[i] = scratch[touched[i]]
            total += vals[i]
        full_mass[g] = total
        if alpha < 1.0:
            # find the smallest kept weight; only kept tokens need an id sort
            desc = np.sort(vals)[::-1]
            before = 0.0
            n_keep = 0
            while n_keep < nt and before < alpha * total:
                before += desc[n_keep]
                n_keep += 1
            cut = desc[n_keep - 1]
            n_gt = 0
            while n_gt < n_keep and desc[n_gt] > cut:
                n_gt += 1
            n_tie = n_keep - n_gt
            ties = np.sort(touched[:nt][vals == cut])[:n_tie]
            kept = np.concatenate((touched[:nt][vals > cut], ties))
        else:
            kept = touched[:nt]
        kept = np.sort(kept)
        for t in kept:
            out_idx[pos] = t
            out_val[pos] = scratch[t]
            pos += 1
        for i in range(nt):
            scratch[touched[i]] = 0.0
        out_ptr[g + 1] = pos
    return out_ptr, out_idx[:pos].copy(), out_val[:pos].copy(), full_mass


def build_summary(docs: Sequence[SparseVector], alpha: float) -> SparseVector:
    """Coordinate-wise max of ``docs``, keeping the fewest heaviest
    coordinates whose mass reaches ``alpha`` of the total (ties: lower id)."""
    if not docs:
        raise ValueError("cannot summarize an empty block")
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    ptr, idx, val, vocab = _vectors_to_csr(docs)
    _, s_idx, s_val, _ = _summary_kernel(
        ptr, idx, val, np.arange(len(docs)), np.array([0, len(docs)], dtype=np.int64), float(alpha), np.zeros(vocab)
    )
    return SparseVector._trusted(s_idx, s_val)


def build_index(c: Collection, cfg: BuildConfig) -> InvertedIndex:
    csc = c.csr.tocsc()
    csc.sort_indices()
    V = c.vocab_size
    fwd = (c.indptr, c.indices, c.values)
    scratch = _Scratch(V)
    list_ptr = np.zeros(V + 1, dtype=np.int64)
    block_sizes: list[np.ndarray] = []
    block_docs: list[np.ndarray] = []
    s_lens: list[np.ndarray] = []
    s_idx: list[np.ndarray] = []
    s_val: list[np.ndarray] = []
    n_blocks = 0
    for t in range(V):
        lo, hi = csc.indptr[t], csc.indptr[t + 1]
        if lo == hi:
            list_ptr[t + 1] = n_blocks
            continue
        rows = csc.indices[lo:hi]
        # weight descending, doc id ascending
        rows = rows[np.lexsort((rows, -csc.data[lo:hi]))[: cfg.max_postings]].astype(np.int64)
        order, gptr = _cluster_rows(*fwd, rows, cfg.n_centroids(rows.size), scratch)
        docs = rows[order]
        ptr, idx, val, _ = _summary_kernel(*fwd, docs, gptr, float(cfg.alpha), scratch.summary)
        block_sizes.append(np.diff(gptr))
        block_docs.append(docs)
        s_lens.append(np.diff(ptr))
        s_idx.append(idx)
        s_val.append(val)
        n_blocks += gptr.size - 1
        list_ptr[t + 1] = n_blocks
    return _assemble(c, cfg, list_ptr, block_sizes, block_docs, s_lens, s_idx, s_val)


def _assemble(c, cfg, list_ptr, block_sizes, block_docs, s_lens, s_idx, s_val) -> InvertedIndex:
    def cat(chunks, dtype):
        return np.concatenate(chunks).astype(dtype) if chunks else np.zeros(0, dtype=dtype)

    sizes = cat(block_sizes, np.int64)
    block_ptr = np.zeros(sizes.size + 1, dtype=np.int64)
    np.cumsum(sizes, out=block_ptr[1:])
    lens = cat(s_lens, np.int64)
    summary_ptr = np.zeros(lens.size + 1, dtype=np.int64)
    np.cumsum(lens, out=summary_ptr[1:])
    return InvertedIndex(
        c, cfg, list_ptr, block_ptr, cat(block_docs, np.int32), summary_ptr, cat(s_idx, np.int32), cat(s_val, np.float64)
    )


def index_stats(ix: InvertedIndex) -> IndexStats:
    fwd = ix.forward
    _, _, _, mass = _summary_kernel(
        fwd.indptr, fwd.indices, fwd.values, ix.block_docs.astype(np.int64), ix.block_ptr, 1.0, np.zeros(ix.vocab_size)
    )
    full = float(mass.sum())
    kept = float(ix.summary_val.sum())
    n_lists = int(ix.tokens().size)
    nbytes = (
        _INDEX_HEADER.size
        + 8 * n_lists
        + 8 * ix.n_blocks
        + 4 * ix.block_docs.size
        + 8 * ix.summary_idx.size
    )
    return IndexStats(
        n_lists=n_lists,
        n_postings=int(ix.block_docs.size),
        n_blocks=ix.n_blocks,
        summary_nnz=int(ix.summary_idx.size),
        summary_mass_retained=kept / full if full > 0 else 1.0,
        index_bytes=nbytes,
    )


def write_index(ix: InvertedIndex, path) -> None:
    Path(path).write_bytes(ix.to_bytes())


def _f32_value(x: float) -> float:
    # shortest decimal that round-trips through f32, so 0.4 reads back as 0.4
    return float(np.format_float_positional(np.float32(x), unique=True))


def index_from_bytes(buf: bytes, forward: Collection) -> InvertedIndex:
    if len(buf) < _INDEX_HEADER.size:
        raise IndexFormatError("file too short for index header")
    magic, version, lam, alpha, cf, seed = _INDEX_HEADER.unpack_from(buf, 0)
    if magic != INDEX_MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}, expected {INDEX_MAGIC!r}")
    if version != INDEX_VERSION:
        raise IndexFormatError(f"unsupported index version {version}")
    try:
        cfg = BuildConfig(max_postings=lam, alpha=_f32_value(alpha), centroid_fraction=_f32_value(cf), seed=seed)
    except ValueError as exc:
        raise IndexFormatError(f"invalid build config: {exc}") from exc
    V, n_docs = forward.vocab_size, forward.n_docs
    off = _INDEX_HEADER.size
    view = memoryview(buf)

    def take(n_bytes):
        nonlocal off
        if off + n_bytes > len(buf):
            raise IndexFormatError("truncated index payload")
        out = view[off : off + n_bytes]
        off += n_bytes
        return out

    def u32():
        return struct.unpack("<I", take(4))[0]

    list_ptr = np.zeros(V + 1, dtype=np.int64)
    sizes, docs, s_lens, s_idx, s_val = [], [], [], [], []
    n_blocks = 0
    prev = -1
    while off < len(buf):
        t = u32()
        if t >= V or t <= prev:
            raise IndexFormatError(f"token id {t} out of order or >= vocab_size {V}")
        list_ptr[prev + 1 : t + 1] = n_blocks
        nb = u32()
        if nb == 0:
            raise IndexFormatError(f"token {t} has no blocks")
        for _ in range(nb):
            nd = u32()
            ids = np.frombuffer(take(4 * nd), dtype="<u4")
            if nd == 0 or (ids.size and int(ids.max()) >= n_docs):
                raise IndexFormatError(f"token {t}: empty block or doc id out of range")
            ns = u32()
            sidx = np.frombuffer(take(4 * ns), dtype="<u4")
            sval = np.frombuffer(take(4 * ns), dtype="<f4")
            sizes.append(nd)
            docs.append(ids)
            s_lens.append(ns)
            s_idx.append(sidx)
            s_val.append(sval)
        n_blocks += nb
        prev = t
        list_ptr[t + 1] = n_blocks
    list_ptr[prev + 1 :] = n_blocks
    return _assemble(
        forward,
        cfg,
        list_ptr,
        [np.asarray(sizes, dtype=np.int64)],
        docs,
        [np.asarray(s_lens, dtype=np.int64)],
        s_idx,
        s_val,
    )


def read_index(path, forward: Collection) -> InvertedIndex:
    return index_from_bytes(Path(path).read_bytes(), forward)
