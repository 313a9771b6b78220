"""Exact and block-max approximate top-k retrieval, plus timing helpers."""

from __future__ import annotations

import csv
import itertools
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numba
import numpy as np
from threadpoolctl import threadpool_limits

from lilsr.index import BuildConfig, InvertedIndex, build_index
from lilsr.sparse import Collection, SparseVector


@dataclass(frozen=True)
class SearchParams:
    k: int = 10
    query_cut: int = 0
    heap_factor: float = 1.0

    def __post_init__(self):
        if int(self.k) < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if int(self.query_cut) < 0:
            raise ValueError("query_cut must be >= 0 (0 means all tokens)")
        if not 0 < self.heap_factor <= 1:
            raise ValueError(f"heap_factor must be in (0, 1], got {self.heap_factor}")


@dataclass(frozen=True, eq=False)
class TopKResult:
    """Hits sorted by score descending, ties by doc id ascending."""

    ids: np.ndarray
    scores: np.ndarray

    @property
    def hits(self) -> list[tuple[int, float]]:
        return list(zip(self.ids.tolist(), self.scores.tolist()))

    def __len__(self) -> int:
        return int(self.ids.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TopKResult):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and np.array_equal(self.scores, other.scores)


def _dense_query(q: SparseVector, vocab_size: int) -> np.ndarray:
    if q.nnz and int(q.indices[-1]) >= vocab_size:
        raise ValueError(f"query token {int(q.indices[-1])} outside vocabulary of size {vocab_size}")
    return q.to_dense(vocab_size)


def _top_k(scores: np.ndarray, k: int) -> TopKResult:
    n = scores.size
    if k < n:
        kth = -np.partition(-scores, k - 1)[k - 1]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, -scores[cand]))[:k]
    ids = cand[order]
    return TopKResult(ids.astype(np.int64), scores[ids])


def search_exhaustive(q: SparseVector, c: Collection, k: int = 10) -> TopKResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = c.csr @ _dense_query(q, c.vocab_size)
    return _top_k(scores, k)


@numba.njit(cache=True, nogil=True)
def _approx_kernel(
    tokens, q_dense, k, heap_factor, n_docs,
    list_ptr, block_ptr, block_docs, summary_ptr, summary_idx, summary_val,
    fwd_ptr, fwd_idx, fwd_val,
):  # fmt: skip
    top_s = np.empty(k, dtype=np.float64)
    top_d = np.empty(k, dtype=np.int64)
    size = 0
    visited = np.zeros(n_docs, dtype=np.uint8)
    for t in tokens:
        for j in range(list_ptr[t], list_ptr[t + 1]):
            if size == k:
                ub = 0.0
                for p in range(summary_ptr[j], summary_ptr[j + 1]):
                    ub += q_dense[summary_idx[p]] * summary_val[p]
                if not ub > heap_factor * top_s[k - 1]:
                    continue
            for p in range(block_ptr[j], block_ptr[j + 1]):
                d = block_docs[p]
                if visited[d]:
                    continue
                visited[d] = 1
                s = 0.0
                for r in range(fwd_ptr[d], fwd_ptr[d + 1]):
                    s += fwd_val[r] * q_dense[fwd_idx[r]]
                if size == k:
                    ws = top_s[k - 1]
                    if s < ws or (s == ws and d > top_d[k - 1]):
                        continue
                    pos = k - 1
                else:
                    pos = size
                    size += 1
                while pos > 0 and (top_s[pos - 1] < s or (top_s[pos - 1] == s and top_d[pos - 1] > d)):
                    top_s[pos] = top_s[pos - 1]
                    top_d[pos] = top_d[pos - 1]
                    pos -= 1
                top_s[pos] = s
                top_d[pos] = d
    return top_d[:size].copy(), top_s[:size].copy()


def _traversal_tokens(q: SparseVector, query_cut: int) -> np.ndarray:
    order = np.lexsort((q.indices, -q.values))
    if query_cut:
        order = order[:query_cut]
    return q.indices[order].astype(np.int64)


def search_approximate(q: SparseVector, ix: InvertedIndex, p: SearchParams = SearchParams()) -> TopKResult:
    """Visit posting lists of the heaviest query tokens, scoring a block's
    documents exactly only when ``dot(q, summary)`` beats ``heap_factor``
    times the current k-th best score. Each document is scored at most once.

    ``heap_factor=1`` is the safe setting; smaller values score more blocks.
    """
    q_dense = _dense_query(q, ix.vocab_size)
    fwd = ix.forward
    ids, scores = _approx_kernel(
        _traversal_tokens(q, p.query_cut), q_dense, int(p.k), float(p.heap_factor), fwd.n_docs,
        ix.list_ptr, ix.block_ptr, ix.block_docs, ix.summary_ptr, ix.summary_idx, ix.summary_val,
        fwd.indptr, fwd.indices, fwd.values,
    )  # fmt: skip
    return TopKResult(ids, scores)


def recall_vs_exact(
    queries: Sequence[SparseVector],
    c: Collection,
    ix: InvertedIndex,
    p: SearchParams,
    k: int | None = None,
    exact: Sequence[TopKResult] | None = None,
) -> float:
    """Mean fraction of the exact top-k recovered by approximate search."""
    if not queries:
        raise ValueError("empty query set")
    k = p.k if k is None else k
    if exact is None:
        exact = [search_exhaustive(q, c, k) for q in queries]
    total = 0.0
    for q, ex in zip(queries, exact):
        approx = search_approximate(q, ix, SearchParams(k=k, query_cut=p.query_cut, heap_factor=p.heap_factor))
        total += len(set(approx.ids.tolist()) & set(ex.ids[:k].tolist())) / k
    return total / len(queries)


@dataclass(frozen=True)
class BenchResult:
    aqt_us: float
    per_query_us: np.ndarray
    results: list[TopKResult]


def bench_aqt(
    queries: Sequence[SparseVector],
    target: str,
    *,
    collection: Collection | None = None,
    index: InvertedIndex | None = None,
    params: SearchParams = SearchParams(),
    warmup: bool = True,
    repeats: int = 1,
) -> BenchResult:
    """Average single-threaded per-query search time in microseconds.

    Only the search call is timed; a full warm-up pass runs first. With
    ``repeats > 1`` each query keeps its fastest pass, which filters out
    interference from other processes.
    """
    if not queries:
        raise ValueError("empty query set")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    fn: Callable[[SparseVector], TopKResult]
    if target == "exhaustive":
        if collection is None:
            raise ValueError("exhaustive benchmark needs a collection")
        fn = lambda q: search_exhaustive(q, collection, params.k)  # noqa: E731
    elif target == "approximate":
        if index is None:
            raise ValueError("approximate benchmark needs an index")
        fn = lambda q: search_approximate(q, index, params)  # noqa: E731
    else:
        raise ValueError(f"unknown target {target!r}")
    # the search kernels are serial; this pins any BLAS/OpenMP pools too
    with threadpool_limits(limits=1):
        if warmup:
            for q in queries:
                fn(q)
        times = np.full(len(queries), np.inf)
        results = []
        for _ in range(repeats):
            results = []
            for i, q in enumerate(queries):
                t0 = time.perf_counter_ns()
                res = fn(q)
                times[i] = min(times[i], (time.perf_counter_ns() - t0) / 1e3)
                results.append(res)
    return BenchResult(float(times.mean()), times, results)


SWEEP_KEYS = ("lambda", "alpha", "centroid_fraction", "query_cut", "heap_factor", "k")
BENCH_COLUMNS = [
    "mode", "lambda", "alpha", "centroid_fraction", "query_cut", "heap_factor", "k", "aqt_us", "recall_at_k",
    "metric", "metric_value",
]  # fmt: skip


def parse_sweep(text: str) -> dict[str, list]:
    """Parse ``"lambda=2000,4000;heap_factor=0.8"`` into value lists."""
    out: dict[str, list] = {}
    for part in filter(None, (s.strip() for s in text.split(";"))):
        key, sep, vals = part.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in SWEEP_KEYS:
            raise ValueError(f"bad sweep entry {part!r}; keys are {', '.join(SWEEP_KEYS)}")
        cast = int if key in ("lambda", "query_cut", "k") else float
        out[key] = [cast(v) for v in vals.split(",") if v.strip()]
        if not out[key]:
            raise ValueError(f"sweep key {key!r} has no values")
    return out


def run_sweep(
    collection: Collection,
    queries: Sequence[SparseVector],
    sweep: dict[str, list],
    *,
    defaults: dict | None = None,
    metric: Callable[[list[TopKResult], int], tuple[str, float]] | None = None,
    repeats: int = 1,
) -> list[dict]:
    """Time exhaustive search once, then approximate search for every point
    of the sweep grid. Index builds are not timed."""
    base = {"lambda": 4000, "alpha": 0.4, "centroid_fraction": 0.1, "query_cut": 0, "heap_factor": 1.0, "k": 10}
    base.update(defaults or {})
    grid = {key: sweep.get(key, [base[key]]) for key in SWEEP_KEYS}
    rows = []
    exact_cache: dict[int, BenchResult] = {}
    for k in grid["k"]:
        ex = bench_aqt(queries, "exhaustive", collection=collection, params=SearchParams(k=k), repeats=repeats)
        exact_cache[k] = ex
        row = dict.fromkeys(BENCH_COLUMNS, "")
        row.update(mode="exact", k=k, aqt_us=ex.aqt_us, recall_at_k=1.0)
        if metric:
            row["metric"], row["metric_value"] = metric(ex.results, k)
        rows.append(row)
    for lam, alpha, cf in itertools.product(grid["lambda"], grid["alpha"], grid["centroid_fraction"]):
        ix = build_index(collection, BuildConfig(max_postings=lam, alpha=alpha, centroid_fraction=cf))
        for qc, hf, k in itertools.product(grid["query_cut"], grid["heap_factor"], grid["k"]):
            params = SearchParams(k=k, query_cut=qc, heap_factor=hf)
            res = bench_aqt(queries, "approximate", index=ix, params=params, repeats=repeats)
            exact = exact_cache[k].results
            recall = sum(
                len(set(a.ids.tolist()) & set(e.ids.tolist())) / k for a, e in zip(res.results, exact)
            ) / len(queries)
            row = dict.fromkeys(BENCH_COLUMNS, "")
            row.update(
                mode="approx", centroid_fraction=cf, alpha=alpha, query_cut=qc, heap_factor=hf, k=k,
                aqt_us=res.aqt_us, recall_at_k=recall,
            )  # fmt: skip
            row["lambda"] = lam
            if metric:
                row["metric"], row["metric_value"] = metric(res.results, k)
            rows.append(row)
    return rows


def write_bench_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in row.items()})
