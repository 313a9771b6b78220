"""Synthetic collections, queries, and planted score-table problems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lilsr.encoder import EmbeddingMatrix, ScoreTable, build_table, encode_query, EmptyQueryError
from lilsr.fitter import TrainTriple
from lilsr.sparse import Collection, SparseVector


class ZipfSampler:
    """Draws distinct token ids with Zipf-like rank probabilities."""

    def __init__(self, vocab_size: int, exponent: float = 1.0, rng: np.random.Generator | None = None):
        self.rng = rng if rng is not None else np.random.default_rng()
        ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
        p = ranks**-exponent
        self.cdf = np.cumsum(p / p.sum())
        self.cdf[-1] = 1.0
        self.ids = self.rng.permutation(vocab_size)

    def distinct(self, n: int) -> np.ndarray:
        n = min(n, self.ids.size)
        got = np.zeros(0, dtype=np.int64)
        draw = 2 * n
        while got.size < n:
            ranks = np.searchsorted(self.cdf, self.rng.random(draw), side="right")
            ranks = np.minimum(ranks, self.ids.size - 1)
            merged = np.concatenate([got, ranks])
            _, first = np.unique(merged, return_index=True)
            got = merged[np.sort(first)]
            draw *= 2
        return self.ids[got[:n]]


def zipf_vectors(
    n: int,
    vocab_size: int,
    nnz_range: tuple[int, int],
    *,
    exponent: float = 1.0,
    weight_sigma: float = 0.6,
    rng: np.random.Generator,
    sampler: ZipfSampler | None = None,
) -> list[SparseVector]:
    sampler = sampler or ZipfSampler(vocab_size, exponent, rng)
    lo, hi = nnz_range
    sizes = rng.integers(lo, hi + 1, size=n)
    out = []
    for size in sizes:
        ids = sampler.distinct(int(size))
        weights = rng.lognormal(0.0, weight_sigma, size=ids.size)
        out.append(SparseVector(ids, weights))
    return out


def zipf_collection(
    n_docs: int,
    vocab_size: int = 30_000,
    avg_nnz: int = 60,
    *,
    exponent: float = 1.0,
    n_queries: int = 0,
    query_nnz: tuple[int, int] = (5, 30),
    seed: int = 0,
) -> tuple[Collection, list[SparseVector]]:
    """Documents with roughly ``avg_nnz`` entries and queries from the same
    token distribution."""
    rng = np.random.default_rng(seed)
    sampler = ZipfSampler(vocab_size, exponent, rng)
    spread = max(1, avg_nnz // 3)
    docs = zipf_vectors(n_docs, vocab_size, (avg_nnz - spread, avg_nnz + spread), rng=rng, sampler=sampler)
    queries = zipf_vectors(n_queries, vocab_size, query_nnz, rng=rng, sampler=sampler)
    return Collection(docs, vocab_size), queries


@dataclass
class PlantedProblem:
    embeddings: EmbeddingMatrix
    w: np.ndarray
    b: float
    table: ScoreTable
    docs: Collection
    triples: list[TrainTriple]
    heldout_queries: list[np.ndarray]


def planted_problem(
    vocab_size: int = 200,
    dim: int = 16,
    n_triples: int = 2000,
    n_docs: int = 1000,
    n_heldout: int = 100,
    *,
    bias: float = 1.5,
    doc_nnz: tuple[int, int] = (10, 30),
    query_len: tuple[int, int] = (2, 6),
    seed: int = 0,
) -> PlantedProblem:
    """Teacher scores generated by a hidden ``(w, b)`` table.

    Each triple pairs a random query with two random documents that share a
    token with it; the higher-scoring one under the hidden table is the
    positive.
    """
    rng = np.random.default_rng(seed)
    E = EmbeddingMatrix(rng.normal(size=(vocab_size, dim)))
    w = rng.normal(size=dim) / np.sqrt(dim)
    table = build_table(w, bias, E)
    docs = Collection(
        zipf_vectors(n_docs, vocab_size, doc_nnz, exponent=0.5, rng=rng), vocab_size
    )
    csc = docs.csr.tocsc()

    def random_query():
        while True:
            toks = rng.integers(0, vocab_size, size=rng.integers(query_len[0], query_len[1] + 1))
            try:
                q = encode_query(toks, table)
            except EmptyQueryError:
                continue
            return toks, q

    triples = []
    while len(triples) < n_triples:
        toks, q = random_query()
        touched = np.unique(csc[:, np.unique(toks)].tocoo().row)
        if touched.size < 2:
            continue
        a, c = rng.choice(touched, size=2, replace=False)
        ta = float((docs.csr[a] @ q.to_dense(vocab_size))[0])
        tc = float((docs.csr[c] @ q.to_dense(vocab_size))[0])
        if ta < tc:
            a, c, ta, tc = c, a, tc, ta
        triples.append(TrainTriple(toks, docs[int(a)], docs[int(c)], ta, tc))
    heldout = [random_query()[0] for _ in range(n_heldout)]
    return PlantedProblem(E, w, bias, table, docs, triples, heldout)
