"""scikit-learn style front ends for the index and the table encoder."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from lilsr._validation import check_collection, check_token_sequences, check_vectors
from lilsr.encoder import EmbeddingMatrix, IdfTable, ScoreTable, combine_idf, encode_query
from lilsr.fitter import FitConfig, fit
from lilsr.index import BuildConfig, build_index, index_stats
from lilsr.search import SearchParams, TopKResult, search_approximate, search_exhaustive


class BlockMaxRetriever(BaseEstimator):
    """Top-k retrieval over a block-max pruned inverted index.

    ``fit`` builds the index from a document collection; ``search`` and
    ``kneighbors`` answer sparse queries, exactly (``mode="exact"``) or with
    summary-based block pruning (``mode="approx"``).

    Parameters
    ----------
    max_postings : int
        Posting list truncation length.
    alpha : float
        Fraction of summary L1 mass kept per block.
    centroid_fraction : float
        Blocks per posting list as a fraction of its length.
    k, query_cut, heap_factor : search parameters, see :class:`SearchParams`.
    mode : {"approx", "exact"}
    """

    def __init__(
        self,
        max_postings=4000,
        alpha=0.4,
        centroid_fraction=0.1,
        seed=0,
        k=10,
        query_cut=0,
        heap_factor=1.0,
        mode="approx",
    ):
        self.max_postings = max_postings
        self.alpha = alpha
        self.centroid_fraction = centroid_fraction
        self.seed = seed
        self.k = k
        self.query_cut = query_cut
        self.heap_factor = heap_factor
        self.mode = mode

    def fit(self, X, y=None):
        if self.mode not in ("approx", "exact"):
            raise ValueError(f"mode must be 'approx' or 'exact', got {self.mode!r}")
        self.collection_ = check_collection(X)
        self.n_features_in_ = self.collection_.vocab_size
        SearchParams(self.k, self.query_cut, self.heap_factor)
        if self.mode == "approx":
            cfg = BuildConfig(self.max_postings, self.alpha, self.centroid_fraction, self.seed)
            self.index_ = build_index(self.collection_, cfg)
        else:
            self.index_ = None
        return self

    def _search_one(self, q, k) -> TopKResult:
        if self.mode == "exact":
            return search_exhaustive(q, self.collection_, k)
        return search_approximate(q, self.index_, SearchParams(k, self.query_cut, self.heap_factor))

    def search(self, X, k=None) -> list[TopKResult]:
        check_is_fitted(self, "collection_")
        k = self.k if k is None else k
        return [self._search_one(q, k) for q in check_vectors(X)]

    def kneighbors(self, X, n_neighbors=None, return_distance=True):
        """Score and id matrices padded with ``nan`` / ``-1`` when fewer than
        ``n_neighbors`` documents are reachable."""
        k = self.k if n_neighbors is None else n_neighbors
        results = self.search(X, k)
        ids = np.full((len(results), k), -1, dtype=np.int64)
        scores = np.full((len(results), k), np.nan)
        for i, r in enumerate(results):
            ids[i, : len(r)] = r.ids
            scores[i, : len(r)] = r.scores
        return (scores, ids) if return_distance else ids

    def predict(self, X):
        return self.kneighbors(X, return_distance=False)

    def stats(self):
        check_is_fitted(self, "collection_")
        return index_stats(self.index_) if self.index_ is not None else None


class LearnedTableEncoder(TransformerMixin, BaseEstimator):
    """Inference-free query encoder with a learned per-token score table.

    ``fit`` learns the projection ``(w, b)`` over frozen word embeddings from
    teacher-scored training triples; ``transform`` maps queries (text or
    token ids) to sparse vectors by table lookup.
    """

    def __init__(
        self,
        embeddings=None,
        vocab=None,
        loss="kl",
        reg="l1",
        lambda_q=0.0,
        lambda_d=0.0,
        lr=1e-2,
        steps=1000,
        batch_size=128,
        seed=0,
        idf=None,
    ):
        self.embeddings = embeddings
        self.vocab = vocab
        self.loss = loss
        self.reg = reg
        self.lambda_q = lambda_q
        self.lambda_d = lambda_d
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed
        self.idf = idf

    def _config(self) -> FitConfig:
        return FitConfig(
            loss=self.loss,
            reg=self.reg,
            lambda_q=self.lambda_q,
            lambda_d=self.lambda_d,
            lr=self.lr,
            steps=self.steps,
            batch_size=self.batch_size,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        """``X`` is a sequence of :class:`TrainTriple`."""
        if self.embeddings is None:
            raise ValueError("embeddings are required to fit the score table")
        E = self.embeddings if isinstance(self.embeddings, EmbeddingMatrix) else EmbeddingMatrix(self.embeddings)
        special = self.vocab.special_ids if self.vocab is not None else []
        result = fit(list(X), E, self._config(), special)
        self.w_ = result.w
        self.b_ = result.b
        self.table_ = result.table
        self.training_log_ = result.log
        self.n_features_in_ = E.dim
        return self

    @property
    def lookup_table_(self) -> ScoreTable:
        check_is_fitted(self, "table_")
        if self.idf is None:
            return self.table_
        idf = self.idf if isinstance(self.idf, IdfTable) else IdfTable(self.idf, 0)
        return combine_idf(self.table_, idf)

    def transform(self, X):
        table = self.lookup_table_
        return [encode_query(toks, table) for toks in check_token_sequences(X, self.vocab)]
