"""Input coercion shared by the estimators."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
import scipy.sparse as sp

from lilsr.sparse import Collection, SparseVector


def check_collection(X, vocab_size: int | None = None) -> Collection:
    """Accept a Collection, a scipy sparse matrix, a 2-d array, or a list of
    SparseVector and return a validated Collection."""
    if isinstance(X, Collection):
        if vocab_size is not None and X.vocab_size != vocab_size:
            raise ValueError(f"collection vocab_size {X.vocab_size} != expected {vocab_size}")
        return X
    if sp.issparse(X) or isinstance(X, np.ndarray):
        M = sp.csr_matrix(X, dtype=np.float64, copy=True)
        M.eliminate_zeros()
        M.sort_indices()
        if M.nnz and M.data.min() < 0:
            raise ValueError("document weights must be non-negative")
        return Collection.from_csr(M.indptr, M.indices, M.data, vocab_size or M.shape[1])
    vectors = check_vectors(X)
    if vocab_size is None:
        vocab_size = max(int(v.indices[-1]) for v in vectors if v.nnz) + 1
    return Collection(vectors, vocab_size)


def check_vectors(X) -> list[SparseVector]:
    if isinstance(X, Collection):
        return list(X)
    if sp.issparse(X) or isinstance(X, np.ndarray):
        M = sp.csr_matrix(X, dtype=np.float64)
        return [SparseVector(M.indices[M.indptr[i] : M.indptr[i + 1]], M.data[M.indptr[i] : M.indptr[i + 1]]) for i in range(M.shape[0])]
    if isinstance(X, SparseVector):
        raise TypeError("expected a sequence of SparseVector, got a single vector")
    out = []
    for i, v in enumerate(X):
        if isinstance(v, SparseVector):
            out.append(v)
        elif isinstance(v, dict):
            out.append(SparseVector.from_dict(v))
        else:
            raise TypeError(f"item {i}: cannot interpret {type(v).__name__} as a sparse vector")
    if not out:
        raise ValueError("empty input")
    return out


def check_token_sequences(X, vocab=None) -> list[np.ndarray]:
    """Token-id arrays from strings (needs ``vocab``) or id sequences."""
    from lilsr.tokenizer import tokenize

    if isinstance(X, str):
        raise TypeError("expected a sequence of queries, got a single string")
    out = []
    for item in X:
        if isinstance(item, str):
            if vocab is None:
                raise ValueError("text queries need a vocabulary")
            out.append(tokenize(item, vocab))
        else:
            out.append(np.asarray(item, dtype=np.int64))
    return out


def check_positive_int(value, name: str) -> int:
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def as_list(x) -> Sequence:
    return x if isinstance(x, (list, tuple)) else list(x)
