"""Inference-free learned sparse retrieval.

Sparse collections, a block-max pruned inverted index, exact and approximate
top-k search, a learned token score table for query encoding, and the
metrics used to evaluate runs.
"""

from lilsr.encoder import (
    EmbeddingMatrix,
    IdfTable,
    ScoreTable,
    build_table,
    combine_idf,
    compute_idf,
    encode_query,
    score_from_embedding,
)
from lilsr.estimators import BlockMaxRetriever, LearnedTableEncoder
from lilsr.fitter import FitConfig, FitState, TrainTriple, fit, grad_step
from lilsr.index import BuildConfig, InvertedIndex, build_index, build_summary, cluster_postings
from lilsr.metrics import mrr_at_k, ndcg_at_k
from lilsr.search import SearchParams, TopKResult, search_approximate, search_exhaustive
from lilsr.sparse import Collection, CollectionStats, SparseVector, collection_stats, dot, l1_norm
from lilsr.tokenizer import TokenizerVocab, tokenize

__all__ = [
    "BlockMaxRetriever",
    "BuildConfig",
    "Collection",
    "CollectionStats",
    "EmbeddingMatrix",
    "FitConfig",
    "FitState",
    "IdfTable",
    "InvertedIndex",
    "LearnedTableEncoder",
    "ScoreTable",
    "SearchParams",
    "SparseVector",
    "TokenizerVocab",
    "TopKResult",
    "TrainTriple",
    "build_index",
    "build_summary",
    "build_table",
    "cluster_postings",
    "collection_stats",
    "combine_idf",
    "compute_idf",
    "dot",
    "encode_query",
    "fit",
    "grad_step",
    "l1_norm",
    "mrr_at_k",
    "ndcg_at_k",
    "score_from_embedding",
    "search_approximate",
    "search_exhaustive",
    "tokenize",
]
