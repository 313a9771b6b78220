import numpy as np
import pytest

from lilsr.sparse import Collection, SparseVector
from lilsr.synthetic import zipf_collection


def random_docs(rng, n, vocab, nnz=(1, 12)):
    out = []
    for _ in range(n):
        size = int(rng.integers(nnz[0], nnz[1] + 1))
        ids = rng.choice(vocab, size=size, replace=False)
        out.append(SparseVector(ids, rng.uniform(0.05, 3.0, size=size)))
    return out


@pytest.fixture(scope="session")
def small_zipf():
    """1000 docs over a 2000-token vocabulary, plus 40 queries."""
    return zipf_collection(1000, vocab_size=2000, avg_nnz=20, n_queries=40, query_nnz=(3, 10), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_collection():
    return Collection(
        [
            SparseVector.from_pairs([(1, 5.0)]),
            SparseVector.from_pairs([(2, 9.0)]),
            SparseVector.from_pairs([(1, 1.0), (3, 2.0)]),
        ],
        5,
    )


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
