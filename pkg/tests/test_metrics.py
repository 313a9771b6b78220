import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lilsr.metrics import (
    NoOverlapError,
    RunFormatError,
    evaluate,
    format_run,
    mrr_at_k,
    ndcg_at_k,
    normalize_ranking,
    read_qrels,
    read_run,
    write_report,
    write_run,
)


def ranked(*docs):
    """Run list with strictly decreasing scores in the given order."""
    return [(d, float(len(docs) - i)) for i, d in enumerate(docs)]


def ndcg_oracle(order, grades, k):
    dcg = sum((2 ** grades.get(d, 0) - 1) / math.log2(i + 2) for i, d in enumerate(order[:k]))
    ideal = sorted(grades.values(), reverse=True)[:k]
    idcg = sum((2**g - 1) / math.log2(i + 2) for i, g in enumerate(ideal))
    return dcg / idcg


class TestFixtures:
    def test_mrr_second_rank(self):
        assert mrr_at_k({"q": ranked("a", "b", "c")}, {"q": {"b": 1}}, 10) == 0.5

    def test_mrr_outside_cutoff(self):
        assert mrr_at_k({"q": ranked("a", "b", "c")}, {"q": {"c": 1}}, 2) == 0.0

    def test_mrr_averages_queries(self):
        run = {"q1": ranked("a", "b"), "q2": ranked("x", "y")}
        assert mrr_at_k(run, {"q1": {"a": 1}, "q2": {"z": 1}}, 10) == 0.5

    def test_ndcg_single_relevant_second(self):
        # 1 / log2(3)
        assert ndcg_at_k({"q": ranked("a", "b")}, {"q": {"b": 1}}, 10) == pytest.approx(0.6309298, abs=1e-6)

    def test_ndcg_ideal_order_is_one(self):
        grades = {"a": 3, "b": 2, "c": 1}
        assert ndcg_at_k({"q": ranked("a", "b", "c", "d")}, {"q": grades}, 10) == pytest.approx(1.0)

    def test_ndcg_graded_gain(self):
        grades = {"a": 1, "b": 2}
        got = ndcg_at_k({"q": ranked("a", "b")}, {"q": grades}, 10)
        assert got == pytest.approx((1 + 3 / math.log2(3)) / (3 + 1 / math.log2(3)))

    def test_ties_broken_by_doc_id(self):
        run = {"q": [("b", 1.0), ("a", 1.0)]}
        assert mrr_at_k(run, {"q": {"a": 1}}, 1) == 1.0

    def test_grade_zero_not_relevant(self):
        assert mrr_at_k({"q": ranked("a", "b")}, {"q": {"a": 0, "b": 2}}, 10) == 0.5


class TestProperties:
    @settings(max_examples=200)
    @given(st.permutations(list("abcdefghij")), st.dictionaries(st.sampled_from("abcdefghijxyz"), st.integers(0, 3)))
    def test_bounded(self, order, grades):
        run = {"q": ranked(*order)}
        qrels = {"q": grades}
        assert 0.0 <= mrr_at_k(run, qrels, 10) <= 1.0
        if any(g > 0 for g in grades.values()):
            v = ndcg_at_k(run, qrels, 10)
            assert 0.0 <= v <= 1.0 + 1e-12
            assert v == pytest.approx(ndcg_oracle(order, grades, 10))

    @settings(max_examples=100)
    @given(st.permutations(list("bcdefg")), st.integers(0, 5))
    def test_mrr_ignores_order_below_first_hit(self, tail, split):
        head = list(tail[:split])
        rest = list(tail[split:])
        a = {"q": ranked(*head, "a", *rest)}
        b = {"q": ranked(*head, "a", *reversed(rest))}
        assert mrr_at_k(a, {"q": {"a": 1}}) == mrr_at_k(b, {"q": {"a": 1}})

    @settings(max_examples=100)
    @given(st.lists(st.integers(-1000, 1000), min_size=5, max_size=5, unique=True))
    def test_order_preserving_transform(self, scores):
        docs = list("abcde")
        qrels = {"q": {"b": 2, "d": 1}}
        run = {"q": [(d, float(s)) for d, s in zip(docs, scores)]}
        moved = {"q": [(d, 3.0 * s + 1.0) for d, s in zip(docs, scores)]}
        assert mrr_at_k(run, qrels) == mrr_at_k(moved, qrels)
        assert ndcg_at_k(run, qrels) == pytest.approx(ndcg_at_k(moved, qrels))

    @settings(max_examples=100)
    @given(st.permutations(list("abcdefgh")), st.integers(1, 7))
    def test_promoting_relevant_doc_helps(self, order, pos):
        order = list(order)
        rel = order[pos]
        qrels = {"q": {rel: 1}}
        before = ndcg_at_k({"q": ranked(*order)}, qrels)
        order[pos - 1], order[pos] = order[pos], order[pos - 1]
        after = ndcg_at_k({"q": ranked(*order)}, qrels)
        assert after >= before
        assert mrr_at_k({"q": ranked(*order)}, qrels) >= 1.0 / (pos + 1)


class TestCoverage:
    def test_unjudged_queries_skipped(self):
        report = evaluate({"q1": ranked("a"), "q2": ranked("b")}, {"q1": {"a": 1}}, "mrr", 10)
        assert (report.value, report.n_queries, report.n_skipped) == (1.0, 1, 1)

    def test_judged_but_missing_query_not_counted(self):
        report = evaluate({"q1": ranked("a")}, {"q1": {"a": 1}, "q9": {"z": 1}}, "mrr", 10)
        assert report.n_queries == 1

    def test_no_overlap(self):
        with pytest.raises(NoOverlapError):
            mrr_at_k({"q1": ranked("a")}, {"q2": {"a": 1}})

    def test_ndcg_all_zero_grades(self):
        with pytest.raises(NoOverlapError):
            ndcg_at_k({"q": ranked("a")}, {"q": {"a": 0}})

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            evaluate({"q": ranked("a")}, {"q": {"a": 1}}, "map")


class TestFiles:
    def test_qrels(self, tmp_path):
        (tmp_path / "qrels").write_text("q1 0 d1 2\nq1 0 d2 0\n\nq2 0 d3 1\n")
        assert read_qrels(tmp_path / "qrels") == {"q1": {"d1": 2, "d2": 0}, "q2": {"d3": 1}}

    @pytest.mark.parametrize("line", ["q1 0 d1", "q1 0 d1 x", "q1 0 d1 -1"])
    def test_bad_qrels(self, tmp_path, line):
        (tmp_path / "qrels").write_text(line + "\n")
        with pytest.raises(RunFormatError):
            read_qrels(tmp_path / "qrels")

    def test_run_round_trip(self, tmp_path):
        run = {"q1": [("d2", 1.5), ("d1", 3.25)], "q2": [("d9", 0.1)]}
        write_run(run, tmp_path / "run", tag="t")
        assert read_run(tmp_path / "run") == {q: normalize_ranking(h) for q, h in run.items()}
        assert format_run(run, "t").splitlines()[0] == "q1 Q0 d1 1 3.25 t"

    def test_duplicate_doc_in_run(self, tmp_path):
        (tmp_path / "run").write_text("q1 Q0 d1 1 2.0 t\nq1 Q0 d1 2 1.0 t\n")
        with pytest.raises(RunFormatError, match="duplicate"):
            read_run(tmp_path / "run")

    @pytest.mark.parametrize("line", ["q1 Q0 d1 1 2.0", "q1 Q0 d1 1 abc t"])
    def test_bad_run(self, tmp_path, line):
        (tmp_path / "run").write_text(line + "\n")
        with pytest.raises(RunFormatError):
            read_run(tmp_path / "run")

    def test_report_csv(self, tmp_path):
        report = evaluate({"q": ranked("a", "b")}, {"q": {"b": 1}}, "mrr", 10)
        write_report([report], tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines == ["metric,k,value,n_queries,n_skipped", "mrr,10,0.5,1,0"]


def test_random_permutations_against_oracle():
    rng = np.random.default_rng(0)
    docs = [f"d{i}" for i in range(30)]
    for _ in range(200):
        grades = {d: int(g) for d, g in zip(docs, rng.integers(0, 4, 30)) if g}
        if not grades:
            continue
        order = list(rng.permutation(docs))
        run = {"q": ranked(*order)}
        first = next((i for i, d in enumerate(order[:10]) if grades.get(d, 0) >= 1), None)
        assert mrr_at_k(run, {"q": grades}) == (0.0 if first is None else 1 / (first + 1))
        assert ndcg_at_k(run, {"q": grades}) == pytest.approx(ndcg_oracle(order, grades, 10))
