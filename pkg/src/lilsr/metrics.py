"""mRR@k and nDCG@k over TREC-format runs and qrels."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

Qrels = dict[str, dict[str, int]]
Run = dict[str, list[tuple[str, float]]]


class RunFormatError(ValueError):
    pass


class NoOverlapError(ValueError):
    """Run and qrels share no query."""


@dataclass(frozen=True)
class MetricReport:
    metric: str
    k: int
    value: float
    n_queries: int
    n_skipped: int

    def as_row(self) -> dict:
        return {"metric": self.metric, "k": self.k, "value": self.value, "n_queries": self.n_queries, "n_skipped": self.n_skipped}


def normalize_ranking(hits: Sequence[tuple[str, float]]) -> list[tuple[str, float]]:
    """Order by score descending, then doc id ascending; reject duplicates."""
    seen = set()
    for doc, _ in hits:
        if doc in seen:
            raise RunFormatError(f"duplicate document {doc!r}")
        seen.add(doc)
    return sorted(hits, key=lambda h: (-h[1], h[0]))


def _judged_queries(run: Mapping, qrels: Mapping) -> tuple[list[str], int]:
    shared = [q for q in run if q in qrels]
    skipped = len(run) - len(shared)
    if not shared:
        raise NoOverlapError("run and qrels have no query in common")
    if skipped:
        logger.warning("%d run queries have no judgments and were skipped", skipped)
    return shared, skipped


def mrr_report(run: Run, qrels: Qrels, k: int = 10) -> MetricReport:
    queries, skipped = _judged_queries(run, qrels)
    total = 0.0
    for q in queries:
        judged = qrels[q]
        for rank, (doc, _) in enumerate(normalize_ranking(run[q])[:k], start=1):
            if judged.get(doc, 0) >= 1:
                total += 1.0 / rank
                break
    return MetricReport("mrr", k, total / len(queries), len(queries), skipped)


def ndcg_report(run: Run, qrels: Qrels, k: int = 10) -> MetricReport:
    queries, skipped = _judged_queries(run, qrels)
    total = 0.0
    used = 0
    for q in queries:
        judged = qrels[q]
        ideal = sorted(judged.values(), reverse=True)[:k]
        idcg = sum((2**g - 1) / math.log2(i + 2) for i, g in enumerate(ideal))
        if idcg <= 0:
            skipped += 1
            continue
        ranked = normalize_ranking(run[q])[:k]
        dcg = sum((2 ** judged.get(doc, 0) - 1) / math.log2(i + 2) for i, (doc, _) in enumerate(ranked))
        total += dcg / idcg
        used += 1
    if used == 0:
        raise NoOverlapError("no judged query has a relevant document")
    return MetricReport("ndcg", k, total / used, used, skipped)


def mrr_at_k(run: Run, qrels: Qrels, k: int = 10) -> float:
    return mrr_report(run, qrels, k).value


def ndcg_at_k(run: Run, qrels: Qrels, k: int = 10) -> float:
    return ndcg_report(run, qrels, k).value


METRICS = {"mrr": mrr_report, "ndcg": ndcg_report}


def evaluate(run: Run, qrels: Qrels, metric: str = "mrr", k: int = 10) -> MetricReport:
    try:
        fn = METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}") from None
    return fn(run, qrels, k)


def read_qrels(path) -> Qrels:
    qrels: Qrels = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise RunFormatError(f"{path}:{lineno}: expected 'qid 0 docid grade'")
        qid, _, doc, grade = parts
        try:
            g = int(grade)
        except ValueError:
            raise RunFormatError(f"{path}:{lineno}: grade {grade!r} is not an integer") from None
        if g < 0:
            raise RunFormatError(f"{path}:{lineno}: negative grade {g}")
        qrels.setdefault(qid, {})[doc] = g
    return qrels


def read_run(path) -> Run:
    run: dict[str, list[tuple[str, float]]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise RunFormatError(f"{path}:{lineno}: expected 'qid Q0 docid rank score tag'")
        qid, _, doc, _, score, _ = parts
        try:
            s = float(score)
        except ValueError:
            raise RunFormatError(f"{path}:{lineno}: score {score!r} is not a number") from None
        run.setdefault(qid, []).append((doc, s))
    out = {}
    for qid, hits in run.items():
        try:
            out[qid] = normalize_ranking(hits)
        except RunFormatError as exc:
            raise RunFormatError(f"{path}: query {qid}: {exc}") from None
    return out


def format_run(run: Run, tag: str = "lilsr") -> str:
    lines = []
    for qid, hits in run.items():
        for rank, (doc, score) in enumerate(normalize_ranking(hits), start=1):
            lines.append(f"{qid} Q0 {doc} {rank} {score!r} {tag}")
    return "".join(line + "\n" for line in lines)


def write_run(run: Run, path, tag: str = "lilsr") -> None:
    Path(path).write_text(format_run(run, tag))


def write_report(reports: Sequence[MetricReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["metric", "k", "value", "n_queries", "n_skipped"])
        writer.writeheader()
        for r in reports:
            writer.writerow(r.as_row())
