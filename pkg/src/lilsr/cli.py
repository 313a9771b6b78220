"""Command-line entry points: build, fit, encode, search, evaluate, bench.

Exit codes: 0 success, 1 invalid arguments or input, 2 runtime failure
(I/O and the like), 3 training divergence.

Every option can also come from a JSON object passed with ``--config``;
an explicit flag beats the file, and the file beats the built-in default.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

from lilsr.encoder import (
    EmbeddingMatrix,
    EmptyQueryError,
    IdfTable,
    ScoreTable,
    combine_idf,
    compute_idf,
    encode_query,
)
from lilsr.fitter import LOSSES, REGULARIZERS, DivergenceError, FitConfig, TrainTriple, fit
from lilsr.index import BuildConfig, build_index, index_stats, read_index, write_index
from lilsr.metrics import METRICS, evaluate, read_qrels, read_run, write_report, write_run
from lilsr.search import (
    SearchParams,
    TopKResult,
    parse_sweep,
    run_sweep,
    search_approximate,
    search_exhaustive,
    write_bench_csv,
)
from lilsr.sparse import Collection, collection_stats, read_collection, write_collection
from lilsr.synthetic import zipf_collection
from lilsr.tokenizer import TokenizerVocab, tokenize

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(ValueError):
    """Bad flags, config keys, or input paths."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; we reserve 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# per-command {dest: (default, type)}; filled in as options are declared
_OPTIONS: dict[str, dict[str, tuple[object, Callable]]] = {}


def _opt(sub: argparse.ArgumentParser, cmd: str, flag: str, default, type=str, **kw) -> None:
    dest = kw.pop("dest", flag.lstrip("-").replace("-", "_"))
    shown = "" if default is None else f" (default: {default})"
    kw["help"] = kw.get("help", "") + shown
    if type is bool:
        sub.add_argument(flag, dest=dest, action="store_true", default=argparse.SUPPRESS, **kw)
    else:
        sub.add_argument(flag, dest=dest, type=type, default=argparse.SUPPRESS, **kw)
    _OPTIONS.setdefault(cmd, {})[dest] = (default, type)


def _queries_sidecar(path) -> Path:
    return Path(f"{path}.qids")


def read_queries_tsv(path) -> list[tuple[str, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        qid, sep, text = line.partition("\t")
        if not sep or not qid:
            raise UsageError(f"{path}:{lineno}: expected 'qid<TAB>text'")
        rows.append((qid, text))
    return rows


def read_encoded_queries(path) -> tuple[list[str], Collection]:
    c = read_collection(path)
    sidecar = _queries_sidecar(path)
    if sidecar.exists():
        qids = sidecar.read_text(encoding="utf-8").splitlines()
        if len(qids) != c.n_docs:
            raise UsageError(f"{sidecar}: {len(qids)} ids for {c.n_docs} encoded queries")
    else:
        qids = [str(i) for i in range(c.n_docs)]
    return qids, c


def write_encoded_queries(qids: Sequence[str], vectors, vocab_size: int, path) -> None:
    write_collection(Collection(list(vectors), vocab_size), path)
    _queries_sidecar(path).write_text("".join(q + "\n" for q in qids), encoding="utf-8")


def read_triples_tsv(path, vocab: TokenizerVocab, docs: Collection) -> list[TrainTriple]:
    """``qid, query text, positive doc row, negative doc row, teacher scores``."""
    triples = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise UsageError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
        _, text, pos, neg, t_pos, t_neg = parts
        try:
            p, n = int(pos), int(neg)
            tp, tn = float(t_pos), float(t_neg)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
        for d in (p, n):
            if not 0 <= d < docs.n_docs:
                raise UsageError(f"{path}:{lineno}: document {d} not in collection of {docs.n_docs}")
        triples.append(TrainTriple(tokenize(text, vocab), docs[p], docs[n], tp, tn))
    if not triples:
        raise UsageError(f"{path}: no training triples")
    return triples


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"no such file: {p}")


def _require_out(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).resolve().parent.is_dir():
            raise UsageError(f"output directory does not exist: {Path(p).parent}")


def _run_from_results(qids: Sequence[str], results: Sequence[TopKResult]) -> dict:
    return {q: [(str(d), s) for d, s in r.hits] for q, r in zip(qids, results)}


# --- commands -------------------------------------------------------------------------


def cmd_build_index(a) -> int:
    cfg = BuildConfig(max_postings=a.lam, alpha=a.alpha, centroid_fraction=a.centroid_fraction, seed=a.seed)
    _require_files(a.collection)
    _require_out(a.out)
    ix = build_index(read_collection(a.collection), cfg)
    write_index(ix, a.out)
    print(index_stats(ix).summary())
    return EXIT_OK


def cmd_fit_table(a) -> int:
    cfg = FitConfig(
        loss=a.loss, reg=a.reg, lambda_q=a.lambda_q, lambda_d=a.lambda_d, lr=a.lr,
        steps=a.steps, batch_size=a.batch, seed=a.seed,
    )  # fmt: skip
    log_path = a.log or f"{a.out}.log.csv"
    _require_files(a.triples, a.collection, a.embeddings, a.vocab)
    _require_out(a.out, log_path)
    vocab = TokenizerVocab.from_file(a.vocab)
    E = EmbeddingMatrix.load(a.embeddings)
    docs = read_collection(a.collection)
    if not E.vocab_size == len(vocab) == docs.vocab_size:
        raise UsageError(
            f"vocabulary sizes disagree: vocab {len(vocab)}, embeddings {E.vocab_size}, collection {docs.vocab_size}"
        )
    triples = read_triples_tsv(a.triples, vocab, docs)
    result = fit(triples, E, cfg, special_ids=vocab.special_ids)
    result.table.save(a.out)
    result.write_log(log_path)
    last = result.log[-1]["total"] if result.log else float("nan")
    print(f"fitted {len(triples)} triples for {cfg.steps} steps; final objective {last:.6g}")
    return EXIT_OK


def cmd_encode(a) -> int:
    rejects_path = a.rejects or f"{a.out}.rejects"
    _require_files(a.queries, a.table, a.vocab, a.idf)
    _require_out(a.out, rejects_path)
    vocab = TokenizerVocab.from_file(a.vocab)
    table = ScoreTable.load(a.table)
    if len(table) != len(vocab):
        raise UsageError(f"score table covers {len(table)} tokens, vocabulary has {len(vocab)}")
    if a.idf:
        table = combine_idf(table, IdfTable.load(a.idf))
    qids, vectors, rejected = [], [], []
    for qid, text in read_queries_tsv(a.queries):
        try:
            vectors.append(encode_query(tokenize(text, vocab), table))
            qids.append(qid)
        except EmptyQueryError:
            rejected.append(qid)
    write_encoded_queries(qids, vectors, len(table), a.out)
    Path(rejects_path).write_text("".join(q + "\n" for q in rejected), encoding="utf-8")
    print(f"encoded {len(qids)} queries")
    if rejected:
        print(f"warning: {len(rejected)} queries encoded to empty vectors; see {rejects_path}", file=sys.stderr)
    return EXIT_OK


def cmd_compute_idf(a) -> int:
    _require_files(a.collection)
    _require_out(a.out)
    compute_idf(read_collection(a.collection)).save(a.out)
    return EXIT_OK


def cmd_search(a) -> int:
    params = SearchParams(k=a.k, query_cut=a.query_cut, heap_factor=a.heap_factor)
    if a.mode == "approx" and not a.index:
        raise UsageError("approximate search needs --index")
    _require_files(a.collection, a.queries, a.index if a.mode == "approx" else None)
    _require_out(a.out)
    c = read_collection(a.collection)
    qids, queries = read_encoded_queries(a.queries)
    if a.mode == "approx":
        ix = read_index(a.index, c)
        results = [search_approximate(q, ix, params) for q in queries]
    else:
        results = [search_exhaustive(q, c, params.k) for q in queries]
    write_run(_run_from_results(qids, results), a.out, tag=a.tag)
    return EXIT_OK


def cmd_evaluate(a) -> int:
    _require_files(a.run, a.qrels)
    _require_out(a.out)
    report = evaluate(read_run(a.run), read_qrels(a.qrels), a.metric, a.k)
    print(f"{report.metric}@{report.k}\t{report.value:.6f}\t{report.n_queries} queries\t{report.n_skipped} skipped")
    if a.out:
        write_report([report], a.out)
    return EXIT_OK


def cmd_bench(a) -> int:
    sweep = parse_sweep(a.sweep)
    defaults = {
        "lambda": a.lam, "alpha": a.alpha, "centroid_fraction": a.centroid_fraction,
        "query_cut": a.query_cut, "heap_factor": a.heap_factor, "k": a.k,
    }  # fmt: skip
    # validate every grid point before spending time on index builds
    for lam in sweep.get("lambda", [a.lam]):
        for alpha in sweep.get("alpha", [a.alpha]):
            for cf in sweep.get("centroid_fraction", [a.centroid_fraction]):
                BuildConfig(max_postings=lam, alpha=alpha, centroid_fraction=cf)
    for k in sweep.get("k", [a.k]):
        for qc in sweep.get("query_cut", [a.query_cut]):
            for hf in sweep.get("heap_factor", [a.heap_factor]):
                SearchParams(k=k, query_cut=qc, heap_factor=hf)
    if a.metric not in METRICS:
        raise UsageError(f"unknown metric {a.metric!r}")
    _require_files(a.collection, a.queries, a.qrels)
    _require_out(a.out)
    c = read_collection(a.collection)
    qids, queries = read_encoded_queries(a.queries)
    if not queries.n_docs:
        raise UsageError(f"{a.queries}: no queries")
    metric = None
    if a.qrels:
        qrels = read_qrels(a.qrels)

        def metric(results, k):
            rep = evaluate(_run_from_results(qids, results), qrels, a.metric, k)
            return f"{rep.metric}@{rep.k}", rep.value

    rows = run_sweep(c, list(queries), sweep, defaults=defaults, metric=metric, repeats=a.repeats)
    write_bench_csv(rows, a.out)
    for row in rows:
        print(
            f"{row['mode']}\tlambda={row['lambda']}\tk={row['k']}\taqt_us={row['aqt_us']:.1f}"
            f"\trecall@k={row['recall_at_k']:.4f}"
        )
    return EXIT_OK


def cmd_stats(a) -> int:
    _require_files(a.collection, a.index)
    c = read_collection(a.collection)
    print(collection_stats(c).summary())
    if a.index:
        print(index_stats(read_index(a.index, c)).summary())
    return EXIT_OK


def cmd_make_synthetic(a) -> int:
    _require_out(a.out, a.queries_out)
    c, queries = zipf_collection(
        a.docs, a.vocab_size, a.avg_nnz, exponent=a.exponent, n_queries=a.queries, seed=a.seed
    )
    write_collection(c, a.out)
    if a.queries_out:
        write_encoded_queries([str(i) for i in range(len(queries))], queries, c.vocab_size, a.queries_out)
    print(collection_stats(c).summary())
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    _OPTIONS.clear()
    parser = _Parser(prog="lilsr", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="JSON file of option values; flags override it")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = subs.add_parser("build-index", help="build a block-max inverted index")
    p.add_argument("collection")
    p.add_argument("out")
    _opt(p, "build-index", "--lambda", 4000, int, dest="lam", help="posting list length cap")
    _opt(p, "build-index", "--alpha", 0.4, float, help="summary energy in (0, 1]")
    _opt(p, "build-index", "--centroid-fraction", 0.1, float, help="blocks per posting")
    _opt(p, "build-index", "--seed", 0, int)
    p.set_defaults(func=cmd_build_index)

    p = subs.add_parser("fit-table", help="fit the token score table by distillation")
    for name in ("triples", "collection", "embeddings", "vocab", "out"):
        p.add_argument(name)
    _opt(p, "fit-table", "--loss", "kl", str, choices=LOSSES)
    _opt(p, "fit-table", "--reg", "l1", str, choices=REGULARIZERS)
    _opt(p, "fit-table", "--lambda-q", 0.0, float)
    _opt(p, "fit-table", "--lambda-d", 0.0, float)
    _opt(p, "fit-table", "--lr", 1e-2, float)
    _opt(p, "fit-table", "--steps", 1000, int)
    _opt(p, "fit-table", "--batch", 128, int)
    _opt(p, "fit-table", "--seed", 0, int)
    _opt(p, "fit-table", "--log", None, str, help="training log CSV; default OUT.log.csv")
    p.set_defaults(func=cmd_fit_table)

    p = subs.add_parser("encode", help="encode 'qid<TAB>text' queries with a score table")
    for name in ("queries", "table", "vocab", "out"):
        p.add_argument(name)
    _opt(p, "encode", "--idf", None, str, help="idf table to multiply into the scores")
    _opt(p, "encode", "--rejects", None, str, help="ids of empty queries; default OUT.rejects")
    p.set_defaults(func=cmd_encode)

    p = subs.add_parser("compute-idf", help="document-frequency idf over a collection")
    p.add_argument("collection")
    p.add_argument("out")
    p.set_defaults(func=cmd_compute_idf)

    p = subs.add_parser("search", help="write a TREC run for encoded queries")
    p.add_argument("queries")
    p.add_argument("out")
    _opt(p, "search", "--collection", None, str, help="forward collection (required)")
    _opt(p, "search", "--index", None, str, help="index file, needed for approx mode")
    _opt(p, "search", "--mode", "exact", str, choices=("exact", "approx"))
    _opt(p, "search", "--k", 10, int)
    _opt(p, "search", "--query-cut", 0, int, help="0 keeps every query token")
    _opt(p, "search", "--heap-factor", 1.0, float)
    _opt(p, "search", "--tag", "lilsr", str)
    p.set_defaults(func=cmd_search)

    p = subs.add_parser("evaluate", help="score a run against qrels")
    p.add_argument("run")
    p.add_argument("qrels")
    _opt(p, "evaluate", "--metric", "mrr", str, choices=sorted(METRICS))
    _opt(p, "evaluate", "--k", 10, int)
    _opt(p, "evaluate", "--out", None, str, help="metric CSV")
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("bench", help="time exhaustive and approximate search over a sweep")
    p.add_argument("collection")
    p.add_argument("queries")
    p.add_argument("out")
    _opt(p, "bench", "--sweep", "lambda=2000,4000,6000,8000", str, help="e.g. 'lambda=2000,4000;heap_factor=0.9'")
    _opt(p, "bench", "--lambda", 4000, int, dest="lam")
    _opt(p, "bench", "--alpha", 0.4, float)
    _opt(p, "bench", "--centroid-fraction", 0.1, float)
    _opt(p, "bench", "--query-cut", 0, int)
    _opt(p, "bench", "--heap-factor", 1.0, float)
    _opt(p, "bench", "--k", 10, int)
    _opt(p, "bench", "--repeats", 1, int, help="timed passes; each query keeps its fastest")
    _opt(p, "bench", "--qrels", None, str)
    _opt(p, "bench", "--metric", "mrr", str, choices=sorted(METRICS))
    p.set_defaults(func=cmd_bench)

    p = subs.add_parser("stats", help="collection and index statistics")
    p.add_argument("collection")
    _opt(p, "stats", "--index", None, str)
    p.set_defaults(func=cmd_stats)

    p = subs.add_parser("make-synthetic", help="Zipf-like synthetic collection and queries")
    p.add_argument("out")
    _opt(p, "make-synthetic", "--queries-out", None, str)
    _opt(p, "make-synthetic", "--docs", 10_000, int)
    _opt(p, "make-synthetic", "--vocab-size", 30_000, int)
    _opt(p, "make-synthetic", "--avg-nnz", 60, int)
    _opt(p, "make-synthetic", "--exponent", 1.0, float)
    _opt(p, "make-synthetic", "--queries", 200, int)
    _opt(p, "make-synthetic", "--seed", 0, int)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def _load_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"no such config file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def resolve_options(command: str, given: dict, config: dict) -> dict:
    """Merge defaults, config-file values, and explicit flags, in that order."""
    known = _OPTIONS.get(command, {})
    aliases = {"lambda": "lam", "batch_size": "batch"}
    merged = {dest: default for dest, (default, _) in known.items()}
    for key, value in config.items():
        dest = key.replace("-", "_")
        dest = aliases.get(dest, dest)
        if dest not in known:
            raise UsageError(f"unknown config key {key!r} for {command}")
        _, cast = known[dest]
        try:
            merged[dest] = None if value is None else (value if cast is bool else cast(value))
        except (TypeError, ValueError):
            raise UsageError(f"config key {key!r}: cannot use {value!r}") from None
    merged.update(given)
    return merged


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0, argument errors exit 1
        return int(exc.code or 0)
    try:
        given = {k: v for k, v in vars(args).items() if k not in ("config", "command", "func")}
        config = _load_config(args.config) if args.config else {}
        opts = resolve_options(args.command, given, config)
        if args.command == "search" and not opts.get("collection"):
            raise UsageError("search needs --collection")
        return args.func(argparse.Namespace(**opts))
    except DivergenceError as exc:
        print(f"lilsr: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"lilsr: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, RuntimeError, MemoryError) as exc:
        print(f"lilsr: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
