"""Fit the score-table projection ``(w, b)`` by distillation.

The objective is ``rank + lambda_q * reg(queries) + lambda_d * reg(docs)``
where ``rank`` distills teacher scores on (query, positive, negative)
triples, and the regularizer is L1 or FLOPS. Documents are frozen, so the
document term is reported but carries no gradient. Gradients are analytic
and the optimizer is plain mini-batch gradient descent.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from lilsr.encoder import EmbeddingMatrix, ScoreTable, build_table, table_scores
from lilsr.sparse import SparseVector, l1_norm

LOSSES = ("kl", "mse", "pointwise_mse")
REGULARIZERS = ("l1", "flops")
LOG_COLUMNS = ("step", "rank_loss", "reg_q", "reg_d", "total")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainTriple:
    query_tokens: np.ndarray
    pos_doc: SparseVector
    neg_doc: SparseVector
    teacher_pos: float
    teacher_neg: float

    def __post_init__(self):
        if not (math.isfinite(self.teacher_pos) and math.isfinite(self.teacher_neg)):
            raise ValueError("teacher scores must be finite")
        object.__setattr__(self, "query_tokens", np.asarray(self.query_tokens, dtype=np.int64))


@dataclass(frozen=True)
class FitConfig:
    loss: str = "kl"
    reg: str = "l1"
    lambda_q: float = 0.0
    lambda_d: float = 0.0
    lr: float = 1e-2
    steps: int = 1000
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.reg not in REGULARIZERS:
            raise ValueError(f"reg must be one of {REGULARIZERS}, got {self.reg!r}")
        if self.lambda_q < 0 or self.lambda_d < 0:
            raise ValueError("regularization weights must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class FitState:
    w: np.ndarray
    b: float
    step: int = 0
    last_loss: float = math.nan
    rank: float = math.nan
    reg_q: float = math.nan
    reg_d: float = math.nan

    @classmethod
    def initial(cls, dim: int, seed: int = 0) -> FitState:
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(dim)
        return cls(w=rng.uniform(-bound, bound, size=dim), b=0.0)


# --- scalar losses and regularizers -------------------------------------------------


def _log_softmax2(a: float, b: float) -> tuple[float, float]:
    m = max(a, b)
    lse = m + math.log(math.exp(a - m) + math.exp(b - m))
    return a - lse, b - lse


def loss_kl(s_pos: float, s_neg: float, t_pos: float, t_neg: float) -> float:
    """KL(softmax(teacher) || softmax(student)) over the two documents."""
    lt = _log_softmax2(t_pos, t_neg)
    ls = _log_softmax2(s_pos, s_neg)
    return sum(math.exp(a) * (a - c) for a, c in zip(lt, ls))


def loss_margin_mse(s_pos: float, s_neg: float, t_pos: float, t_neg: float) -> float:
    return ((s_pos - s_neg) - (t_pos - t_neg)) ** 2


def loss_pointwise_mse(s_pos: float, s_neg: float, t_pos: float, t_neg: float) -> float:
    return (s_pos - t_pos) ** 2 + (s_neg - t_neg) ** 2


def reg_l1(batch: Sequence[SparseVector]) -> float:
    if not batch:
        raise ValueError("empty batch")
    return sum(l1_norm(v) for v in batch) / len(batch)


def reg_flops(batch: Sequence[SparseVector]) -> float:
    """Sum over coordinates of the squared batch-mean weight."""
    if not batch:
        raise ValueError("empty batch")
    idx = np.concatenate([v.indices for v in batch]).astype(np.int64)
    val = np.concatenate([v.values for v in batch])
    if idx.size == 0:
        return 0.0
    _, inv = np.unique(idx, return_inverse=True)
    mean = np.bincount(inv, weights=val) / len(batch)
    return float(np.sum(mean**2))


# --- packed triples -------------------------------------------------------------------


@dataclass
class PackedTriples:
    """Flat per-(triple, distinct query token) arrays.

    Entry ``e`` belongs to triple ``owner[e]``, names token ``tok[e]`` with
    multiplicity ``cnt[e]``, and records the positive and negative document
    weights on that token. Document entries are kept for the document
    regularizer only.
    """

    n: int
    owner: np.ndarray
    tok: np.ndarray
    cnt: np.ndarray
    w_pos: np.ndarray
    w_neg: np.ndarray
    t_pos: np.ndarray
    t_neg: np.ndarray
    entry_ptr: np.ndarray
    doc_ptr: np.ndarray
    doc_tok: np.ndarray
    doc_val: np.ndarray

    def select(self, rows: np.ndarray) -> PackedTriples:
        rows = np.asarray(rows, dtype=np.int64)
        e = _ranges(self.entry_ptr, rows)
        lengths = np.diff(self.entry_ptr)[rows]
        d_rows = np.stack([2 * rows, 2 * rows + 1], axis=1).ravel()
        de = _ranges(self.doc_ptr, d_rows)
        d_len = np.diff(self.doc_ptr)[d_rows]
        return PackedTriples(
            n=rows.size,
            owner=np.repeat(np.arange(rows.size), lengths),
            tok=self.tok[e],
            cnt=self.cnt[e],
            w_pos=self.w_pos[e],
            w_neg=self.w_neg[e],
            t_pos=self.t_pos[rows],
            t_neg=self.t_neg[rows],
            entry_ptr=_ptr(lengths),
            doc_ptr=_ptr(d_len),
            doc_tok=self.doc_tok[de],
            doc_val=self.doc_val[de],
        )


def _ptr(lengths: np.ndarray) -> np.ndarray:
    out = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=out[1:])
    return out


def _ranges(ptr: np.ndarray, rows: np.ndarray) -> np.ndarray:
    starts, ends = ptr[rows], ptr[rows + 1]
    lengths = ends - starts
    if lengths.sum() == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.repeat(starts - _ptr(lengths)[:-1], lengths)
    return np.arange(lengths.sum()) + offsets


def _weights_at(doc: SparseVector, ids: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(doc.indices, ids)
    pos = np.minimum(pos, max(doc.nnz - 1, 0))
    hit = doc.indices[pos] == ids if doc.nnz else np.zeros(ids.size, dtype=bool)
    return np.where(hit, doc.values[pos] if doc.nnz else 0.0, 0.0)


def pack_triples(triples: Sequence[TrainTriple], vocab_size: int | None = None) -> PackedTriples:
    if not triples:
        raise ValueError("no training triples")
    owner, tok, cnt, w_pos, w_neg, lengths = [], [], [], [], [], []
    doc_tok, doc_val, doc_len = [], [], []
    for i, tr in enumerate(triples):
        ids, counts = np.unique(tr.query_tokens, return_counts=True)
        if vocab_size is not None and ids.size and (ids[0] < 0 or ids[-1] >= vocab_size):
            raise ValueError(f"triple {i}: query token outside vocabulary of size {vocab_size}")
        owner.append(np.full(ids.size, i))
        tok.append(ids)
        cnt.append(counts.astype(np.float64))
        w_pos.append(_weights_at(tr.pos_doc, ids))
        w_neg.append(_weights_at(tr.neg_doc, ids))
        lengths.append(ids.size)
        for doc in (tr.pos_doc, tr.neg_doc):
            doc_tok.append(doc.indices.astype(np.int64))
            doc_val.append(doc.values)
            doc_len.append(doc.nnz)
    return PackedTriples(
        n=len(triples),
        owner=np.concatenate(owner).astype(np.int64),
        tok=np.concatenate(tok).astype(np.int64),
        cnt=np.concatenate(cnt),
        w_pos=np.concatenate(w_pos),
        w_neg=np.concatenate(w_neg),
        t_pos=np.array([t.teacher_pos for t in triples], dtype=np.float64),
        t_neg=np.array([t.teacher_neg for t in triples], dtype=np.float64),
        entry_ptr=_ptr(np.asarray(lengths)),
        doc_ptr=_ptr(np.asarray(doc_len)),
        doc_tok=np.concatenate(doc_tok),
        doc_val=np.concatenate(doc_val),
    )


# --- objective ------------------------------------------------------------------------


@dataclass
class Objective:
    total: float
    rank: float
    reg_q: float
    reg_d: float
    grad_w: np.ndarray = field(repr=False)
    grad_b: float = 0.0


def _rank_terms(loss: str, s_pos, s_neg, t_pos, t_neg):
    """Per-triple loss and its derivatives w.r.t. the two student scores."""
    if loss == "kl":
        ls = np.stack([s_pos, s_neg])
        lt = np.stack([t_pos, t_neg])
        ls = ls - np.logaddexp(ls[0], ls[1])
        lt = lt - np.logaddexp(lt[0], lt[1])
        pt, ps = np.exp(lt), np.exp(ls)
        value = np.sum(pt * (lt - ls), axis=0)
        return value, ps[0] - pt[0], ps[1] - pt[1]
    if loss == "mse":
        delta = (s_pos - s_neg) - (t_pos - t_neg)
        return delta**2, 2 * delta, -2 * delta
    d_pos, d_neg = s_pos - t_pos, s_neg - t_neg
    return d_pos**2 + d_neg**2, 2 * d_pos, 2 * d_neg


def _doc_reg(reg: str, batch: PackedTriples) -> float:
    n_docs = 2 * batch.n
    if reg == "l1":
        return float(batch.doc_val.sum() / n_docs)
    if batch.doc_tok.size == 0:
        return 0.0
    _, inv = np.unique(batch.doc_tok, return_inverse=True)
    mean = np.bincount(inv, weights=batch.doc_val) / n_docs
    return float(np.sum(mean**2))


def objective(
    w: np.ndarray,
    b: float,
    batch: PackedTriples,
    cfg: FitConfig,
    rows: np.ndarray,
    special_mask: np.ndarray | None = None,
) -> Objective:
    """Loss components and analytic gradient at ``(w, b)`` over ``batch``.

    ``rows`` are embedding rows indexed by token id. ReLU's subgradient at
    exactly zero is taken as 0.
    """
    B = batch.n
    U, inv = np.unique(batch.tok, return_inverse=True)
    pre = rows[U] @ w + b
    active = pre > 0
    if special_mask is not None:
        active &= ~special_mask[U]
    s = np.where(active, np.log1p(np.where(active, pre, 0.0)), 0.0)
    dsdpre = np.where(active, 1.0 / (1.0 + np.where(active, pre, 0.0)), 0.0)

    q_weight = batch.cnt * s[inv]
    s_pos = np.bincount(batch.owner, weights=q_weight * batch.w_pos, minlength=B)
    s_neg = np.bincount(batch.owner, weights=q_weight * batch.w_neg, minlength=B)
    value, g_pos, g_neg = _rank_terms(cfg.loss, s_pos, s_neg, batch.t_pos, batch.t_neg)
    rank = float(value.mean())

    per_entry = batch.cnt * (g_pos[batch.owner] * batch.w_pos + g_neg[batch.owner] * batch.w_neg) / B
    g_s = np.bincount(inv, weights=per_entry, minlength=U.size)

    mass = np.bincount(inv, weights=batch.cnt, minlength=U.size) / B
    if cfg.reg == "l1":
        reg_q = float(np.sum(mass * s))
        g_s += cfg.lambda_q * mass
    else:
        reg_q = float(np.sum((mass * s) ** 2))
        g_s += cfg.lambda_q * 2.0 * s * mass**2

    reg_d = _doc_reg(cfg.reg, batch)
    g_pre = g_s * dsdpre
    return Objective(
        total=rank + cfg.lambda_q * reg_q + cfg.lambda_d * reg_d,
        rank=rank,
        reg_q=reg_q,
        reg_d=reg_d,
        grad_w=rows[U].T @ g_pre,
        grad_b=float(g_pre.sum()),
    )


def _special_mask(vocab_size: int, special_ids: Iterable[int]) -> np.ndarray:
    mask = np.zeros(vocab_size, dtype=bool)
    mask[list(special_ids)] = True
    return mask


def student_score(q_tokens, w, b: float, E: EmbeddingMatrix, doc: SparseVector, special_ids: Iterable[int] = ()) -> float:
    """Score of ``doc`` under the query encoded directly from ``(w, b)``."""
    ids, counts = np.unique(np.asarray(q_tokens, dtype=np.int64), return_counts=True)
    if ids.size == 0:
        return 0.0
    s = table_scores(w, b, E.rows[ids], ())
    s[np.isin(ids, list(special_ids))] = 0.0
    return float(np.sum(counts * s * _weights_at(doc, ids)))


def grad_step(
    state: FitState,
    batch: Sequence[TrainTriple] | PackedTriples,
    cfg: FitConfig,
    E: EmbeddingMatrix,
    special_ids: Iterable[int] = (),
    *,
    special_mask: np.ndarray | None = None,
) -> FitState:
    """One gradient-descent update; loss fields describe the pre-update point."""
    if not isinstance(batch, PackedTriples):
        batch = pack_triples(batch, E.vocab_size)
    if special_mask is None:
        special_mask = _special_mask(E.vocab_size, special_ids)
    # overflow is caught below as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        obj = objective(state.w, state.b, batch, cfg, E.rows, special_mask)
    step = state.step + 1
    if not math.isfinite(obj.total):
        raise DivergenceError(step, "loss")
    if not (np.all(np.isfinite(obj.grad_w)) and math.isfinite(obj.grad_b)):
        raise DivergenceError(step, "gradient")
    w = state.w - cfg.lr * obj.grad_w
    b = state.b - cfg.lr * obj.grad_b
    if not (np.all(np.isfinite(w)) and math.isfinite(b)):
        raise DivergenceError(step, "parameters")
    return FitState(w=w, b=b, step=step, last_loss=obj.total, rank=obj.rank, reg_q=obj.reg_q, reg_d=obj.reg_d)


@dataclass
class FitResult:
    w: np.ndarray
    b: float
    table: ScoreTable
    log: list[dict] = field(repr=False)
    state: FitState = field(repr=False, default=None)

    def write_log(self, path) -> None:
        write_training_log(self.log, path)


def fit(
    triples: Sequence[TrainTriple] | PackedTriples,
    E: EmbeddingMatrix,
    cfg: FitConfig,
    special_ids: Iterable[int] = (),
    init: FitState | None = None,
) -> FitResult:
    """Run ``cfg.steps`` mini-batch steps over seeded epoch shuffles."""
    packed = triples if isinstance(triples, PackedTriples) else pack_triples(triples, E.vocab_size)
    special_ids = list(special_ids)
    mask = _special_mask(E.vocab_size, special_ids)
    state = init if init is not None else FitState.initial(E.dim, cfg.seed)
    if state.w.shape != (E.dim,):
        raise ValueError(f"initial w has shape {state.w.shape}, embeddings have dim {E.dim}")
    rng = np.random.default_rng(cfg.seed)
    log: list[dict] = []
    order = np.zeros(0, dtype=np.int64)
    cursor = 0
    for _ in range(cfg.steps):
        if cursor >= order.size:
            order = rng.permutation(packed.n)
            cursor = 0
        rows = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        state = grad_step(state, packed.select(rows), cfg, E, special_mask=mask)
        log.append(
            {"step": state.step, "rank_loss": state.rank, "reg_q": state.reg_q, "reg_d": state.reg_d, "total": state.last_loss}
        )
    table = build_table(state.w, state.b, E, special_ids)
    return FitResult(w=state.w.copy(), b=float(state.b), table=table, log=log, state=replace(state))


def write_training_log(log: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in log:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
