"""Exact retrieval over a corpus, NDCG@10, seed aggregation, significance.

Search is exhaustive: every query is scored against every document through
head projection plus MaxSim, with deterministic score-then-id ordering.
NDCG follows the trec-eval conventions (gain 2^rel - 1, log2(rank+1)
discount, queries without relevant judgments excluded from the mean).  The
Student-t CDF for the paired test is computed from scratch through the
regularized incomplete beta function.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .heads import HeadParams, head_forward
from .maxsim import maxsim_score

log = logging.getLogger(__name__)

# qid -> did -> graded relevance
Qrels = dict[str, dict[str, int]]

QUERY_TOKEN_CAP = 32
DOC_TOKEN_CAP = 300


@dataclass(frozen=True)
class RunEntry:
    """Ranked retrieval output for one query, best first."""

    query_id: str
    ranking: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class NdcgResult:
    per_query: dict[str, float]
    mean: float | None
    skipped_unjudged: int  # run queries absent from the qrels
    skipped_no_relevant: int  # judged queries with no relevant document


@dataclass(frozen=True)
class SeedAggregate:
    mean: float
    std: float | None  # sample standard deviation; absent for a single seed
    count: int


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    p_value: float
    dof: int
    floored: bool = False  # p below the reporting floor (zero-variance case)

    def p_display(self) -> str:
        return "<1e-12" if self.floored else repr(self.p_value)


def exact_search(
    queries: dict[str, np.ndarray],
    corpus: dict[str, np.ndarray],
    head: HeadParams,
    top_k: int,
) -> list[RunEntry]:
    """Score every query against every document; keep the top_k per query.

    Ties are ordered by document id ascending, so corpus insertion order
    never affects the output.
    """
    if not corpus:
        raise ContractError("exact_search requires a non-empty corpus")
    if top_k < 1:
        raise ContractError(f"top_k must be >= 1, got {top_k}")
    projected = {did: head_forward(head, tokens) for did, tokens in corpus.items()}
    entries = []
    for qid, tokens in queries.items():
        q = head_forward(head, tokens)
        scored = [(did, maxsim_score(q, dtoks)) for did, dtoks in projected.items()]
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        entries.append(RunEntry(query_id=qid, ranking=tuple(scored[:top_k])))
    return entries


def _dcg(gains: list[int], k: int) -> float:
    return sum(
        (2.0**rel - 1.0) / math.log2(rank + 2) for rank, rel in enumerate(gains[:k])
    )


def ndcg_at_k(run: list[RunEntry], qrels: Qrels, k: int = 10) -> NdcgResult:
    """Per-query NDCG@k and its mean over evaluable queries."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    per_query: dict[str, float] = {}
    skipped_unjudged = 0
    skipped_no_relevant = 0
    for entry in run:
        judged = qrels.get(entry.query_id)
        if judged is None:
            skipped_unjudged += 1
            log.warning("query %s has no judgments; skipped", entry.query_id)
            continue
        ideal = sorted(judged.values(), reverse=True)
        if not ideal or ideal[0] <= 0:
            skipped_no_relevant += 1
            continue
        gains = [judged.get(did, 0) for did, _ in entry.ranking]
        per_query[entry.query_id] = _dcg(gains, k) / _dcg(ideal, k)
    mean = sum(per_query.values()) / len(per_query) if per_query else None
    return NdcgResult(
        per_query=per_query,
        mean=mean,
        skipped_unjudged=skipped_unjudged,
        skipped_no_relevant=skipped_no_relevant,
    )


def aggregate_seeds(per_seed_means: list[float]) -> SeedAggregate:
    """Arithmetic mean and sample (n-1) standard deviation across seeds."""
    if not per_seed_means:
        raise ContractError("aggregate_seeds requires at least one value")
    n = len(per_seed_means)
    mean = sum(per_seed_means) / n
    if n == 1:
        return SeedAggregate(mean=mean, std=None, count=1)
    var = sum((v - mean) ** 2 for v in per_seed_means) / (n - 1)
    return SeedAggregate(mean=mean, std=math.sqrt(var), count=n)


_BETA_EPS = 1e-15
_BETA_MAX_ITER = 400


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise ContractError(f"incomplete beta failed to converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) to roughly 1e-13 relative accuracy."""
    if not (a > 0 and b > 0):
        raise ContractError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: int) -> float:
    """P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    if dof < 1:
        raise ContractError(f"degrees of freedom must be >= 1, got {dof}")
    return regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))


def paired_t_test(a: list[float], b: list[float]) -> TTestResult:
    """Classic paired two-sided t-test on the elementwise differences.

    All-zero differences report t=0, p=1.  Identical nonzero differences
    have zero variance; the p-value is then below any floating floor and is
    reported as such instead of NaN.
    """
    x = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ContractError(f"paired samples differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise ContractError("paired t-test needs at least two pairs")
    diffs = x - y
    n = diffs.size
    dof = n - 1
    mean = float(np.mean(diffs))
    sd = float(np.std(diffs, ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(statistic=0.0, p_value=1.0, dof=dof)
        return TTestResult(
            statistic=math.copysign(math.inf, mean), p_value=0.0, dof=dof, floored=True
        )
    t = mean / (sd / math.sqrt(n))
    return TTestResult(statistic=t, p_value=student_t_two_sided_p(t, dof), dof=dof)


def load_qrels(path) -> Qrels:
    """TREC qrels: whitespace-separated "qid 0 docid rel" lines."""
    qrels: Qrels = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
            qid, _, did, rel_text = fields
            try:
                rel = int(rel_text)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad relevance {rel_text!r}") from None
            if rel < 0:
                raise FormatError(f"{path}:{lineno}: negative relevance {rel}")
            if did in qrels.get(qid, {}):
                raise FormatError(f"{path}:{lineno}: duplicate judgment for ({qid}, {did})")
            qrels.setdefault(qid, {})[did] = rel
    return qrels


def write_qrels(path, qrels: Qrels) -> None:
    with open(path, "w") as fh:
        for qid in qrels:
            for did, rel in qrels[qid].items():
                fh.write(f"{qid} 0 {did} {rel}\n")


def write_run(path, run: list[RunEntry], tag: str = "latelab") -> None:
    """TREC run format: "qid Q0 docid rank score tag", scores to 6 decimals."""
    with open(path, "w") as fh:
        for entry in run:
            for rank, (did, score) in enumerate(entry.ranking, start=1):
                fh.write(f"{entry.query_id} Q0 {did} {rank} {score:.6f} {tag}\n")


def load_run(path) -> list[RunEntry]:
    by_query: dict[str, list[tuple[int, str, float]]] = {}
    order: list[str] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
            qid, _, did, rank_text, score_text, _ = fields
            try:
                rank = int(rank_text)
                score = float(score_text)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad rank or score") from None
            if qid not in by_query:
                by_query[qid] = []
                order.append(qid)
            by_query[qid].append((rank, did, score))
    entries = []
    for qid in order:
        rows = sorted(by_query[qid])
        ranks = [r for r, _, _ in rows]
        if ranks != list(range(1, len(rows) + 1)):
            raise FormatError(f"{path}: ranks for query {qid} are not contiguous from 1")
        entries.append(RunEntry(query_id=qid, ranking=tuple((d, s) for _, d, s in rows)))
    return entries


def metrics_report(
    ndcg: NdcgResult,
    k: int,
    seed_aggregate: SeedAggregate | None = None,
    t_test: TTestResult | None = None,
    metadata: dict | None = None,
) -> dict:
    """Structured metrics block, JSON-serializable."""
    report: dict = {
        "metric": f"ndcg@{k}",
        "gain": "2^rel - 1",
        "discount": "log2(rank + 1)",
        "mean": ndcg.mean,
        "evaluated_queries": len(ndcg.per_query),
        "skipped_unjudged": ndcg.skipped_unjudged,
        "skipped_no_relevant": ndcg.skipped_no_relevant,
        "per_query": dict(sorted(ndcg.per_query.items())),
    }
    if seed_aggregate is not None:
        report["seed_aggregate"] = {
            "mean": seed_aggregate.mean,
            "std": seed_aggregate.std,
            "count": seed_aggregate.count,
        }
    if t_test is not None:
        report["paired_t_test"] = {
            "statistic": None if math.isinf(t_test.statistic) else t_test.statistic,
            "p_value": t_test.p_display(),
            "dof": t_test.dof,
        }
    if metadata:
        report["metadata"] = metadata
    return report


def write_metrics(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
