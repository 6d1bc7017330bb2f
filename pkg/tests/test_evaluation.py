"""Tests for exact search, NDCG, seed aggregation, the t-test, and TREC IO."""

import math

import numpy as np
import pytest
from scipy import stats

from latelab.errors import ContractError, FormatError
from latelab.evaluation import (
    RunEntry,
    aggregate_seeds,
    exact_search,
    load_qrels,
    load_run,
    metrics_report,
    ndcg_at_k,
    paired_t_test,
    regularized_incomplete_beta,
    write_qrels,
    write_run,
)
from latelab.heads import HeadConfig, build_head, head_forward
from latelab.maxsim import maxsim_score


def unit_rows(rng, rows, dim):
    m = rng.normal(size=(rows, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class TestExactSearch:
    def linear_head(self, dim=6, k=4, seed=0):
        return build_head(HeadConfig(input_dim=dim, output_dim=k, bias=False), seed=seed)

    def test_exact_match_document_ranks_first_with_score_m(self):
        rng = np.random.default_rng(50)
        head = self.linear_head()
        query = rng.normal(size=(3, 6))
        corpus = {
            "exact": np.vstack([query, rng.normal(size=(2, 6))]),
            "other": rng.normal(size=(5, 6)),
        }
        run = exact_search({"q": query}, corpus, head, top_k=2)
        assert run[0].ranking[0][0] == "exact"
        assert run[0].ranking[0][1] == pytest.approx(3.0, abs=1e-9)

    def test_top_k_beyond_corpus_returns_everything(self):
        rng = np.random.default_rng(51)
        head = self.linear_head()
        corpus = {f"d{i}": rng.normal(size=(4, 6)) for i in range(3)}
        run = exact_search({"q": rng.normal(size=(2, 6))}, corpus, head, top_k=50)
        assert len(run[0].ranking) == 3

    def test_matches_naive_double_loop(self):
        rng = np.random.default_rng(52)
        head = build_head(
            HeadConfig(input_dim=6, output_dim=4, depth=2, rho=2.0, residual=True), seed=1
        )
        queries = {f"q{i}": rng.normal(size=(3, 6)) for i in range(5)}
        corpus = {f"d{i:03d}": rng.normal(size=(4, 6)) for i in range(50)}
        run = exact_search(queries, corpus, head, top_k=10)

        for entry in run:
            scored = [
                (did, maxsim_score(head_forward(head, queries[entry.query_id]),
                                   head_forward(head, toks)))
                for did, toks in corpus.items()
            ]
            scored.sort(key=lambda p: (-p[1], p[0]))
            assert list(entry.ranking) == scored[:10]

    def test_corpus_insertion_order_irrelevant(self):
        rng = np.random.default_rng(53)
        head = self.linear_head()
        docs = [(f"d{i}", rng.normal(size=(3, 6))) for i in range(12)]
        queries = {"q": rng.normal(size=(2, 6))}
        forward = exact_search(queries, dict(docs), head, top_k=5)
        backward = exact_search(queries, dict(reversed(docs)), head, top_k=5)
        assert forward == backward

    def test_empty_corpus_rejected(self):
        with pytest.raises(ContractError, match="non-empty"):
            exact_search({"q": np.ones((1, 6))}, {}, self.linear_head(), top_k=1)


class TestNdcg:
    def test_perfect_ranking(self):
        run = [RunEntry("q", (("rel", 2.0), ("junk", 1.0)))]
        assert ndcg_at_k(run, {"q": {"rel": 1}}).mean == 1.0

    def test_relevant_at_rank_two(self):
        run = [RunEntry("q", (("junk", 2.0), ("rel", 1.0)))]
        result = ndcg_at_k(run, {"q": {"rel": 1}})
        assert result.mean == pytest.approx(1.0 / math.log2(3.0), abs=1e-9)

    def test_nothing_relevant_retrieved(self):
        run = [RunEntry("q", (("a", 2.0), ("b", 1.0)))]
        assert ndcg_at_k(run, {"q": {"missing": 1}}).mean == 0.0

    def test_unjudged_query_skipped_with_count(self):
        run = [RunEntry("known", (("d", 1.0),)), RunEntry("mystery", (("d", 1.0),))]
        result = ndcg_at_k(run, {"known": {"d": 1}})
        assert result.skipped_unjudged == 1
        assert result.mean == 1.0

    def test_query_without_relevant_docs_excluded_from_mean(self):
        run = [RunEntry("a", (("d", 1.0),)), RunEntry("b", (("d", 1.0),))]
        qrels = {"a": {"d": 1}, "b": {"d": 0}}
        result = ndcg_at_k(run, qrels)
        assert result.skipped_no_relevant == 1
        assert result.per_query == {"a": 1.0}

    def test_graded_gain_is_exponential(self):
        # One rel=2 doc at rank 1, rel=1 at rank 2: DCG = 3 + 1/log2(3).
        run = [RunEntry("q", (("hi", 2.0), ("lo", 1.0)))]
        qrels = {"q": {"hi": 2, "lo": 1}}
        assert ndcg_at_k(run, qrels).mean == 1.0  # that *is* the ideal order
        flipped = [RunEntry("q", (("lo", 2.0), ("hi", 1.0)))]
        dcg = 1.0 + 3.0 / math.log2(3.0)
        idcg = 3.0 + 1.0 / math.log2(3.0)
        assert ndcg_at_k(flipped, qrels).mean == pytest.approx(dcg / idcg, abs=1e-12)

    def test_invariant_to_monotone_score_transforms(self):
        rng = np.random.default_rng(54)
        docs = [f"d{i}" for i in range(20)]
        scores = sorted(rng.uniform(1, 2, 20), reverse=True)
        qrels = {"q": {d: int(rng.integers(0, 3)) for d in docs}}
        runs = [
            [RunEntry("q", tuple(zip(docs, transform)))]
            for transform in (scores, [s * 100 for s in scores], [math.exp(s) for s in scores])
        ]
        values = {ndcg_at_k(r, qrels).mean for r in runs}
        assert len(values) == 1

    def test_bounded_in_unit_interval(self):
        rng = np.random.default_rng(55)
        for _ in range(50):
            docs = [f"d{i}" for i in range(10)]
            rng.shuffle(docs)
            run = [RunEntry("q", tuple((d, float(10 - i)) for i, d in enumerate(docs)))]
            qrels = {"q": {d: int(rng.integers(0, 4)) for d in docs[:6]}}
            result = ndcg_at_k(run, qrels)
            if result.mean is not None:
                assert 0.0 <= result.mean <= 1.0


class TestAggregateSeeds:
    def test_constant_list(self):
        agg = aggregate_seeds([0.5, 0.5, 0.5])
        assert (agg.mean, agg.std) == (0.5, 0.0)

    def test_two_values_hand_formula(self):
        agg = aggregate_seeds([0.4, 0.6])
        assert agg.mean == pytest.approx(0.5)
        assert agg.std == pytest.approx(math.sqrt(0.02), abs=1e-12)

    def test_single_value_has_no_std(self):
        agg = aggregate_seeds([0.7])
        assert agg.mean == 0.7
        assert agg.std is None

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            aggregate_seeds([])


class TestPairedTTest:
    def test_equal_samples_give_t0_p1(self):
        result = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert (result.statistic, result.p_value) == (0.0, 1.0)

    def test_constant_nonzero_differences_floored(self):
        result = paired_t_test([2.0, 3.0, 4.0, 5.0, 6.0], [1.0, 2.0, 3.0, 4.0, 5.0])
        assert result.floored
        assert result.statistic == math.inf
        assert result.p_display() == "<1e-12"

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(56)
        for _ in range(20):
            n = int(rng.integers(3, 15))
            a = rng.normal(size=n)
            b = rng.normal(size=n)
            mine = paired_t_test(list(a), list(b))
            ref = stats.ttest_rel(a, b)
            assert mine.statistic == pytest.approx(ref.statistic, abs=1e-10)
            assert mine.p_value == pytest.approx(ref.pvalue, abs=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            paired_t_test([1.0, 2.0], [1.0])

    def test_incomplete_beta_against_reference(self):
        from scipy.special import betainc

        rng = np.random.default_rng(57)
        for _ in range(200):
            a = float(rng.uniform(0.5, 20))
            b = float(rng.uniform(0.5, 20))
            x = float(rng.uniform(0, 1))
            assert regularized_incomplete_beta(a, b, x) == pytest.approx(
                betainc(a, b, x), abs=1e-10
            )


class TestTrecIO:
    def test_qrels_round_trip(self, tmp_path):
        qrels = {"q1": {"d1": 2, "d2": 0}, "q2": {"d1": 1}}
        path = tmp_path / "qrels.txt"
        write_qrels(path, qrels)
        assert load_qrels(path) == qrels

    def test_qrels_duplicate_rejected(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d1 1\nq1 0 d1 2\n")
        with pytest.raises(FormatError, match="duplicate"):
            load_qrels(path)

    def test_qrels_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 d1 1\nq1 d1 1\n")
        with pytest.raises(FormatError, match=":2:"):
            load_qrels(path)

    def test_run_round_trip_and_format(self, tmp_path):
        run = [
            RunEntry("q1", (("d2", 1.5), ("d1", 0.25))),
            RunEntry("q2", (("d9", 3.125),)),
        ]
        path = tmp_path / "run.txt"
        write_run(path, run, tag="trial")
        lines = path.read_text().splitlines()
        assert lines[0] == "q1 Q0 d2 1 1.500000 trial"
        loaded = load_run(path)
        assert [e.query_id for e in loaded] == ["q1", "q2"]
        assert loaded[0].ranking[0] == ("d2", 1.5)

    def test_run_rank_gap_rejected(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text("q1 Q0 d1 1 1.0 t\nq1 Q0 d2 3 0.5 t\n")
        with pytest.raises(FormatError, match="contiguous"):
            load_run(path)


def test_metrics_report_structure():
    run = [RunEntry("q", (("rel", 2.0),))]
    result = ndcg_at_k(run, {"q": {"rel": 1}})
    agg = aggregate_seeds([0.5, 0.6])
    test = paired_t_test([0.5, 0.6], [0.4, 0.5])
    report = metrics_report(result, 10, seed_aggregate=agg, t_test=test, metadata={"x": 1})
    assert report["metric"] == "ndcg@10"
    assert report["mean"] == 1.0
    assert report["seed_aggregate"]["count"] == 2
    assert "p_value" in report["paired_t_test"]
    assert report["metadata"] == {"x": 1}
