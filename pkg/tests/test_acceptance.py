"""Acceptance suite: one test per exit criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
report.  The desk-scale training experiment (criterion 7) is shared with the
nuclear-norm criterion (5) through a module fixture, so the whole suite
trains each head family exactly once.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from latelab import autodiff as ad
from latelab.diagnostics import head_gradient_audit, nuclear_norm_bound_check, singular_spectrum
from latelab.evaluation import (
    RunEntry,
    exact_search,
    ndcg_at_k,
    paired_t_test,
)
from latelab.heads import HeadConfig, build_head, head_forward
from latelab.maxsim import maxsim_grad, maxsim_score, winners
from latelab.synthdata import SynthConfig, generate_synthetic
from latelab.training import TrainConfig, TrainingTuple, kl_div_loss, lr_at_step, train_head

SEEDS = [1, 42, 1337, 1789, 1861]


def report(criterion: int, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion} PASS: {detail}")


def unit_rows(rng, rows, dim):
    m = rng.normal(size=(rows, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# Criterion 7 experiment, shared with criterion 5.
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_experiment():
    started = time.monotonic()
    synth = SynthConfig(
        dim=32, vocab_size=256, query_tokens=8, doc_tokens=24, n_way=16,
        tuple_count=2000, planted_rank=4, sharpness=1.0, noise_sigma=0.0, seed=7,
    )
    dataset = generate_synthetic(synth)

    variant_cfg = HeadConfig(input_dim=32, output_dim=16, depth=2, rho=2.0, residual=True)
    baseline_cfg = HeadConfig(input_dim=32, output_dim=16, depth=1, bias=False)

    results = {"variant": [], "baseline": []}
    for role, cfg in (("variant", variant_cfg), ("baseline", baseline_cfg)):
        for seed in SEEDS:
            train_cfg = TrainConfig(
                total_steps=500, batch_size=16, peak_lr=1e-2, seed=seed
            )
            params, trace = train_head(cfg, train_cfg, dataset.tuples)
            run = exact_search(dataset.queries, dataset.corpus, params, top_k=10)
            ndcg = ndcg_at_k(run, dataset.qrels, k=10).mean
            results[role].append(
                {"seed": seed, "params": params, "final_loss": trace.losses[-1], "ndcg": ndcg}
            )
    return {
        "results": results,
        "elapsed": time.monotonic() - started,
        "dataset": dataset,
    }


# --------------------------------------------------------------------------
# 1. Gradient-sparsity law of the MaxSim score.
# --------------------------------------------------------------------------


def test_criterion_1_gradient_sparsity_law():
    rng = np.random.default_rng(1001)
    started = time.monotonic()
    for _ in range(1000):
        m = int(rng.integers(1, 9))
        n = int(rng.integers(2, 33))
        dim = int(rng.integers(2, 12))
        q = unit_rows(rng, m, dim)
        d = unit_rows(rng, n, dim)
        win = winners(q, d)
        dq, dd = maxsim_grad(q, d)

        nonzero_rows = np.flatnonzero(np.any(dd != 0.0, axis=1))
        assert set(nonzero_rows.tolist()) == set(win.tolist())
        zero_rows = np.setdiff1d(np.arange(n), win)
        assert np.all(dd[zero_rows] == 0.0)  # bitwise zero
        assert np.max(np.abs(dq - d[win])) <= 1e-12
    elapsed = time.monotonic() - started
    assert elapsed < 5.0
    report(1, f"1000 random pairs obey winner-takes-all sparsity ({elapsed:.2f}s)")


# --------------------------------------------------------------------------
# 2. Full-pipeline gradient correctness across every head variant.
# --------------------------------------------------------------------------


def test_criterion_2_gradient_correctness_all_variants():
    from latelab.diagnostics import fd_margins_ok

    rng = np.random.default_rng(1002)
    tuple_pool = [
        TrainingTuple(
            rng.uniform(-1, 1, size=(3, 16)),
            [rng.uniform(-1, 1, size=(4, 16)) for _ in range(4)],
            rng.uniform(-1, 1, size=4),
        )
        for _ in range(10)
    ]
    started = time.monotonic()
    worst = 0.0
    worst_desc = ""
    count = 0
    reseeds = 0
    for family in ("ffn", "glu"):
        for depth in (1, 2, 3, 4):
            for rho in (1.0, 2.0):
                for residual in (False, True):
                    for kind in ad.ACTIVATION_KINDS:
                        cfg = HeadConfig(
                            input_dim=16, output_dim=8, depth=depth, family=family,
                            activation=kind if family == "ffn" else "identity",
                            gate=kind if family == "glu" else "sigmoid",
                            rho=rho, residual=residual,
                        )
                        # Central differences misreport near relu kinks and
                        # argmax ties, so pick (deterministically) an instance
                        # with safe margins before trusting the oracle.
                        params = tup = None
                        for attempt in range(10):
                            candidate = build_head(cfg, seed=count + 100_000 * attempt)
                            if fd_margins_ok(candidate, tuple_pool[attempt]):
                                params = candidate
                                tup = tuple_pool[attempt]
                                reseeds += attempt
                                break
                        assert params is not None, f"no safe instance for {cfg}"
                        count += 1
                        audit = head_gradient_audit(params, tup)
                        assert audit.max_param_rel_err <= 1e-4, (
                            f"{family} depth={depth} rho={rho} residual={residual} "
                            f"{kind}: rel err {audit.max_param_rel_err:.2e}"
                        )
                        if audit.max_param_rel_err > worst:
                            worst = audit.max_param_rel_err
                            worst_desc = f"{family} d{depth} rho{rho} res={residual} {kind}"
    elapsed = time.monotonic() - started
    assert elapsed < 120.0
    report(
        2,
        f"{count} head variants match finite differences; worst rel err "
        f"{worst:.2e} ({worst_desc}); {reseeds} kink-adjacent instances reseeded; "
        f"{elapsed:.0f}s",
    )


# --------------------------------------------------------------------------
# 3. Exhaustive search equals the naive double-loop oracle.
# --------------------------------------------------------------------------


def test_criterion_3_exact_search_oracle_equivalence():
    synth = SynthConfig(
        dim=16, vocab_size=96, query_tokens=6, doc_tokens=12, n_way=16,
        tuple_count=300, planted_rank=4, seed=33,
    )
    dataset = generate_synthetic(synth)
    queries = dict(list(dataset.queries.items())[:5])
    corpus = dict(list(dataset.corpus.items())[:200])
    assert len(queries) == 5 and len(corpus) == 200

    heads = {
        "linear": build_head(HeadConfig(input_dim=16, output_dim=8, bias=False), seed=1),
        "glu_residual": build_head(
            HeadConfig(
                input_dim=16, output_dim=8, depth=2, family="glu", rho=2.0, residual=True
            ),
            seed=2,
        ),
    }
    started = time.monotonic()
    for name, head in heads.items():
        run = exact_search(queries, corpus, head, top_k=10)
        for entry in run:
            q_proj = head_forward(head, queries[entry.query_id])
            scored = [
                (did, maxsim_score(q_proj, head_forward(head, toks)))
                for did, toks in corpus.items()
            ]
            scored.sort(key=lambda p: (-p[1], p[0]))
            assert list(entry.ranking) == scored[:10], f"{name}: ranked lists differ"
    elapsed = time.monotonic() - started
    assert elapsed < 30.0
    report(3, f"search equals the double-loop oracle for both heads ({elapsed:.1f}s)")


# --------------------------------------------------------------------------
# 4. Algebraic identities at 1e-10 on 100 random instances each.
# --------------------------------------------------------------------------


def test_criterion_4_algebraic_identities():
    from latelab.diagnostics import (
        glu_bilinear_check,
        metric_matrix,
        residual_metric_decomposition_check,
    )

    rng = np.random.default_rng(1004)

    for _ in range(100):
        dim = int(rng.integers(2, 10))
        w = rng.uniform(-1, 1, (dim, dim))
        assert residual_metric_decomposition_check(w, float(rng.uniform(-2, 2))) <= 1e-10

    for i in range(100):
        d, k = int(rng.integers(2, 9)), int(rng.integers(1, 6))
        head = build_head(
            HeadConfig(input_dim=d, output_dim=k, family="glu", gate="identity", bias=False),
            seed=i,
        )
        assert glu_bilinear_check(head, rng.uniform(-1, 1, (1, d))) <= 1e-10

    for i in range(100):
        d, k = int(rng.integers(2, 10)), int(rng.integers(1, 8))
        head = build_head(HeadConfig(input_dim=d, output_dim=k, bias=False), seed=i)
        head.tensors["w0"] = rng.uniform(-1, 1, (d, k))
        metric = metric_matrix(head)
        assert abs(metric.allocation_sum - metric.trace) <= 1e-10

    for _ in range(100):
        w = rng.normal(size=(int(rng.integers(1, 16)), int(rng.integers(1, 16))))
        sigma = singular_spectrum(w)
        assert abs(float(np.sum(sigma**2)) - float(np.linalg.norm(w)) ** 2) <= 1e-10

    report(4, "residual expansion, GLU bilinear form, trace identity, and "
              "SVD Parseval all hold at 1e-10 on 100 instances each")


# --------------------------------------------------------------------------
# 5. Nuclear-norm inequality chain on checkpoints and random factors.
# --------------------------------------------------------------------------


def test_criterion_5_nuclear_norm_chain(desk_experiment):
    floor = -1e-8
    checked = 0
    for role in ("variant", "baseline"):
        for row in desk_experiment["results"][role]:
            params = row["params"]
            names = [
                n for n, _, _ in params.config.tensor_shapes()
                if n.startswith("w") and not n.startswith(("wv", "wg"))
            ]
            for first, second in zip(names, names[1:]):
                result = nuclear_norm_bound_check(
                    params.tensors[first], params.tensors[second]
                )
                assert result.slack_product >= floor
                assert result.slack_am_gm >= floor
                checked += 1

    rng = np.random.default_rng(1005)
    for _ in range(1000):
        inner = int(rng.integers(1, 24))
        a = rng.normal(size=(int(rng.integers(1, 24)), inner)) * rng.uniform(0.1, 3)
        b = rng.normal(size=(inner, int(rng.integers(1, 24)))) * rng.uniform(0.1, 3)
        result = nuclear_norm_bound_check(a, b)
        assert result.slack_product >= floor
        assert result.slack_am_gm >= floor
    report(
        5,
        f"inequality chain holds on {checked} trained factor pairs "
        f"and 1000 random pairs (slack >= -1e-8)",
    )


# --------------------------------------------------------------------------
# 6. Metric reference values and significance against a reference oracle.
# --------------------------------------------------------------------------


def test_criterion_6_metric_reference_values():
    perfect = [RunEntry("q", (("rel", 2.0), ("junk", 1.0)))]
    assert ndcg_at_k(perfect, {"q": {"rel": 1}}).mean == 1.0

    second = [RunEntry("q", (("junk", 2.0), ("rel", 1.0)))]
    value = ndcg_at_k(second, {"q": {"rel": 1}}).mean
    assert abs(value - 1.0 / math.log2(3.0)) <= 1e-9

    rng = np.random.default_rng(1006)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(3, 20))
        a = rng.normal(size=n)
        b = rng.normal(size=n)
        mine = paired_t_test(list(a), list(b))
        ref = stats.ttest_rel(a, b)
        worst = max(worst, abs(mine.p_value - float(ref.pvalue)))
        assert abs(mine.p_value - float(ref.pvalue)) <= 1e-6
    report(6, f"NDCG anchors exact; t-test p within {worst:.1e} of the reference")


# --------------------------------------------------------------------------
# 7. Directional desk-scale experiment.
# --------------------------------------------------------------------------


def test_criterion_7_desk_scale_experiment(desk_experiment):
    results = desk_experiment["results"]
    variant_losses = [r["final_loss"] for r in results["variant"]]
    baseline_losses = [r["final_loss"] for r in results["baseline"]]
    variant_ndcg = [r["ndcg"] for r in results["variant"]]
    baseline_ndcg = [r["ndcg"] for r in results["baseline"]]

    mean_vl = float(np.mean(variant_losses))
    mean_bl = float(np.mean(baseline_losses))
    mean_vn = float(np.mean(variant_ndcg))
    mean_bn = float(np.mean(baseline_ndcg))

    assert mean_vl < mean_bl, f"variant KL {mean_vl:.5f} not below baseline {mean_bl:.5f}"
    assert mean_vn >= mean_bn - 0.005, (
        f"variant ndcg {mean_vn:.4f} below baseline {mean_bn:.4f} - 0.005"
    )
    assert desk_experiment["elapsed"] < 900.0
    report(
        7,
        f"five seeds: KL {mean_vl:.5f} < {mean_bl:.5f}; "
        f"ndcg {mean_vn:.4f} vs {mean_bn:.4f} (delta {mean_vn - mean_bn:+.4f}); "
        f"{desk_experiment['elapsed']:.0f}s",
    )


# --------------------------------------------------------------------------
# 8. Bitwise determinism of training and generation.
# --------------------------------------------------------------------------


def test_criterion_8_determinism(tmp_path):
    from latelab.cli import dispatch

    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text(
        "synth_dim = 16\nsynth_vocab_size = 64\nsynth_query_tokens = 4\n"
        "synth_doc_tokens = 8\nsynth_n_way = 4\nsynth_tuple_count = 48\n"
        "synth_planted_rank = 4\nhead_output_dim = 8\nhead_depth = 2\n"
        "head_rho = 2.0\nhead_residual = true\ntrain_total_steps = 8\n"
        "train_batch_size = 8\ntrain_peak_lr = 0.005\n"
    )
    data_a = tmp_path / "a" / "t.jsonl"
    data_b = tmp_path / "b" / "t.jsonl"
    for out in (data_a, data_b):
        assert dispatch(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert data_a.read_bytes() == data_b.read_bytes()

    head_a = tmp_path / "one.head"
    head_b = tmp_path / "two.head"
    for head in (head_a, head_b):
        assert dispatch(
            [
                "train", "--config", str(cfg_path), "--data", str(data_a),
                "--seed", "42", "--out", str(head),
            ]
        ) == 0
    assert head_a.read_bytes() == head_b.read_bytes()
    trace_a = head_a.with_suffix(".head.trace.tsv")
    trace_b = head_b.with_suffix(".head.trace.tsv")
    assert trace_a.read_bytes() == trace_b.read_bytes()
    report(8, "dataset bytes and trained head/trace bytes identical across reruns")


# --------------------------------------------------------------------------
# 9. Schedule anchors and loss unit checks.
# --------------------------------------------------------------------------


def test_criterion_9_schedule_and_loss_units():
    cfg = TrainConfig(total_steps=1000, peak_lr=1e-4, warmup_fraction=0.10)
    assert lr_at_step(50, cfg) == pytest.approx(0.5e-4, rel=1e-12)
    assert lr_at_step(100, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at_step(1000, cfg) == 0.0

    value = kl_div_loss([0.0, 1.0], [1.0, 0.0])
    assert abs(value - 0.4621) <= 1e-3

    teacher = [0.5, -1.0, 2.25]
    assert kl_div_loss([t + 16.0 for t in teacher], teacher) == 0.0
    report(9, f"warmup/decay anchors exact; KL(1,0 vs 0,1) = {value:.6f}; "
              "shift invariance exact")
