"""Command-line entry point for reproducible experiments.

Subcommands: gen-data, train, search, evaluate, diagnose, sweep.  Options
resolve as CLI > config file > defaults, and every output embeds the fully
resolved configuration (with per-key provenance) so a result can always be
traced back to the exact settings that produced it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from . import synthdata as sd
from .errors import ConfigError, LatelabError
from .diagnostics import run_diagnostics
from .heads import HeadConfig, load_head, save_head
from .training import TrainConfig, train_head, write_trace

# key -> (type tag, default, help); type tags: int, float, bool, str, tribool
SCHEMA: dict[str, tuple[str, object, str]] = {
    "head_input_dim": ("int", 0, "head input dim; 0 derives it from synth_dim"),
    "head_output_dim": ("int", 16, "head output dim k"),
    "head_depth": ("int", 1, "number of projection layers"),
    "head_family": ("str", "ffn", "ffn or glu"),
    "head_activation": ("str", "identity", "activation on non-final layers"),
    "head_gate": ("str", "sigmoid", "GLU gate nonlinearity"),
    "head_rho": ("float", 1.0, "intermediate dim scale m = round(rho*d)"),
    "head_residual": ("bool", False, "residual connections on non-final blocks"),
    "head_bias": ("tribool", None, "true/false/auto (family default)"),
    "head_alpha_init": ("float", 1.0, "initial residual multiplier"),
    "train_total_steps": ("int", 500, "optimizer steps"),
    "train_batch_size": ("int", 64, "tuples per step"),
    "train_peak_lr": ("float", 1e-4, "peak learning rate"),
    "train_warmup_fraction": ("float", 0.10, "fraction of steps spent warming up"),
    "train_weight_decay": ("float", 0.01, "decoupled weight decay"),
    "train_seed": ("int", 1, "seed for init and shuffling"),
    "train_beta1": ("float", 0.9, "first moment decay"),
    "train_beta2": ("float", 0.999, "second moment decay"),
    "train_eps": ("float", 1e-8, "optimizer epsilon"),
    "train_kl_direction": ("str", "teacher||student", "KL target convention"),
    "train_temperature": ("float", 1.0, "softmax temperature"),
    "synth_dim": ("int", 32, "token dimension d"),
    "synth_vocab_size": ("int", 256, "vocabulary size"),
    "synth_query_tokens": ("int", 8, "tokens per query (max 32)"),
    "synth_doc_tokens": ("int", 24, "tokens per document (max 300)"),
    "synth_n_way": ("int", 16, "candidates per tuple"),
    "synth_tuple_count": ("int", 2000, "training tuples"),
    "synth_planted_rank": ("int", 4, "semantic clusters r"),
    "synth_sharpness": ("float", 1.0, "teacher score scale"),
    "synth_noise_sigma": ("float", 0.0, "teacher score noise"),
    "synth_seed": ("int", 7, "dataset seed"),
    "eval_top_k": ("int", 10, "documents kept per query"),
    "eval_ndcg_k": ("int", 10, "NDCG cutoff"),
}


def _parse_value(key: str, text: str):
    kind = SCHEMA[key][0]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind == "tribool":
            if text.lower() in ("auto", "none"):
                return None
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"expected true/false/auto: {text!r}")
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def load_config_file(path) -> dict:
    """Flat key=value file; # starts a comment, unknown keys are errors."""
    values: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, text)
    return values


def resolve_config(file_values: dict, cli_values: dict) -> tuple[dict, dict]:
    """Merge defaults < file < CLI; returns (values, per-key provenance)."""
    resolved = {}
    provenance = {}
    for key, (_, default, _) in SCHEMA.items():
        if key in cli_values:
            resolved[key] = cli_values[key]
            provenance[key] = "cli"
        elif key in file_values:
            resolved[key] = file_values[key]
            provenance[key] = "file"
        else:
            resolved[key] = default
            provenance[key] = "default"
    return resolved, provenance


def head_config_from(resolved: dict, input_dim: int | None = None) -> HeadConfig:
    d = input_dim or resolved["head_input_dim"] or resolved["synth_dim"]
    return HeadConfig(
        input_dim=d,
        output_dim=resolved["head_output_dim"],
        depth=resolved["head_depth"],
        family=resolved["head_family"],
        activation=resolved["head_activation"],
        gate=resolved["head_gate"],
        rho=resolved["head_rho"],
        residual=resolved["head_residual"],
        bias=resolved["head_bias"],
        alpha_init=resolved["head_alpha_init"],
    )


def train_config_from(resolved: dict, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        total_steps=resolved["train_total_steps"],
        batch_size=resolved["train_batch_size"],
        peak_lr=resolved["train_peak_lr"],
        warmup_fraction=resolved["train_warmup_fraction"],
        weight_decay=resolved["train_weight_decay"],
        seed=resolved["train_seed"] if seed is None else seed,
        beta1=resolved["train_beta1"],
        beta2=resolved["train_beta2"],
        eps=resolved["train_eps"],
        kl_direction=resolved["train_kl_direction"],
        temperature=resolved["train_temperature"],
    )


def synth_config_from(resolved: dict) -> sd.SynthConfig:
    return sd.SynthConfig(
        dim=resolved["synth_dim"],
        vocab_size=resolved["synth_vocab_size"],
        query_tokens=resolved["synth_query_tokens"],
        doc_tokens=resolved["synth_doc_tokens"],
        n_way=resolved["synth_n_way"],
        tuple_count=resolved["synth_tuple_count"],
        planted_rank=resolved["synth_planted_rank"],
        sharpness=resolved["synth_sharpness"],
        noise_sigma=resolved["synth_noise_sigma"],
        seed=resolved["synth_seed"],
    )


def _metadata(resolved: dict, provenance: dict) -> dict:
    return {
        "tool": "latelab",
        "version": __version__,
        "config": resolved,
        "provenance": provenance,
    }


def _add_schema_overrides(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for key, (_, _, help_text) in SCHEMA.items():
        group.add_argument(f"--{key}", metavar="V", help=help_text)


def _collect_overrides(args: argparse.Namespace) -> dict:
    values = {}
    for key in SCHEMA:
        text = getattr(args, key, None)
        if text is not None:
            values[key] = _parse_value(key, text)
    return values


def _resolved_from_args(args: argparse.Namespace) -> tuple[dict, dict]:
    file_values = load_config_file(args.config) if args.config else {}
    return resolve_config(file_values, _collect_overrides(args))


def _derived_paths(tuples_path: Path) -> dict[str, Path]:
    stem = tuples_path.with_suffix("")
    return {
        "corpus": stem.with_name(stem.name + ".corpus.jsonl"),
        "queries": stem.with_name(stem.name + ".queries.jsonl"),
        "qrels": stem.with_name(stem.name + ".qrels.txt"),
        "meta": stem.with_name(stem.name + ".meta.json"),
    }


def cmd_gen_data(args: argparse.Namespace) -> int:
    resolved, provenance = _resolved_from_args(args)
    cfg = synth_config_from(resolved)
    dataset = sd.generate_synthetic(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = _metadata(resolved, provenance)
    sd.write_tuples(out, dataset.tuples, metadata=meta)
    side = _derived_paths(out)
    sd.write_token_collection(side["corpus"], dataset.corpus, metadata=meta)
    sd.write_token_collection(side["queries"], dataset.queries, metadata=meta)
    ev.write_qrels(side["qrels"], dataset.qrels)
    side["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(
        f"gen-data: {len(dataset.tuples)} tuples -> {out}; "
        f"{len(dataset.queries)} held-out queries, {len(dataset.corpus)} docs "
        f"-> {side['corpus'].name}, {side['queries'].name}, {side['qrels'].name}"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    resolved, provenance = _resolved_from_args(args)
    dataset = sd.load_tuples(args.data)
    if not dataset:
        raise ConfigError(f"no tuples in {args.data}")
    head_cfg = head_config_from(resolved, input_dim=dataset[0].dim)
    train_cfg = train_config_from(resolved, seed=args.seed)
    params, trace = train_head(head_cfg, train_cfg, dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    params.metadata.update(_metadata(resolved, provenance))
    save_head(out, params)
    trace_path = out.with_suffix(out.suffix + ".trace.tsv")
    write_trace(trace_path, trace, metadata=_metadata(resolved, provenance))
    print(
        f"train: seed {train_cfg.seed}, {len(trace)} steps, "
        f"final loss {trace.losses[-1]:.6f} -> {out}, {trace_path.name}"
    )
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    resolved, provenance = _resolved_from_args(args)
    head = load_head(args.head)
    corpus, _ = sd.load_corpus(args.corpus)
    queries, _ = sd.load_queries(args.queries)
    if not corpus:
        raise ConfigError(f"corpus {args.corpus} is empty")
    run = ev.exact_search(queries, corpus, head, top_k=resolved["eval_top_k"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tag = args.tag or f"latelab-{head.config.config_hash()[:8]}"
    ev.write_run(out, run, tag=tag)
    out.with_suffix(out.suffix + ".meta.json").write_text(
        json.dumps(_metadata(resolved, provenance), indent=2, sort_keys=True) + "\n"
    )
    print(f"search: {len(queries)} queries x {len(corpus)} docs -> {out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    resolved, provenance = _resolved_from_args(args)
    run = ev.load_run(args.run)
    qrels = ev.load_qrels(args.qrels)
    k = resolved["eval_ndcg_k"]
    result = ev.ndcg_at_k(run, qrels, k=k)
    report = ev.metrics_report(result, k, metadata=_metadata(resolved, provenance))
    if args.out:
        ev.write_metrics(args.out, report)
        print(f"evaluate: mean ndcg@{k} = {result.mean} -> {args.out}")
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    head = load_head(args.head)
    report = run_diagnostics(head, seed=args.seed)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"diagnose: {len(report.checks)} checks, all_passed={report.all_passed} -> {args.out}")
    else:
        print(text)
    return 0 if report.all_passed else 1


def _sweep_one(
    resolved: dict,
    head_cfg: HeadConfig,
    seed: int,
    dataset: list,
    queries: dict,
    corpus: dict,
    qrels: ev.Qrels,
    out_dir: Path,
    role: str,
) -> dict:
    train_cfg = train_config_from(resolved, seed=seed)
    params, trace = train_head(head_cfg, train_cfg, dataset)
    head_path = out_dir / "heads" / f"{role}_seed{seed}.head"
    head_path.parent.mkdir(parents=True, exist_ok=True)
    save_head(head_path, params)
    write_trace(head_path.with_suffix(".trace.tsv"), trace)
    run = ev.exact_search(queries, corpus, params, top_k=resolved["eval_top_k"])
    run_path = out_dir / "runs" / f"{role}_seed{seed}.run.txt"
    run_path.parent.mkdir(parents=True, exist_ok=True)
    ev.write_run(run_path, run, tag=f"{role}-s{seed}")
    ndcg = ev.ndcg_at_k(run, qrels, k=resolved["eval_ndcg_k"])
    return {
        "seed": seed,
        "role": role,
        "final_loss": trace.losses[-1],
        "ndcg_mean": ndcg.mean,
        "head_file": str(head_path),
    }


def cmd_sweep(args: argparse.Namespace) -> int:
    resolved, provenance = _resolved_from_args(args)
    seeds = sorted({int(s) for s in args.seeds.split(",") if s.strip()})
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.data:
        dataset = sd.load_tuples(args.data)
        corpus, _ = sd.load_corpus(args.corpus)
        queries, _ = sd.load_queries(args.queries)
        qrels = ev.load_qrels(args.qrels)
    else:
        synth = generate = sd.generate_synthetic(synth_config_from(resolved))
        dataset, queries, corpus, qrels = (
            generate.tuples,
            synth.queries,
            synth.corpus,
            synth.qrels,
        )

    input_dim = dataset[0].dim
    variant_cfg = head_config_from(resolved, input_dim=input_dim)
    baseline_cfg = HeadConfig(
        input_dim=input_dim,
        output_dim=variant_cfg.output_dim,
        depth=1,
        family="ffn",
        residual=False,
        bias=False,
    )

    rows = []
    failures = []
    for seed in seeds:
        for role, cfg in (("variant", variant_cfg), ("baseline", baseline_cfg)):
            try:
                rows.append(
                    _sweep_one(resolved, cfg, seed, dataset, queries, corpus, qrels, out_dir, role)
                )
            except LatelabError as exc:
                failures.append({"seed": seed, "role": role, "error": str(exc)})

    by_role: dict[str, list[dict]] = {"variant": [], "baseline": []}
    for row in rows:
        by_role[row["role"]].append(row)

    report: dict = {
        "metadata": _metadata(resolved, provenance),
        "seeds": seeds,
        "per_run": rows,
        "variant_config": variant_cfg.to_dict(),
        "baseline_config": baseline_cfg.to_dict(),
    }
    for role, role_rows in by_role.items():
        if role_rows:
            ndcgs = [r["ndcg_mean"] for r in role_rows]
            losses = [r["final_loss"] for r in role_rows]
            agg = ev.aggregate_seeds(ndcgs)
            report[role] = {
                "ndcg_mean": agg.mean,
                "ndcg_std": agg.std,
                "final_loss_mean": sum(losses) / len(losses),
            }
    variant_ndcgs = [r["ndcg_mean"] for r in by_role["variant"]]
    baseline_ndcgs = [r["ndcg_mean"] for r in by_role["baseline"]]
    if len(variant_ndcgs) >= 2 and len(variant_ndcgs) == len(baseline_ndcgs):
        test = ev.paired_t_test(variant_ndcgs, baseline_ndcgs)
        report["paired_t_test"] = {
            "statistic": None if not np.isfinite(test.statistic) else test.statistic,
            "p_value": test.p_display(),
            "dof": test.dof,
        }
        report["ndcg_delta"] = report["variant"]["ndcg_mean"] - report["baseline"]["ndcg_mean"]
    else:
        report["paired_t_test"] = "insufficient seeds"

    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if failures:
        (out_dir / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")

    print(f"sweep: {len(rows)} runs over seeds {seeds} -> {out_dir / 'report.json'}")
    for role in ("baseline", "variant"):
        if role in report:
            print(
                f"  {role:9s} ndcg@{resolved['eval_ndcg_k']} "
                f"{report[role]['ndcg_mean']:.4f} "
                f"(final loss {report[role]['final_loss_mean']:.6f})"
            )
    if isinstance(report["paired_t_test"], dict):
        print(f"  paired t-test p={report['paired_t_test']['p_value']}")
    if failures:
        print(f"  {len(failures)} runs failed; see failures.json", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latelab",
        description="Late-interaction retrieval laboratory: projection heads, "
        "MaxSim, distillation training, evaluation, and diagnostics.",
    )
    parser.add_argument("--version", action="version", version=f"latelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="tuples output path (.jsonl)")
    _add_schema_overrides(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a head on a tuple file")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="tuples file")
    p.add_argument("--out", required=True, help="head output path")
    p.add_argument("--seed", type=int, help="override train_seed")
    _add_schema_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="exact retrieval, TREC run output")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--head", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tag", help="run tag (default: head hash)")
    _add_schema_overrides(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="NDCG@k from a run file and qrels")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", help="metrics JSON output (default: stdout)")
    _add_schema_overrides(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="run the check suite on a head file")
    p.add_argument("--head", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed for random instances")
    p.add_argument("--out", help="report JSON output (default: stdout)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sweep", help="multi-seed variant vs baseline comparison")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seeds", required=True, help="comma-separated seed list")
    p.add_argument("--out", required=True, help="results directory")
    p.add_argument("--data", help="reuse an existing tuples file")
    p.add_argument("--corpus", help="held-out corpus (with --data)")
    p.add_argument("--queries", help="held-out queries (with --data)")
    p.add_argument("--qrels", help="held-out qrels (with --data)")
    _add_schema_overrides(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LatelabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
