"""Synthetic distillation datasets with planted cluster structure, plus IO.

The generator samples a token vocabulary whose vectors group into
``planted_rank`` semantic clusters around orthonormal directions.  Teacher
scores are MaxSim computed under a cluster-specific low-rank metric: the
query's cluster direction is damped before cosine, so the shared cluster
component stops dominating and within-cluster token identity decides the
score.  Scores are scaled by ``sharpness`` and perturbed by Gaussian noise.
Each cluster damps a different direction, so no single global linear map
reproduces every cluster's metric exactly, and the training signal stays
non-trivial even at desk scale.

Every draw comes from the portable generator in a fixed order, making the
dataset bytes a pure function of the seed.

File formats are line-delimited JSON; an optional leading ``{"_meta": ...}``
line carries provenance and is skipped by the loaders.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .evaluation import DOC_TOKEN_CAP, QUERY_TOKEN_CAP, Qrels
from .rng import PortableRng
from .training import TrainingTuple

log = logging.getLogger(__name__)

_TOKEN_SPREAD = 0.35  # in-cluster scatter around the cluster direction
_METRIC_DAMP = 0.75  # fraction of the cluster direction removed by the teacher
_RESAMPLE_LIMIT = 32


@dataclass(frozen=True)
class SynthConfig:
    """Shape and difficulty of one synthetic dataset."""

    dim: int
    vocab_size: int
    query_tokens: int
    doc_tokens: int
    tuple_count: int
    planted_rank: int
    n_way: int = 16
    sharpness: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        if not 2 <= self.planted_rank < self.dim:
            raise ConfigError(
                f"planted_rank must satisfy 2 <= r < dim, got r={self.planted_rank}, "
                f"dim={self.dim}"
            )
        if not 1 <= self.query_tokens <= QUERY_TOKEN_CAP:
            raise ConfigError(
                f"query_tokens must be in [1, {QUERY_TOKEN_CAP}], got {self.query_tokens}"
            )
        if not 1 <= self.doc_tokens <= DOC_TOKEN_CAP:
            raise ConfigError(
                f"doc_tokens must be in [1, {DOC_TOKEN_CAP}], got {self.doc_tokens}"
            )
        if self.n_way < 2:
            raise ConfigError(f"n_way must be >= 2, got {self.n_way}")
        if self.tuple_count < 1:
            raise ConfigError(f"tuple_count must be >= 1, got {self.tuple_count}")
        if self.sharpness <= 0:
            raise ConfigError(f"sharpness must be positive, got {self.sharpness}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        # Each cluster pool must cover a query plus at least one fresh token.
        smallest_pool = self.vocab_size // self.planted_rank
        if smallest_pool < self.query_tokens + 2:
            raise ConfigError(
                f"vocab_size {self.vocab_size} leaves cluster pools of "
                f"{smallest_pool} tokens; need at least {self.query_tokens + 2}"
            )

    @property
    def eval_query_count(self) -> int:
        return min(100, max(5, self.tuple_count // 20))


@dataclass
class SynthDataset:
    """Training tuples plus a held-out retrieval set from the same generator."""

    config: SynthConfig
    tuples: list[TrainingTuple]
    queries: dict[str, np.ndarray]
    corpus: dict[str, np.ndarray]
    qrels: Qrels


def _orthonormal_directions(rng: PortableRng, count: int, dim: int) -> np.ndarray:
    """Gram-Schmidt on portable-rng normal draws."""
    basis = np.zeros((count, dim))
    filled = 0
    while filled < count:
        v = np.array([rng.normal() for _ in range(dim)])
        for i in range(filled):
            v -= (basis[i] @ v) * basis[i]
        norm = float(np.linalg.norm(v))
        if norm < 1e-6:
            continue
        basis[filled] = v / norm
        filled += 1
    return basis


class _PlantedWorld:
    """Vocabulary, cluster pools, and the cluster-specific teacher metric."""

    def __init__(self, cfg: SynthConfig, rng: PortableRng):
        self.cfg = cfg
        centers = _orthonormal_directions(rng, cfg.planted_rank, cfg.dim)
        self.clusters = np.arange(cfg.vocab_size) % cfg.planted_rank
        vocab = np.zeros((cfg.vocab_size, cfg.dim))
        for t in range(cfg.vocab_size):
            noise = np.array([rng.normal() for _ in range(cfg.dim)])
            v = centers[self.clusters[t]] + _TOKEN_SPREAD * noise
            vocab[t] = v / np.linalg.norm(v)
        self.vocab = vocab
        self.pools = [
            np.where(self.clusters == c)[0].tolist() for c in range(cfg.planted_rank)
        ]
        # Teacher view per cluster: damp the cluster direction, renormalize.
        self.teacher_view = np.zeros((cfg.planted_rank, cfg.vocab_size, cfg.dim))
        for c in range(cfg.planted_rank):
            damped = vocab - _METRIC_DAMP * np.outer(vocab @ centers[c], centers[c])
            self.teacher_view[c] = damped / np.linalg.norm(damped, axis=1, keepdims=True)

    def teacher_maxsim(self, cluster: int, query_ids: list[int], doc_ids: list[int]) -> float:
        view = self.teacher_view[cluster]
        sims = view[query_ids] @ view[doc_ids].T
        return float(np.sum(np.max(sims, axis=1)))


def _sample_distinct(rng: PortableRng, pool: list[int], k: int, exclude: set[int]) -> list[int]:
    available = [t for t in pool if t not in exclude]
    if len(available) < k:
        raise ConfigError(
            f"cluster pool exhausted: need {k} fresh tokens, have {len(available)}"
        )
    picked = []
    remaining = list(available)
    for _ in range(k):
        idx = rng.randint(len(remaining))
        picked.append(remaining.pop(idx))
    return picked


def _draw_off_cluster(rng: PortableRng, world: _PlantedWorld, cluster: int, k: int) -> list[int]:
    others = [t for c, pool in enumerate(world.pools) if c != cluster for t in pool]
    return [others[rng.randint(len(others))] for _ in range(k)]


def _build_tuple_ids(
    rng: PortableRng, world: _PlantedWorld, cfg: SynthConfig
) -> tuple[int, list[int], list[list[int]]]:
    """Token ids for one tuple: (cluster, query, [positive, negatives...])."""
    cluster = rng.randint(cfg.planted_rank)
    query_ids = _sample_distinct(rng, world.pools[cluster], cfg.query_tokens, set())
    query_set = set(query_ids)

    n = cfg.doc_tokens
    exact = math.ceil(cfg.query_tokens / 2)
    exact = min(exact, n)
    shared = [query_ids[rng.randint(cfg.query_tokens)] for _ in range(exact)]
    same_budget = min(
        max(0, n - exact),
        max(0, len(world.pools[cluster]) - cfg.query_tokens),
        cfg.query_tokens,
    )
    same = _sample_distinct(rng, world.pools[cluster], same_budget, query_set)
    filler = _draw_off_cluster(rng, world, cluster, n - exact - same_budget)
    positive = shared + same + filler

    docs = [positive]
    for _ in range(cfg.n_way - 1):
        overlap = 1 if rng.random() < 0.5 else 0
        near = _sample_distinct(rng, world.pools[cluster], overlap, query_set)
        rest = _draw_off_cluster(rng, world, cluster, n - overlap)
        docs.append(near + rest)

    # The planted positive must outrank every negative under the noise-free
    # teacher; resample offenders, falling back to fully off-cluster tokens.
    pos_score = world.teacher_maxsim(cluster, query_ids, positive)
    for i in range(1, len(docs)):
        attempts = 0
        while world.teacher_maxsim(cluster, query_ids, docs[i]) >= pos_score:
            docs[i] = _draw_off_cluster(rng, world, cluster, n)
            attempts += 1
            if attempts > _RESAMPLE_LIMIT:
                raise ConfigError(
                    "cannot plant a strictly best positive; the configuration "
                    "leaves no separation between clusters"
                )
    return cluster, query_ids, docs


def _ids_to_tuple(
    world: _PlantedWorld,
    cfg: SynthConfig,
    rng: PortableRng,
    cluster: int,
    query_ids: list[int],
    doc_ids: list[list[int]],
) -> TrainingTuple:
    scores = [
        cfg.sharpness * world.teacher_maxsim(cluster, query_ids, ids) for ids in doc_ids
    ]
    if cfg.noise_sigma > 0:
        scores = [s + cfg.noise_sigma * rng.normal() for s in scores]
    return TrainingTuple(
        query=world.vocab[query_ids],
        docs=[world.vocab[ids] for ids in doc_ids],
        teacher_scores=np.array(scores),
    )


def generate_synthetic(cfg: SynthConfig) -> SynthDataset:
    """Deterministically build training tuples and a held-out retrieval set."""
    rng = PortableRng(cfg.seed)
    world = _PlantedWorld(cfg, rng)

    tuples = []
    for _ in range(cfg.tuple_count):
        cluster, query_ids, doc_ids = _build_tuple_ids(rng, world, cfg)
        tuples.append(_ids_to_tuple(world, cfg, rng, cluster, query_ids, doc_ids))

    queries: dict[str, np.ndarray] = {}
    corpus: dict[str, np.ndarray] = {}
    qrels: Qrels = {}
    doc_counter = 0
    for q_index in range(cfg.eval_query_count):
        cluster, query_ids, doc_ids = _build_tuple_ids(rng, world, cfg)
        qid = f"q{q_index:04d}"
        queries[qid] = world.vocab[query_ids]
        qrels[qid] = {}
        for rank, ids in enumerate(doc_ids):
            did = f"d{doc_counter:05d}"
            doc_counter += 1
            corpus[did] = world.vocab[ids]
            if rank == 0:
                qrels[qid][did] = 1
    return SynthDataset(config=cfg, tuples=tuples, queries=queries, corpus=corpus, qrels=qrels)


def _meta_line(metadata: dict | None) -> str | None:
    if metadata is None:
        return None
    return json.dumps({"_meta": metadata}, sort_keys=True)


def write_tuples(path, tuples: list[TrainingTuple], metadata: dict | None = None) -> None:
    """One JSON object per line: query matrix, candidate matrices, teacher scores."""
    with open(path, "w") as fh:
        meta = _meta_line(metadata)
        if meta:
            fh.write(meta + "\n")
        for tup in tuples:
            record = {
                "query": tup.query.tolist(),
                "docs": [d.tolist() for d in tup.docs],
                "teacher_scores": tup.teacher_scores.tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def _iter_records(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise FormatError(f"{path}:{lineno}: expected a JSON object")
            if "_meta" in record:
                continue
            yield lineno, record


def load_tuples(path) -> list[TrainingTuple]:
    tuples: list[TrainingTuple] = []
    dim: int | None = None
    for lineno, record in _iter_records(path):
        for key in ("query", "docs", "teacher_scores"):
            if key not in record:
                raise FormatError(f"{path}:{lineno}: missing {key!r}")
        try:
            tup = TrainingTuple(record["query"], record["docs"], record["teacher_scores"])
        except Exception as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if dim is None:
            dim = tup.dim
        elif tup.dim != dim:
            raise FormatError(
                f"{path}:{lineno}: token dim {tup.dim} differs from first line's {dim}"
            )
        tuples.append(tup)
    return tuples


def write_token_collection(path, collection: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    with open(path, "w") as fh:
        meta = _meta_line(metadata)
        if meta:
            fh.write(meta + "\n")
        for item_id, tokens in collection.items():
            fh.write(json.dumps({"id": item_id, "tokens": np.asarray(tokens).tolist()}) + "\n")


def _load_collection(path, cap: int, what: str) -> tuple[dict[str, np.ndarray], int]:
    collection: dict[str, np.ndarray] = {}
    truncated = 0
    dim: int | None = None
    for lineno, record in _iter_records(path):
        for key in ("id", "tokens"):
            if key not in record:
                raise FormatError(f"{path}:{lineno}: missing {key!r}")
        item_id = str(record["id"])
        if item_id in collection:
            raise FormatError(f"{path}:{lineno}: duplicate id {item_id!r}")
        tokens = np.asarray(record["tokens"], dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise FormatError(f"{path}:{lineno}: tokens must be a non-empty matrix")
        if dim is None:
            dim = tokens.shape[1]
        elif tokens.shape[1] != dim:
            raise FormatError(
                f"{path}:{lineno}: token dim {tokens.shape[1]} differs from first line's {dim}"
            )
        if tokens.shape[0] > cap:
            tokens = tokens[:cap]
            truncated += 1
        collection[item_id] = tokens
    if not collection:
        log.warning("%s file %s is empty", what, path)
    if truncated:
        log.info("%s file %s: truncated %d entries to %d tokens", what, path, truncated, cap)
    return collection, truncated


def load_corpus(path) -> tuple[dict[str, np.ndarray], int]:
    """Documents capped at 300 tokens; returns (corpus, truncation count)."""
    return _load_collection(path, DOC_TOKEN_CAP, "corpus")


def load_queries(path) -> tuple[dict[str, np.ndarray], int]:
    """Queries capped at 32 tokens; returns (queries, truncation count)."""
    return _load_collection(path, QUERY_TOKEN_CAP, "queries")
