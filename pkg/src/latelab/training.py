"""KL-divergence distillation training of projection heads.

The backbone is frozen: raw token embeddings arrive as data, the head is the
only thing trained.  Each n-way tuple contributes the divergence between the
teacher's candidate-score distribution and the student's, where student
scores are MaxSim over head-projected tokens.  Optimization is
adaptive-moment with decoupled weight decay under a linear
warmup-then-decay schedule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, NonFiniteError, TrainingError
from .heads import HeadConfig, HeadParams, build_head, forward_graph, is_weight_matrix
from .rng import PortableRng

SHUFFLE_STREAM = 1  # substream id separating shuffling from weight init

KL_DIRECTIONS = ("teacher||student", "student||teacher")


@dataclass(frozen=True)
class TrainingTuple:
    """One query, its n-way candidate documents, and the teacher's scores.

    Token matrices are raw backbone-space embeddings (dimension d), not yet
    projected or normalized.
    """

    query: np.ndarray
    docs: tuple[np.ndarray, ...]
    teacher_scores: np.ndarray

    def __init__(self, query, docs, teacher_scores):
        object.__setattr__(self, "query", ad.as_matrix(query))
        object.__setattr__(self, "docs", tuple(ad.as_matrix(d) for d in docs))
        object.__setattr__(
            self, "teacher_scores", np.asarray(teacher_scores, dtype=np.float64).reshape(-1)
        )
        if len(self.docs) != self.teacher_scores.size:
            raise ContractError(
                f"{len(self.docs)} candidates but {self.teacher_scores.size} teacher scores"
            )
        if len(self.docs) < 2:
            raise ContractError("a training tuple needs at least two candidates")
        dim = self.query.shape[1]
        for i, d in enumerate(self.docs):
            if d.shape[1] != dim:
                raise ContractError(
                    f"candidate {i} has dim {d.shape[1]}, query has dim {dim}"
                )

    @property
    def dim(self) -> int:
        return self.query.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    """Training protocol knobs.

    The optimizer family (adaptive moments + decoupled decay), the KL
    direction, and the temperature are all explicit here rather than baked
    in, with the conventional defaults.
    """

    total_steps: int
    batch_size: int = 64
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.10
    weight_decay: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kl_direction: str = "teacher||student"
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.peak_lr < 0:
            raise ConfigError(f"peak_lr must be >= 0, got {self.peak_lr}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(
                f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}"
            )
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("moment decays must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(
                f"kl_direction must be one of {KL_DIRECTIONS}, got {self.kl_direction!r}"
            )
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_fraction * self.total_steps)


@dataclass
class LossTrace:
    """Per-step loss and learning-rate record of one training run."""

    losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    final_checksum: str = ""

    def __len__(self) -> int:
        return len(self.losses)


def kl_div_loss(student_scores, teacher_scores) -> float:
    """KL(softmax(teacher) || softmax(student)) over candidate score lists.

    Non-negative; exactly zero when the score vectors differ by a constant
    shift (softmax is shift-invariant).
    """
    s = np.asarray(student_scores, dtype=np.float64).reshape(-1)
    t = np.asarray(teacher_scores, dtype=np.float64).reshape(-1)
    if s.size != t.size:
        raise ContractError(f"score length mismatch: {s.size} vs {t.size}")
    if s.size < 2:
        raise ContractError("KL divergence needs at least two candidates")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise NonFiniteError("scores contain non-finite values")
    loss = ad.kl_from_scores(ad.constant(s.reshape(1, -1)), t)
    return float(loss.value[0, 0])


def lr_at_step(step: int, config: TrainConfig) -> float:
    """Linear 0 -> peak over the warmup steps, then linear peak -> 0."""
    if not 0 <= step <= config.total_steps:
        raise ContractError(
            f"step {step} outside [0, {config.total_steps}]"
        )
    warmup = config.warmup_steps
    if step < warmup:
        return config.peak_lr * step / warmup
    remaining = config.total_steps - warmup
    if remaining == 0:
        return config.peak_lr
    return config.peak_lr * (config.total_steps - step) / remaining


def optimizer_step(
    params: HeadParams,
    grads: dict[str, np.ndarray],
    state: dict,
    lr: float,
    config: TrainConfig,
) -> None:
    """One adaptive-moment update with decoupled weight decay, in place.

    Decay multiplies weight matrices by (1 - lr * weight_decay); biases and
    residual multipliers are never decayed.  ``state`` starts empty and is
    owned by the caller across steps.
    """
    if not state:
        state["step"] = 0
        state["m"] = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        state["v"] = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    state["step"] += 1
    t = state["step"]
    b1, b2 = config.beta1, config.beta2
    for name, w in params.tensors.items():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for parameter {name!r}")
        if g.shape != w.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter {name!r} {w.shape}"
            )
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        w -= lr * m_hat / (np.sqrt(v_hat) + config.eps)
        if config.weight_decay > 0 and is_weight_matrix(name):
            w -= lr * config.weight_decay * w


def tuple_loss_graph(
    config: HeadConfig,
    tensors: dict[str, ad.Tensor],
    tup: TrainingTuple,
    train_cfg: TrainConfig,
    tracked_input: ad.Tensor | None = None,
) -> ad.Tensor:
    """Loss graph for one tuple on whatever tape the tensors carry.

    All token matrices are stacked into one projection pass (the head acts
    row-wise) and sliced back apart for per-candidate MaxSim.  Pass an
    already-stacked leaf as ``tracked_input`` to obtain gradients with
    respect to the raw token embeddings (see :func:`stack_tuple_tokens`).
    """
    if tup.dim != config.input_dim:
        raise ContractError(
            f"tuple token dim {tup.dim} does not match head input dim {config.input_dim}"
        )
    x = tracked_input if tracked_input is not None else ad.constant(stack_tuple_tokens(tup))
    projected = forward_graph(config, tensors, x)
    m = tup.query.shape[0]
    query = ad.slice_rows(projected, 0, m)
    offset = m
    scores = []
    for doc in tup.docs:
        n = doc.shape[0]
        doc_proj = ad.slice_rows(projected, offset, offset + n)
        offset += n
        sims = ad.matmul(query, ad.transpose(doc_proj))
        scores.append(ad.sum_all(ad.rowmax(sims)))
    student = ad.hstack_scalars(scores)
    inv_t = 1.0 / train_cfg.temperature
    return ad.kl_from_scores(
        ad.mul_const(student, inv_t),
        tup.teacher_scores * inv_t,
        reverse=train_cfg.kl_direction == "student||teacher",
    )


def stack_tuple_tokens(tup: TrainingTuple) -> np.ndarray:
    """Query rows followed by each candidate's rows, in tuple order."""
    return np.vstack([tup.query, *tup.docs])


def tuple_loss_value(params: HeadParams, tup: TrainingTuple, train_cfg: TrainConfig) -> float:
    """Evaluate one tuple's loss without recording a tape."""
    tensors = {name: ad.constant(arr) for name, arr in params.tensors.items()}
    return float(tuple_loss_graph(params.config, tensors, tup, train_cfg).value[0, 0])


def student_scores(params: HeadParams, tup: TrainingTuple) -> np.ndarray:
    """Per-candidate MaxSim scores through the head, on the training code path."""
    tensors = {name: ad.constant(arr) for name, arr in params.tensors.items()}
    x = ad.constant(stack_tuple_tokens(tup))
    projected = forward_graph(params.config, tensors, x)
    m = tup.query.shape[0]
    query = ad.slice_rows(projected, 0, m)
    offset = m
    out = []
    for doc in tup.docs:
        n = doc.shape[0]
        doc_proj = ad.slice_rows(projected, offset, offset + n)
        offset += n
        sims = ad.matmul(query, ad.transpose(doc_proj))
        out.append(ad.sum_all(ad.rowmax(sims)).value[0, 0])
    return np.array(out)


def batch_loss_and_grads(
    params: HeadParams, batch: list[TrainingTuple], train_cfg: TrainConfig
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean tuple loss over a batch plus gradients for every head tensor."""
    tape = ad.Tape()
    tensors = {name: tape.leaf(arr) for name, arr in params.tensors.items()}
    losses = [tuple_loss_graph(params.config, tensors, tup, train_cfg) for tup in batch]
    mean = ad.mul_const(ad.sum_all(ad.hstack_scalars(losses)), 1.0 / len(batch))
    ad.backward(mean)
    grads = {name: tensors[name].grad for name in params.tensors}
    return float(mean.value[0, 0]), grads


def train_head(
    config: HeadConfig, train_cfg: TrainConfig, dataset: list[TrainingTuple]
) -> tuple[HeadParams, LossTrace]:
    """Run the full distillation loop; deterministic given configs and data.

    The tuple order is reshuffled every epoch from a seed-derived substream;
    incomplete trailing batches are dropped so every step averages the same
    number of tuples.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    if len(dataset) < train_cfg.batch_size:
        raise ContractError(
            f"dataset of {len(dataset)} tuples yields no full batch of {train_cfg.batch_size}"
        )
    for i, tup in enumerate(dataset):
        if tup.dim != config.input_dim:
            raise ContractError(
                f"tuple {i} has dim {tup.dim}, head expects {config.input_dim}"
            )

    params = build_head(config, train_cfg.seed)
    shuffle_rng = PortableRng(train_cfg.seed, stream=SHUFFLE_STREAM)
    order = list(range(len(dataset)))
    batches_per_epoch = len(dataset) // train_cfg.batch_size
    state: dict = {}
    trace = LossTrace()

    step = 0
    while step < train_cfg.total_steps:
        shuffle_rng.shuffle(order)
        for b in range(batches_per_epoch):
            if step >= train_cfg.total_steps:
                break
            picked = order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
            batch = [dataset[i] for i in picked]
            lr = lr_at_step(step, train_cfg)
            try:
                loss, grads = batch_loss_and_grads(params, batch, train_cfg)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at step {step}: {exc}", step=step) from exc
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}", step=step)
            optimizer_step(params, grads, state, lr, train_cfg)
            trace.losses.append(loss)
            trace.learning_rates.append(lr)
            step += 1

    trace.final_checksum = params.checksum()
    params.metadata = {
        "trained_steps": train_cfg.total_steps,
        "final_loss": trace.losses[-1],
        "train_seed": train_cfg.seed,
    }
    return params, trace


def write_trace(path, trace: LossTrace, metadata: dict | None = None) -> None:
    """Tab-separated trace: one line per step (index, lr, loss)."""
    with open(path, "w") as fh:
        if metadata:
            fh.write(f"# {json.dumps(metadata, sort_keys=True)}\n")
        fh.write(f"# final_checksum={trace.final_checksum}\n")
        for i, (lr, loss) in enumerate(zip(trace.learning_rates, trace.losses)):
            fh.write(f"{i}\t{lr!r}\t{loss!r}\n")
