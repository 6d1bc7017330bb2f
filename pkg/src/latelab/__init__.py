"""Desk-scale laboratory for late-interaction multi-vector retrieval.

The pieces: a minimal reverse-mode autodiff engine (:mod:`latelab.autodiff`),
configurable projection heads (:mod:`latelab.heads`), the MaxSim operator and
its winner-takes-all gradient (:mod:`latelab.maxsim`), KL-distillation
training (:mod:`latelab.training`), exact retrieval evaluation
(:mod:`latelab.evaluation`), algebraic/spectral diagnostics
(:mod:`latelab.diagnostics`), a planted-structure dataset generator
(:mod:`latelab.synthdata`), and a CLI (:mod:`latelab.cli`).
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    LatelabError,
    NonFiniteError,
    ShapeError,
    TrainingError,
)
from .heads import HeadConfig, HeadParams, build_head, head_forward, parameter_count
from .maxsim import maxsim_grad, maxsim_score, score_batch, winners
from .training import TrainConfig, TrainingTuple, kl_div_loss, train_head
from .evaluation import exact_search, ndcg_at_k, paired_t_test
from .synthdata import SynthConfig, generate_synthetic

__all__ = [
    "__version__",
    "ConfigError",
    "ContractError",
    "FormatError",
    "LatelabError",
    "NonFiniteError",
    "ShapeError",
    "TrainingError",
    "HeadConfig",
    "HeadParams",
    "build_head",
    "head_forward",
    "parameter_count",
    "maxsim_grad",
    "maxsim_score",
    "score_batch",
    "winners",
    "TrainConfig",
    "TrainingTuple",
    "kl_div_loss",
    "train_head",
    "exact_search",
    "ndcg_at_k",
    "paired_t_test",
    "SynthConfig",
    "generate_synthetic",
]
