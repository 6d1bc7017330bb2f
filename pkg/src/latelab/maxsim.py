"""Late-interaction MaxSim scoring and its winner-takes-all gradient.

The relevance of a document to a query is the sum, over query tokens, of the
highest cosine similarity against any document token.  Only those winning
token pairs carry gradient: the closed forms below reproduce exactly what
reverse-mode differentiation of the score computes.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

UNIT_NORM_TOL = 1e-9


def validate_tokens(matrix, name: str = "token matrix") -> np.ndarray:
    """Check a token matrix: 2-D, non-empty, rows unit-normalized within 1e-9."""
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractError(f"{name} must be non-empty, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    worst = float(np.max(np.abs(norms - 1.0)))
    if worst > UNIT_NORM_TOL:
        raise ContractError(
            f"{name} rows must be unit-normalized (max deviation {worst:.3e})"
        )
    return arr


def _validated_pair(query_tokens, doc_tokens) -> tuple[np.ndarray, np.ndarray]:
    q = validate_tokens(query_tokens, "query tokens")
    d = validate_tokens(doc_tokens, "document tokens")
    if q.shape[1] != d.shape[1]:
        raise ContractError(
            f"dimension mismatch: query dim {q.shape[1]}, document dim {d.shape[1]}"
        )
    return q, d


def maxsim_score(query_tokens, doc_tokens) -> float:
    """Sum over query tokens of the maximum dot product with any document token."""
    q, d = _validated_pair(query_tokens, doc_tokens)
    sims = q @ d.T
    return float(np.sum(np.max(sims, axis=1)))


def winners(query_tokens, doc_tokens) -> np.ndarray:
    """Winning document-token index per query token; ties go to the lowest index."""
    q, d = _validated_pair(query_tokens, doc_tokens)
    sims = q @ d.T
    return np.argmax(sims, axis=1)


def maxsim_grad(query_tokens, doc_tokens) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form score gradients (dQ, dD).

    dQ row i is the winning document token for query token i; dD row j is the
    sum of the query tokens that chose j.  Rows of never-winning document
    tokens are exactly zero.
    """
    q, d = _validated_pair(query_tokens, doc_tokens)
    win = np.argmax(q @ d.T, axis=1)
    dq = d[win].copy()
    dd = np.zeros_like(d)
    np.add.at(dd, win, q)
    return dq, dd


def score_batch(query_tokens, docs) -> list[float]:
    """MaxSim against each candidate document, preserving input order."""
    q = validate_tokens(query_tokens, "query tokens")
    scores = []
    for index, doc in enumerate(docs):
        d = validate_tokens(doc, f"document tokens (candidate {index})")
        if d.shape[1] != q.shape[1]:
            raise ContractError(
                f"candidate {index}: dimension mismatch, "
                f"query dim {q.shape[1]}, document dim {d.shape[1]}"
            )
        scores.append(float(np.sum(np.max(q @ d.T, axis=1))))
    return scores
