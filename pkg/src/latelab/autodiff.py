"""Dense-matrix reverse-mode automatic differentiation.

A small define-by-run engine: operations on :class:`Tensor` values append
reverse closures to a :class:`Tape`, and :func:`backward` replays them in
exact reverse order of the forward pass, accumulating gradients additively
wherever a value is consumed more than once.  All values are 64-bit and all
operations are deterministic.

Tensors created through :func:`constant` carry no gradient storage; a graph
evaluated purely on constants (no tape anywhere) performs the same
arithmetic without recording, which is how the finite-difference oracle
re-evaluates loss functions cheaply.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, NonFiniteError, ShapeError

ACTIVATION_KINDS = ("identity", "relu", "gelu", "silu", "sigmoid")

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
NORM_EPS = 1e-12


def as_matrix(values) -> np.ndarray:
    """Coerce to a 2-D C-contiguous float64 array; 1-D input becomes a row."""
    if (
        type(values) is np.ndarray
        and values.ndim == 2
        and values.dtype == np.float64
        and values.flags.c_contiguous
    ):
        return values
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of ndim={arr.ndim}")
    return np.ascontiguousarray(arr)


class Tape:
    """Ordered record of one forward pass, replayed backwards for gradients.

    A tape is rebuilt for every forward pass and is confined to a single
    thread; values themselves are immutable once produced and may be shared.
    """

    __slots__ = ("_records",)

    def __init__(self) -> None:
        self._records: list[Callable[[], None]] = []

    def leaf(self, values) -> Tensor:
        """Register a gradient-tracked leaf (parameter or tracked input)."""
        return Tensor(as_matrix(values), tape=self, needs_grad=True)

    def record(self, closure: Callable[[], None]) -> None:
        self._records.append(closure)

    def __len__(self) -> int:
        return len(self._records)


class Tensor:
    """A 2-D float64 value, optionally tracked on a tape.

    ``grad`` is allocated (zero-initialized) for every tape-tracked tensor,
    so leaves never touched by the loss report an exactly-zero gradient.
    """

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value: np.ndarray, tape: Tape | None = None, needs_grad: bool = False):
        self.value = value
        self.tape = tape
        self.grad = np.zeros_like(value) if needs_grad else None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, taped={self.tape is not None})"


def constant(values) -> Tensor:
    """An untracked tensor: participates in arithmetic, receives no gradient."""
    return Tensor(as_matrix(values))


def _merged_tape(*operands: Tensor) -> Tape | None:
    tape = None
    for op in operands:
        if op.tape is None:
            continue
        if tape is None:
            tape = op.tape
        elif tape is not op.tape:
            raise ContractError("operands belong to different tapes")
    return tape


def _output(value: np.ndarray, *operands: Tensor) -> Tensor:
    tape = _merged_tape(*operands)
    if tape is not None and not np.all(np.isfinite(value)):
        raise NonFiniteError("operation produced non-finite values")
    return Tensor(value, tape=tape, needs_grad=tape is not None)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; reverse pass yields dA = g·Bᵀ and dB = Aᵀ·g."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    out = _output(a.value @ b.value, a, b)
    if out.tape is not None:
        av, bv = a.value, b.value

        def _back() -> None:
            g = out.grad
            if a.grad is not None:
                a.grad += g @ bv.T
            if b.grad is not None:
                b.grad += av.T @ g

        out.tape.record(_back)
    return out


def transpose(a: Tensor) -> Tensor:
    out = _output(np.ascontiguousarray(a.value.T), a)
    if out.tape is not None:

        def _back() -> None:
            if a.grad is not None:
                a.grad += out.grad.T

        out.tape.record(_back)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a single row broadcast over a's rows."""
    broadcast = b.shape == (1, a.cols) and a.rows != 1
    if not broadcast and a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    out = _output(a.value + b.value, a, b)
    if out.tape is not None:

        def _back() -> None:
            g = out.grad
            if a.grad is not None:
                a.grad += g
            if b.grad is not None:
                b.grad += g.sum(axis=0, keepdims=True) if broadcast else g

        out.tape.record(_back)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of same-shape matrices."""
    if a.shape != b.shape:
        raise ShapeError(f"elementwise mul: shapes differ, {a.shape} vs {b.shape}")
    out = _output(a.value * b.value, a, b)
    if out.tape is not None:
        av, bv = a.value, b.value

        def _back() -> None:
            g = out.grad
            if a.grad is not None:
                a.grad += g * bv
            if b.grad is not None:
                b.grad += g * av

        out.tape.record(_back)
    return out


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a matrix by a learned 1x1 scalar tensor."""
    if s.shape != (1, 1):
        raise ShapeError(f"scale: multiplier must be 1x1, got {s.shape}")
    out = _output(s.value[0, 0] * a.value, a, s)
    if out.tape is not None:
        av = a.value
        sv = s.value[0, 0]

        def _back() -> None:
            g = out.grad
            if a.grad is not None:
                a.grad += sv * g
            if s.grad is not None:
                s.grad[0, 0] += float(np.sum(g * av))

        out.tape.record(_back)
    return out


def mul_const(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain Python constant (no gradient for the constant)."""
    out = _output(c * a.value, a)
    if out.tape is not None:

        def _back() -> None:
            if a.grad is not None:
                a.grad += c * out.grad

        out.tape.record(_back)
    return out


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def activation_value(v: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return v.copy()
    if kind == "relu":
        return np.maximum(v, 0.0)
    if kind == "gelu":
        # Exact Gaussian-CDF form, not the tanh approximation.
        return 0.5 * v * (1.0 + erf(v * _INV_SQRT2))
    if kind == "silu":
        return v * _sigmoid(v)
    if kind == "sigmoid":
        return _sigmoid(v)
    raise ConfigError(f"unknown activation kind: {kind!r}")


def activation_derivative(v: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(v)
    if kind == "relu":
        # Subgradient 0 at v == 0, matching the forward value there.
        return (v > 0.0).astype(np.float64)
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return cdf + v * pdf
    if kind == "silu":
        s = _sigmoid(v)
        return s * (1.0 + v * (1.0 - s))
    if kind == "sigmoid":
        s = _sigmoid(v)
        return s * (1.0 - s)
    raise ConfigError(f"unknown activation kind: {kind!r}")


def activation(a: Tensor, kind: str) -> Tensor:
    """Elementwise activation; the reverse pass uses the stored pre-activation."""
    out = _output(activation_value(a.value, kind), a)
    if out.tape is not None:
        pre = a.value

        def _back() -> None:
            if a.grad is not None:
                a.grad += out.grad * activation_derivative(pre, kind)

        out.tape.record(_back)
    return out


def row_l2_normalize(a: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Divide each row by max(row L2 norm, eps).

    Rows with norm below ``eps`` (e.g. all-zero padding tokens) are scaled by
    1/eps, which maps the zero row to itself instead of erroring.
    """
    if a.cols < 1:
        raise ShapeError("row_l2_normalize requires at least one column")
    norms = np.sqrt((a.value * a.value).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = _output(a.value / denom, a)
    if out.tape is not None:
        unclamped = norms > eps
        ov = out.value

        def _back() -> None:
            if a.grad is None:
                return
            g = out.grad
            inner = np.sum(g * ov, axis=1, keepdims=True)
            a.grad += np.where(unclamped, (g - ov * inner) / denom, g / eps)

        out.tape.record(_back)
    return out


def rowmax(a: Tensor) -> Tensor:
    """Per-row maximum as a column vector.

    Ties resolve to the lowest column index; the reverse pass routes the full
    gradient to that single winning entry per row (winner-takes-all).
    """
    if a.cols < 1:
        raise ShapeError("rowmax requires at least one column")
    idx = a.value.argmax(axis=1)
    rows = np.arange(a.rows)
    out = _output(a.value[rows, idx].reshape(-1, 1), a)
    if out.tape is not None:

        def _back() -> None:
            if a.grad is not None:
                a.grad[rows, idx] += out.grad[:, 0]

        out.tape.record(_back)
    return out


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    out = _output(np.array([[a.value.sum()]]), a)
    if out.tape is not None:

        def _back() -> None:
            if a.grad is not None:
                a.grad += out.grad[0, 0]

        out.tape.record(_back)
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice [start, stop); gradients scatter back additively."""
    if not (0 <= start < stop <= a.rows):
        raise ShapeError(f"slice_rows[{start}:{stop}] out of range for {a.rows} rows")
    out = _output(a.value[start:stop].copy(), a)
    if out.tape is not None:

        def _back() -> None:
            if a.grad is not None:
                a.grad[start:stop] += out.grad

        out.tape.record(_back)
    return out


def hstack_scalars(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1x1 tensors into a single row."""
    if not parts:
        raise ContractError("hstack_scalars requires at least one tensor")
    for p in parts:
        if p.shape != (1, 1):
            raise ShapeError(f"hstack_scalars expects 1x1 tensors, got {p.shape}")
    out = _output(np.array([[p.value[0, 0] for p in parts]]), *parts)
    if out.tape is not None:

        def _back() -> None:
            for i, p in enumerate(parts):
                if p.grad is not None:
                    p.grad[0, 0] += out.grad[0, i]

        out.tape.record(_back)
    return out


def _log_softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max()
    return shifted - np.log(np.exp(shifted).sum())


def kl_from_scores(student: Tensor, teacher_scores: np.ndarray, reverse: bool = False) -> Tensor:
    """KL divergence between score rows as a 1x1 loss tensor.

    Default direction treats the teacher as the target distribution:
    KL(softmax(teacher) || softmax(student)).  ``reverse=True`` swaps the
    roles.  Teacher scores are data, never differentiated.
    """
    t = np.asarray(teacher_scores, dtype=np.float64).reshape(-1)
    if student.rows != 1:
        raise ShapeError(f"student scores must be a single row, got {student.shape}")
    if student.cols != t.size:
        raise ContractError(
            f"score length mismatch: student has {student.cols}, teacher has {t.size}"
        )
    if t.size < 2:
        raise ContractError("KL divergence needs at least two candidates")
    if not np.all(np.isfinite(t)):
        raise NonFiniteError("teacher scores contain non-finite values")

    s = student.value[0]
    log_p = _log_softmax(t)
    log_q = _log_softmax(s)
    p = np.exp(log_p)
    q = np.exp(log_q)
    if reverse:
        value = float(np.sum(q * (log_q - log_p)))
    else:
        value = float(np.sum(p * (log_p - log_q)))
    out = _output(np.array([[value]]), student)
    if out.tape is not None:

        def _back() -> None:
            if student.grad is None:
                return
            g = out.grad[0, 0]
            if reverse:
                diff = log_q - log_p
                student.grad[0] += g * q * (diff - np.sum(q * diff))
            else:
                student.grad[0] += g * (q - p)

        out.tape.record(_back)
    return out


def backward(loss: Tensor) -> None:
    """Run the reverse pass from a scalar loss.

    Populates ``grad`` on every tape-tracked tensor; leaves the loss never
    touched keep their exactly-zero gradient.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward requires a 1x1 scalar loss, got {loss.shape}")
    if loss.tape is None or loss.grad is None:
        raise ContractError("loss is not attached to a tape")
    loss.grad[0, 0] = 1.0
    for closure in reversed(loss.tape._records):
        closure()


def finite_difference_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h·E) - f(x-h·E)) / 2h per entry."""
    if step <= 0:
        raise ContractError(f"finite difference step must be positive, got {step}")
    base = as_matrix(x).copy()
    grad = np.zeros_like(base)
    work = base.copy()
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            orig = work[i, j]
            work[i, j] = orig + step
            up = f(work)
            work[i, j] = orig - step
            down = f(work)
            work[i, j] = orig
            grad[i, j] = (up - down) / (2.0 * step)
    return grad
