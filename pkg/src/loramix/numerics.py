"""Float64 numeric substrate: checked matmul, stable softmax, cosine, Adam.

These are the contract-carrying entry points. Hot loops elsewhere in the
package call numpy directly on arrays that have already been validated
here or at construction time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVectorError, ShapeError

Array = np.ndarray


def as_vector(v, name: str = "vector") -> Array:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got ndim={arr.ndim}")
    return arr


def as_matrix(m, name: str = "matrix") -> Array:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={arr.ndim}")
    return arr


def matmul(a, b) -> Array:
    """Matrix product with explicit shape and finiteness checks."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"inner dimensions disagree: ({a.shape[0]}x{a.shape[1]}) @ "
            f"({b.shape[0]}x{b.shape[1]})"
        )
    if not np.isfinite(a).all() or not np.isfinite(b).all():
        raise ValueError("matmul operands must be finite")
    return a @ b


def softmax(v) -> Array:
    """Stable softmax of a non-empty 1-D vector.

    The maximum entry is subtracted before exponentiation, so the result
    is invariant (to rounding) under adding a constant to every entry.
    """
    arr = as_vector(v, "softmax input")
    if arr.size == 0:
        raise ShapeError("softmax input must be non-empty")
    if not np.isfinite(arr).all():
        raise ValueError("softmax input must be finite")
    return _softmax_last(arr)


def softmax_rows(m: Array) -> Array:
    """Row-wise softmax. Rows may contain -inf (masked positions)."""
    return _softmax_last(m)


def _softmax_last(x: Array) -> Array:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two equal-length 1-D vectors in [-1, 1]."""
    u = as_vector(u, "first vector")
    v = as_vector(v, "second vector")
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass
class AdamState:
    """Per-tensor Adam accumulator with bias-corrected updates."""

    first_moment: Array
    second_moment: Array
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def for_param(cls, param: Array, lr: float = 1e-4, **kwargs) -> "AdamState":
        param = np.asarray(param, dtype=np.float64)
        return cls(
            first_moment=np.zeros_like(param),
            second_moment=np.zeros_like(param),
            lr=lr,
            **kwargs,
        )


def adam_step(params: Array, grads: Array, state: AdamState) -> Array:
    """One bias-corrected Adam update; mutates `state`, returns new params."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ShapeError(
            f"params {params.shape}, grads {grads.shape} and moments "
            f"{state.first_moment.shape} must share a shape"
        )
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    state.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * grads**2
    m_hat = state.first_moment / (1 - state.beta1**t)
    v_hat = state.second_moment / (1 - state.beta2**t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
