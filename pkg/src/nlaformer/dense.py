"""Dense linear-algebra substrate.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64.
Every function here is pure: inputs are never modified and a fresh array is
returned.  Shapes are checked explicitly; nothing relies on implicit
broadcasting except where a leading batch axis is documented.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "as_matrix",
    "as_vector",
    "softmax_cols",
    "relu",
    "matmul",
    "transpose",
    "add",
    "sub",
    "scale",
    "frobenius_norm",
    "dot",
    "rank_one_bias",
    "make_rng",
    "child_seed",
]


class DimensionError(ValueError):
    """Raised when operand shapes are not conformable."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def as_vector(a, name: str = "vector") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def softmax_cols(z: np.ndarray) -> np.ndarray:
    """Column-wise softmax: every column (axis -2 summed) becomes a distribution.

    Works on a single ``(d, m)`` matrix or a batch ``(..., d, m)``.  The
    per-column maximum is subtracted first so any finite input is safe.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 2 or z.shape[-2] == 0 or z.shape[-1] == 0:
        raise DimensionError(f"softmax_cols needs a non-empty matrix, got shape {z.shape}")
    shifted = z - z.max(axis=-2, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-2, keepdims=True)


def relu(m: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(m, dtype=np.float64), 0.0)


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    return a @ b


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same(a, b, "add")
    return a + b


def sub(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same(a, b, "sub")
    return a - b


def scale(alpha: float, a) -> np.ndarray:
    return float(alpha) * np.asarray(a, dtype=np.float64)


def frobenius_norm(a) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(a, dtype=np.float64)))))


def dot(a, b) -> float:
    a, b = as_vector(a, "a"), as_vector(b, "b")
    _check_same(a, b, "dot")
    return float(a @ b)


def rank_one_bias(bias: np.ndarray, ncols: int) -> np.ndarray:
    """The explicit rank-one matrix ``b 1^T`` with ``ncols`` columns."""
    return np.multiply.outer(as_vector(bias, "bias"), np.ones(ncols))


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; equal seeds give equal streams everywhere."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def child_seed(seed: int, *path: int) -> int:
    """Deterministically derive an independent 63-bit seed from ``seed`` and a path."""
    ss = np.random.SeedSequence([int(seed), *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
