"""Dense linear algebra on 2-D float64 arrays.

A ``Matrix`` is just a 2-D ``np.ndarray``; vectors are 1-D arrays.
"""

from __future__ import annotations

import numpy as np

from leaklab.errors import NumericError, ShapeError

Matrix = np.ndarray


def as_matrix(x) -> Matrix:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.size == 0:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    return a


def check_finite(x: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a, b) -> Matrix:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return check_finite(a @ b, "matmul")


def outer(v, k) -> Matrix:
    v = np.asarray(v, dtype=np.float64).ravel()
    k = np.asarray(k, dtype=np.float64).ravel()
    if v.size == 0 or k.size == 0:
        raise ShapeError(f"outer product needs non-empty vectors, got {v.size} and {k.size}")
    return check_finite(np.outer(v, k), "outer")


def l2_norm(x) -> float:
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        raise ShapeError("l2_norm of an empty input")
    return float(np.sqrt(np.sum(a * a)))
