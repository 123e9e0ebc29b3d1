from __future__ import annotations

from typing import Callable

import numpy as np

from leaklab.errors import ArgumentError, NumericError


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x,
    eps: float = 1e-5,
) -> float:
    """Compare an analytic gradient against central differences.

    ``f`` returns ``(value, gradient)``. The result is the max over coordinates
    of ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ArgumentError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    value, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    if not np.isfinite(value):
        raise NumericError("f is not finite at x")
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x.copy())[0]
        flat[i] = orig - eps
        fm = f(x.copy())[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is not finite near coordinate {i}")
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return float(worst)
