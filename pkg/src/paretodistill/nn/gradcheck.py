"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np


def finite_diff_check(f: Callable[[np.ndarray], float], theta: np.ndarray,
                      analytic: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``theta`` is perturbed in place coordinate by coordinate (float64) and
    restored afterwards. Relative error per coordinate uses the denominator
    max(|a|, |n|, 1e-8).
    """
    theta = np.asarray(theta)
    if theta.dtype != np.float64:
        raise TypeError("finite differences need a float64 parameter array")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(theta.shape)
    flat = theta.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(theta)
        flat[i] = orig - h
        down = f(theta)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite objective at coordinate {i}")
        numeric = (up - down) / (2 * h)
        a = analytic.reshape(-1)[i]
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
