"""Central finite differences for checking tape gradients."""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-3
REL_TOL = 1e-4
ABS_FLOOR = 1e-6


def numerical_gradient(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = f(x.copy())
        flat[j] = orig - step
        fm = f(x.copy())
        flat[j] = orig
        g[j] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic, numeric, floor: float = ABS_FLOOR) -> float:
    """Worst elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
