"""Central finite differences with fixed per-dimension steps.

Steps are derived from domain scales, not from the evaluation point, so the
truncation error varies smoothly and stays harmless inside downstream second
differences (the tensor checks second-difference quantities that may already
carry an FD layer).
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def step_sizes(scales: np.ndarray, eps: float) -> np.ndarray:
    """Per-dimension steps eps * max(1, |scale_i|)."""
    scales = np.atleast_1d(np.asarray(scales, dtype=float))
    return eps * np.maximum(1.0, np.abs(scales))


def grad(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Central-difference gradient of scalar-valued f.

    f maps (..., n) -> (...); x has shape (..., n); returns (..., n).
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    out = np.empty(x.shape, dtype=float)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        out[..., i] = (f(x + e) - f(x - e)) / (2.0 * h[i])
    return out


def jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian of vector-valued f.

    f maps (..., n) -> (..., m); returns (..., m, n) with J[..., j, i] = df_j/dx_i.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        cols.append((f(x + e) - f(x - e)) / (2.0 * h[i]))
    return np.stack(cols, axis=-1)


def partial_scalar(f: Callable[[np.ndarray], np.ndarray], t: np.ndarray, h: float) -> np.ndarray:
    """Central difference of f along a scalar argument."""
    t = np.asarray(t, dtype=float)
    return (f(t + h) - f(t - h)) / (2.0 * h)


def hessian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Central second differences of scalar f; returns a symmetric (..., n, n)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    f0 = f(x)
    out = np.empty(x.shape[:-1] + (n, n), dtype=float)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        out[..., i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / (h[i] * h[i])
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h[j]
            mixed = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
            out[..., i, j] = mixed
            out[..., j, i] = mixed
    return out
