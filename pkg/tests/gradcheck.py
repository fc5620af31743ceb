"""Finite-difference gradient comparison shared by the test modules."""

import numpy as np

from frame_ssl import tensor as T

# Entries where both the analytic and numeric derivative are below this are
# compared in absolute terms; the central difference carries ~1e-11 of noise.
FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def extrapolated_grad(loss_fn, p, h: float, indices) -> np.ndarray:
    """Richardson combination ``(4 D(h/2) - D(h)) / 3`` of two central differences.

    It cancels the ``h**2`` truncation term, so a larger ``h`` (less roundoff)
    can be used on sharply curved losses.
    """
    coarse = T.numeric_grad(loss_fn, p, h=h, indices=indices)
    fine = T.numeric_grad(loss_fn, p, h=h / 2, indices=indices)
    return (4.0 * fine - coarse) / 3.0


def max_grad_error(loss_fn, params: dict, max_entries: int | None = None, seed: int = 0, h: float = 1e-5,
                   extrapolate: bool = False):
    """Largest relative error between backprop and central differences over ``params``.

    ``loss_fn()`` rebuilds the scalar loss from the current parameter values.
    With ``max_entries`` only a random subset of each tensor's entries is probed;
    ``extrapolate`` uses :func:`extrapolated_grad` instead of a single difference.
    """
    for p in params.values():
        p.grad = None
    T.backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst, where = 0.0, None
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        size = p.data.size
        idx = np.arange(size) if max_entries is None or size <= max_entries else rng.choice(size, max_entries, replace=False)
        if extrapolate:
            numeric = extrapolated_grad(loss_fn, p, h, idx)
        else:
            numeric = T.numeric_grad(loss_fn, p, h=h, indices=idx)
        err = relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx])
        if err > worst:
            worst, where = err, name
    return worst, where
