"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-3,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """d fn() / d t by central differences, at ``indices`` (all entries if None).

    Entries not in ``indices`` are left as NaN.
    """
    grad = np.full(t.shape, np.nan)
    if indices is None:
        indices = list(np.ndindex(*t.shape))
    for idx in indices:
        orig = t.data[idx]
        t.data[idx] = orig + step
        fp = float(fn().data)
        t.data[idx] = orig - step
        fm = float(fn().data)
        t.data[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-5) -> float:
    """max |a - n| / max(|a|, |n|, atol) over entries where ``numeric`` is finite."""
    sel = np.isfinite(numeric)
    a, n = np.asarray(analytic, dtype=np.float64)[sel], numeric[sel]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-3,
                    atol: float = 1e-5, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Run backward once and compare every tensor's grad with finite differences.

    Returns the worst relative error. ``max_entries`` limits the probed
    entries per tensor (chosen with ``rng``).
    """
    for t in tensors:
        t.zero_grad()
    fn().backward()
    worst = 0.0
    for t in tensors:
        indices = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(t.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in flat]
        num = numerical_grad(fn, t, step=step, indices=indices)
        worst = max(worst, max_relative_error(t.grad, num, atol=atol))
    return worst
