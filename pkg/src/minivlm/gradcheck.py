"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(f: Callable[[], float], x: Tensor, step: float = 1e-5, entries: Optional[Iterable[Tuple[int, ...]]] = None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x.data`` in place.

    With ``entries`` only those flat-index tuples are probed; the rest of the
    returned array is NaN.
    """
    grad = np.full(x.shape, np.nan) if entries is not None else np.zeros(x.shape)
    it = entries if entries is not None else np.ndindex(*x.shape)
    for idx in it:
        orig = x.data[idx]
        x.data[idx] = orig + step
        hi = f()
        x.data[idx] = orig - step
        lo = f()
        x.data[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between autodiff and finite differences over ``params``."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    def f():
        with T.no_grad():
            return float(loss_fn().data)

    worst = 0.0
    for p, ga in zip(params, analytic):
        entries = None
        if max_entries is not None and p.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(p.size, size=max_entries, replace=False)
            entries = [np.unravel_index(i, p.shape) for i in flat]
        gn = numeric_grad(f, p, step, entries)
        sel = ~np.isnan(gn)
        worst = max(worst, relative_error(ga[sel], gn[sel], floor))
    return worst
