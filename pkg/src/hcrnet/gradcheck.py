"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, UsageError
from .tensor import Parameter, no_grad


def finite_difference_check(fn: Callable[[], "object"],
                            params: Sequence[Parameter],
                            epsilon: float = 1e-4,
                            n_coords: int = 200,
                            rng: Optional[np.random.Generator] = None,
                            min_per_param: int = 2) -> float:
    """Compare backward() gradients of the scalar `fn()` against central
    differences at sampled coordinates and return the worst relative error.

    `fn` must rebuild the loss from `params` on every call. Every non-frozen
    parameter gets at least `min_per_param` probed coordinates; the remaining
    budget is spread proportionally to tensor size. Relative error is
    |analytic - central| / max(1, |central|). Run with float64 parameters for
    meaningful tolerances.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    active = [p for p in params if not p.frozen]
    if not active:
        raise UsageError("finite_difference_check needs at least one non-frozen parameter")

    for p in active:
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data):
        raise NumericError("loss is non-finite at the evaluation point")
    loss.backward()
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in active}

    sizes = np.array([p.data.size for p in active], dtype=np.int64)
    counts = np.minimum(sizes, min_per_param)
    remaining = max(0, n_coords - int(counts.sum()))
    if remaining and sizes.sum() > 0:
        extra = np.floor(remaining * sizes / sizes.sum()).astype(np.int64)
        counts = np.minimum(sizes, counts + extra)

    worst = 0.0
    for p, k in zip(active, counts):
        flat = p.data.reshape(-1)
        idx = rng.choice(p.data.size, size=int(k), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            with no_grad():
                up = fn().item()
            flat[i] = orig - epsilon
            with no_grad():
                down = fn().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"loss is non-finite near {p.name}[{i}]")
            central = (up - down) / (2 * epsilon)
            err = abs(analytic[p.name].reshape(-1)[i] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
