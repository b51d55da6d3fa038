"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteLoss(FloatingPointError):
    pass


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the graph from the current parameter values each call.
    When ``max_coords`` is set, that many coordinates per parameter are sampled
    with ``rng``; otherwise every coordinate is checked.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for k in coords:
            original = flat[k]
            flat[k] = original + h
            plus = float(loss_fn().data)
            flat[k] = original - h
            minus = float(loss_fn().data)
            flat[k] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NonFiniteLoss(f"loss non-finite when perturbing param {pi} coordinate {k}")
            numeric = (plus - minus) / (2 * h)
            exact = analytic[pi].reshape(-1)[k]
            err = abs(exact - numeric) / (abs(exact) + 1e-12)
            if exact == 0.0 and numeric == 0.0:
                err = 0.0
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
