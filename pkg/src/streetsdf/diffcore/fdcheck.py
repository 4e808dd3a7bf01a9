"""Central-difference gradient verification harness.

The one oracle every differentiable path in this package must pass: an
analytic gradient is compared against central differences of the scalar
objective, elementwise, at 64-bit precision.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray] | np.ndarray,
    params: np.ndarray,
    h: float = 1e-5,
    max_checks: int = 256,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps a parameter vector to a scalar; grad is its analytic gradient
    (callable or precomputed vector). Steps are h * max(1, |theta_i|) per
    coordinate. When the vector is large, a seeded random subset of
    max_checks coordinates is probed. Relative error uses the denominator
    max(1, |analytic|, |numeric|).
    """
    params = np.asarray(params, dtype=np.float64)
    g = np.asarray(grad(params) if callable(grad) else grad, dtype=np.float64).ravel()
    if g.shape != params.ravel().shape:
        raise ValueError("gradient shape mismatch")
    n = params.size
    if n <= max_checks:
        indices = np.arange(n)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        indices = rng.choice(n, size=max_checks, replace=False)
    flat = params.ravel()
    worst = 0.0
    for i in indices:
        step = h * max(1.0, abs(flat[i]))
        p_hi = flat.copy()
        p_hi[i] += step
        p_lo = flat.copy()
        p_lo[i] -= step
        num = (f(p_hi.reshape(params.shape)) - f(p_lo.reshape(params.shape))) / (2 * step)
        err = abs(g[i] - num) / max(1.0, abs(g[i]), abs(num))
        worst = max(worst, err)
    return worst
