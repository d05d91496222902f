"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from muan.tensor import finite_diff_grad


def max_relative_gradient_error(analytic, numeric, floor=1e-6):
    """Worst relative disagreement over entries where |analytic| > floor.

    Relative error is |a - n| / max(|a|, |n|); entries whose analytic
    gradient is tiny are excluded, matching the checking policy used
    throughout (finite differences lose accuracy near zero).
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        mask = np.abs(a) > floor
        if not mask.any():
            continue
        rel = np.abs(a - n)[mask] / np.maximum(np.abs(a), np.abs(n))[mask]
        worst = max(worst, float(rel.max()))
    return worst


def check_gradients(f, params, rtol=1e-4, eps=1e-5, floor=1e-6):
    """Run backward on f() and compare every parameter against central differences."""
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = []
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        analytic.append(p.grad)
    numeric = finite_diff_grad(f, params, eps=eps)
    err = max_relative_gradient_error(analytic, numeric, floor=floor)
    assert err < rtol, f"gradient mismatch: max relative error {err:.3e} >= {rtol}"
    return err
