"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, backward


class EvaluationError(ArithmeticError):
    pass


def _value(out) -> float:
    v = float(out.data) if isinstance(out, Tensor) else float(out)
    if not np.isfinite(v):
        raise EvaluationError(f"objective returned non-finite value {v}")
    return v


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Parameter]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    out = f()
    _value(out)
    backward(out)
    grads = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    return grads


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-4,
    grads: Sequence[np.ndarray] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` re-evaluates the objective from the current parameter values. Pass
    ``grads`` to check externally supplied gradients instead of ``backward``.
    ``max_coords`` samples that many coordinates per parameter.
    """
    if grads is None:
        grads = analytic_grads(f, params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _value(f())
            flat[i] = orig - eps
            fm = _value(f())
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(gflat[i] - num) / (abs(num) + 1e-8)
            worst = max(worst, err)
    return worst
