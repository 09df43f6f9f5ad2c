"""Central-difference gradients, used as the oracle for every analytic adjoint."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_diff_grad(f: Callable, x, eps: float = 1e-6) -> np.ndarray:
    """(f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every coordinate i of ``x``.

    ``f`` receives a float64 array shaped like ``x`` and returns a scalar (float or
    scalar Tensor).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x0)
    with no_grad():
        for i in np.ndindex(x0.shape):
            xp = x0.copy()
            xp[i] += eps
            xm = x0.copy()
            xm[i] -= eps
            grad[i] = (_scalar(f(xp)) - _scalar(f(xm))) / (2.0 * eps)
    return grad


def finite_diff_param_grad(
    loss_fn: Callable[[], object],
    param: Tensor,
    eps: float = 1e-6,
    coords: Iterable[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to entries of ``param``.

    Perturbs ``param.data`` in place and restores it. Entries not listed in
    ``coords`` are left as NaN in the result.
    """
    coords = list(np.ndindex(param.shape)) if coords is None else list(coords)
    grad = np.full(param.shape, np.nan)
    with no_grad():
        for i in coords:
            orig = param.data[i]
            param.data[i] = orig + eps
            fp = _scalar(loss_fn())
            param.data[i] = orig - eps
            fm = _scalar(loss_fn())
            param.data[i] = orig
            grad[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
