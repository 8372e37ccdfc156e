"""Proximal operators of the layer penalties.

prox(spec, v) = argmin_u 1/2 ||v - u||^2 + Phi(u)

The bias of the nonneg_l1 penalty lives inside the operator, so the
feed-forward activation is ``prox(spec, w)`` rather than ``phi(w - b)``.
"""
from typing import Optional, Tuple

import numpy as np

from ..core.errors import DimensionError
from ..models.penalty import PenaltySpec
from ..models.tensor import as_tensor, check_trailing

SIMPLEX_TOL = 1e-9


def prox(spec: PenaltySpec, v) -> np.ndarray:
    v = as_tensor(v)
    check_trailing(v, spec.shape, f"prox[{spec.kind}]")
    if spec.kind == "nonneg_l1":
        return np.maximum(0.0, v - spec.bias)
    if spec.kind == "nonneg":
        return np.maximum(0.0, v)
    if spec.kind == "simplex":
        return _project_simplex(v, spec.shape)
    if spec.kind == "equality":
        if not spec.is_bound:
            return v.copy()
        return np.where(spec.mask, spec.values, v)
    return v.copy()


def penalty_value(spec: PenaltySpec, w) -> float:
    """Phi(w), summed over a leading batch axis; +inf when an indicator is violated."""
    w = as_tensor(w)
    check_trailing(w, spec.shape, f"penalty[{spec.kind}]")
    if spec.kind == "nonneg_l1":
        if np.any(w < 0):
            return float("inf")
        return float(np.sum(np.broadcast_to(spec.bias, w.shape) * np.abs(w)))
    if spec.kind == "nonneg":
        return float("inf") if np.any(w < 0) else 0.0
    if spec.kind == "simplex":
        flat = _rows(w, spec.shape)
        feasible = np.all(flat >= 0) and np.all(np.abs(flat.sum(axis=1) - 1.0) <= SIMPLEX_TOL * flat.shape[1])
        return 0.0 if feasible else float("inf")
    if spec.kind == "equality":
        if not spec.is_bound:
            return 0.0
        mask = np.broadcast_to(spec.mask, w.shape)
        values = np.broadcast_to(spec.values, w.shape)
        return 0.0 if np.array_equal(w[mask], values[mask]) else float("inf")
    return 0.0


def prox_vjp(spec: PenaltySpec, out: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Vector-Jacobian product of prox at the point that produced ``out``.

    Returns the gradient with respect to the prox input and, for nonneg_l1,
    with respect to the bias. The derivative at a kink is taken as 0.
    """
    if spec.kind == "nonneg_l1":
        active = out > 0
        g_v = np.where(active, g, 0.0)
        return g_v, unbroadcast(-g_v, tuple(np.shape(spec.bias)))
    if spec.kind == "nonneg":
        return np.where(out > 0, g, 0.0), None
    if spec.kind == "simplex":
        flat_out = _rows(out, spec.shape)
        flat_g = _rows(g, spec.shape)
        active = flat_out > 0
        mean = np.sum(np.where(active, flat_g, 0.0), axis=1, keepdims=True) / np.sum(active, axis=1, keepdims=True)
        return np.where(active, flat_g - mean, 0.0).reshape(g.shape), None
    if spec.kind == "equality" and spec.is_bound:
        return np.where(spec.mask, 0.0, g), None
    return g, None


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _rows(v: np.ndarray, shape) -> np.ndarray:
    size = int(np.prod(shape))
    if v.size % size:
        raise DimensionError(f"cannot split {v.shape} into rows of {shape}")
    return v.reshape(-1, size)


def _project_simplex(v: np.ndarray, shape) -> np.ndarray:
    """Euclidean projection of each example onto {u >= 0, sum u = 1}."""
    flat = _rows(v, shape)
    p = flat.shape[1]
    ordered = -np.sort(-flat, axis=1, kind="stable")
    css = np.cumsum(ordered, axis=1) - 1.0
    k = np.arange(1, p + 1)
    support = ordered - css / k > 0
    last = p - 1 - np.argmax(support[:, ::-1], axis=1)
    theta = css[np.arange(flat.shape[0]), last] / (last + 1)
    projected = np.maximum(flat - theta[:, None], 0.0)
    # rows already on the simplex (to rounding) are returned as-is so projection is idempotent
    feasible = np.all(flat >= 0, axis=1) & (np.abs(flat.sum(axis=1) - 1.0) <= 1e-12)
    projected[feasible] = flat[feasible]
    return projected.reshape(v.shape)
