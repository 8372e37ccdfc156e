"""Alternating direction neural network: ADMM inference for DeepCA models.

Layer indices are 0-based here (layer ``j`` reconstructs ``z_prev(j)``).
Every update is written against the differentiable primitives of
:mod:`deepca.services.autodiff`, so the same code runs eagerly for inference
and records an unrolled graph for training.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..core.errors import UsageError
from ..models.deepca import InferenceState, Layer, Model
from ..models.tensor import as_tensor
from . import autodiff as ad
from .objective import objective

logger = logging.getLogger(__name__)


@dataclass
class TraceRow:
    t: int
    layer: int
    primal_residual: float
    recon_residual: float
    objective: float


TRACE_HEADER = ["t", "layer", "primal_residual", "recon_residual", "objective"]


def feed_forward_init(model: Model, x) -> InferenceState:
    """w_j = B_j^T z_{j-1}, z_j = prox_j(w_j), lambda_j = 0."""
    if not ad.is_node(x):
        x = as_tensor(x)
    state = InferenceState(x)
    prev = x
    for layer in model.layers:
        w = ad.adjoint(layer.op, prev)
        z = ad.prox(layer.penalty, w)
        state.w.append(w)
        state.z.append(z)
        state.lam.append(np.zeros(np.shape(ad.value_of(w))))
        prev = z
    return state


def w_update_exact(layers: Sequence[Layer], j: int, state: InferenceState, rho: float,
                   solver: Optional[ad.GramSolver] = None):
    """(B^T B + rho I)^{-1} (B^T z_{j-1} + rho z_j - lambda_j)."""
    op = layers[j].op
    solver = solver if solver is not None else ad.GramSolver(op, rho)
    rhs = ad.add(ad.adjoint(op, state.z_prev(j)), ad.sub(ad.scale(rho, state.z[j]), state.lam[j]))
    return ad.gram_solve(solver, rhs)


def w_update_parseval(layers: Sequence[Layer], j: int, state: InferenceState, rho: float):
    """z~ + 1/(rho+1) B^T (z_{j-1} - B z~), z~ = z_j - lambda_j / rho."""
    op = layers[j].op
    z_tilde = ad.sub(state.z[j], ad.scale(1.0 / rho, state.lam[j]))
    residual = ad.sub(state.z_prev(j), ad.forward(op, z_tilde))
    return ad.add(z_tilde, ad.scale(1.0 / (rho + 1.0), ad.adjoint(op, residual)))


def z_update(layers: Sequence[Layer], j: int, state: InferenceState, rho: float):
    shifted = ad.add(state.w[j], ad.scale(1.0 / rho, state.lam[j]))
    if j == len(layers) - 1:
        return ad.prox(layers[j].penalty, shifted)
    feedback = ad.forward(layers[j + 1].op, state.w[j + 1])
    v = ad.add(ad.scale(1.0 / (rho + 1.0), feedback), ad.scale(rho / (rho + 1.0), shifted))
    return ad.prox(layers[j].penalty, v)


def dual_update(layers: Sequence[Layer], j: int, state: InferenceState, rho: float):
    return ad.add(state.lam[j], ad.scale(rho, ad.sub(state.w[j], state.z[j])))


def sweep(model: Model, state: InferenceState, solvers: Dict[int, ad.GramSolver]) -> None:
    """One ADNN iteration: for every layer in order, dual -> w -> z."""
    layers, rho = model.layers, model.rho
    for j in range(model.depth):
        state.lam[j] = dual_update(layers, j, state, rho)
        if j in solvers:
            state.w[j] = w_update_exact(layers, j, state, rho, solvers[j])
        else:
            state.w[j] = w_update_parseval(layers, j, state, rho)
        state.z[j] = z_update(layers, j, state, rho)


def infer(model: Model, x, T: Optional[int] = None, tol: Optional[float] = None,
          trace: Optional[List[TraceRow]] = None) -> InferenceState:
    """f^[T](x): feed-forward initialization followed by T-1 sweeps.

    ``tol`` enables early stopping on the largest primal residual; it is only
    honoured for eager (non-recorded) runs so unrolled graphs keep a fixed depth.
    """
    T = model.T if T is None else T
    if T < 1:
        raise UsageError(f"T must be >= 1, got {T}")
    state = feed_forward_init(model, x)
    if trace is not None:
        trace.extend(trace_rows(model, state, 1))
    if T == 1:
        return state

    solvers = {
        j: ad.GramSolver(layer.op, model.rho)
        for j, layer in enumerate(model.layers)
        if model.exact_update(j)
    }
    recording = ad.is_node(x) or any(ad.is_node(p) for _, p, _ in model.named_parameters())
    for t in range(2, T + 1):
        sweep(model, state, solvers)
        if trace is not None:
            trace.extend(trace_rows(model, state, t))
        if tol is not None and not recording:
            primal = max(p for p, _ in residuals(model, state))
            logger.debug(f"sweep {t}: max primal residual {primal:.3e}")
            if primal < tol:
                logger.info(f"converged after {t} iterations (primal residual {primal:.3e})")
                break
    return state


def residuals(model: Model, state: InferenceState) -> List[tuple]:
    """Per layer: (||w_j - z_j||, ||z_{j-1} - B_j w_j||)."""
    out = []
    for j, layer in enumerate(model.layers):
        w = ad.value_of(state.w[j])
        z = ad.value_of(state.z[j])
        prev = ad.value_of(state.z_prev(j))
        recon = prev - layer.op.forward_with(ad.value_of(layer.op.weight), w)
        out.append((float(np.linalg.norm(w - z)), float(np.linalg.norm(recon))))
    return out


def trace_rows(model: Model, state: InferenceState, t: int) -> List[TraceRow]:
    concrete = _concrete(model)
    obj = objective(concrete, ad.value_of(state.x), [ad.value_of(z) for z in state.z])
    return [
        TraceRow(t, j + 1, primal, recon, obj)
        for j, (primal, recon) in enumerate(residuals(model, state))
    ]


def _concrete(model: Model) -> Model:
    params = list(model.named_parameters())
    if not any(ad.is_node(p) for _, p, _ in params):
        return model
    return model.with_parameters({name: ad.value_of(p) for name, p, _ in params})
