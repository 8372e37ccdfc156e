"""DeepCA objective, augmented Lagrangian and the equivalent stacked system."""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from ..core.config import settings
from ..core.errors import CapacityError, DimensionError
from ..models.deepca import InferenceState, Model
from ..models.operators import apply_forward
from ..models.tensor import as_tensor
from .prox import penalty_value


def objective(model: Model, x, ws: Sequence) -> float:
    """sum_j 1/2 ||w_{j-1} - B_j w_j||^2 + Phi_j(w_j), w_0 = x."""
    if len(ws) != model.depth:
        raise DimensionError(f"expected {model.depth} coefficient tensors, got {len(ws)}")
    total = 0.0
    prev = as_tensor(x)
    for layer, w in zip(model.layers, ws):
        w = as_tensor(w)
        r = prev - apply_forward(layer.op, w)
        total += 0.5 * float(np.sum(r * r)) + penalty_value(layer.penalty, w)
        prev = w
    return total


def augmented_lagrangian(model: Model, state: InferenceState) -> float:
    total = 0.0
    for j, layer in enumerate(model.layers):
        w, z, lam = (as_tensor(a) for a in (state.w[j], state.z[j], state.lam[j]))
        r = as_tensor(state.z_prev(j)) - apply_forward(layer.op, w)
        d = w - z
        total += (
            0.5 * float(np.sum(r * r))
            + penalty_value(layer.penalty, z)
            + float(np.sum(lam * d))
            + 0.5 * model.rho * float(np.sum(d * d))
        )
    return total


@dataclass
class StackedSystem:
    """Block-bidiagonal operator [[B1, 0, ..], [-I, B2, ..], ..] of the shallow form."""

    matrix: np.ndarray
    row_sizes: List[int]
    col_sizes: List[int]
    col_shapes: List[tuple]

    def target(self, x) -> np.ndarray:
        x = as_tensor(x).ravel()
        if x.size != self.row_sizes[0]:
            raise DimensionError(f"input has {x.size} entries, stacked system expects {self.row_sizes[0]}")
        return np.concatenate([x, np.zeros(sum(self.row_sizes[1:]))])

    def stack(self, ws: Sequence) -> np.ndarray:
        return np.concatenate([as_tensor(w).ravel() for w in ws])

    def split(self, vec: np.ndarray) -> List[np.ndarray]:
        bounds = np.cumsum([0] + self.col_sizes)
        return [vec[bounds[k]:bounds[k + 1]].reshape(self.col_shapes[k]) for k in range(len(self.col_sizes))]


def build_stacked_system(model: Model, cap: Optional[int] = None) -> StackedSystem:
    cap = settings.SIZE_CAP if cap is None else cap
    row_sizes = [layer.op.input_size for layer in model.layers]
    col_sizes = [layer.op.output_size for layer in model.layers]
    if sum(row_sizes) * sum(col_sizes) > cap:
        raise CapacityError(
            f"stacked system {sum(row_sizes)}x{sum(col_sizes)} exceeds the cap of {cap} entries"
        )
    matrix = np.zeros((sum(row_sizes), sum(col_sizes)))
    r0 = np.cumsum([0] + row_sizes)
    c0 = np.cumsum([0] + col_sizes)
    for j, layer in enumerate(model.layers):
        matrix[r0[j]:r0[j + 1], c0[j]:c0[j + 1]] = layer.op.to_dense(cap)
        if j > 0:
            matrix[r0[j]:r0[j + 1], c0[j - 1]:c0[j]] = -np.eye(row_sizes[j])
    return StackedSystem(matrix, row_sizes, col_sizes, [tuple(l.op.output_shape) for l in model.layers])


def stacked_objective(model: Model, system: StackedSystem, x, ws: Sequence) -> float:
    """1/2 ||[x; 0; ..] - A [w_1; ..; w_l]||^2 + sum_j Phi_j(w_j)."""
    r = system.target(x) - system.matrix @ system.stack(ws)
    return 0.5 * float(r @ r) + sum(penalty_value(l.penalty, w) for l, w in zip(model.layers, ws))
