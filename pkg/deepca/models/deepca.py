from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, Literal, Tuple

import numpy as np

from ..core.config import settings
from ..core.errors import DimensionError
from .operators import LinearOperator
from .penalty import PenaltySpec
from .tensor import Shape

WUpdateMode = Literal["auto", "exact", "parseval"]


@dataclass(frozen=True, eq=False)
class Layer:
    op: LinearOperator
    penalty: PenaltySpec

    def __post_init__(self):
        if tuple(self.penalty.shape) != tuple(self.op.output_shape):
            raise DimensionError(
                f"penalty shape {self.penalty.shape} does not match layer shape {self.op.output_shape}"
            )

    @property
    def uses_exact_update(self) -> bool:
        return self.op.kind == "dense"


@dataclass(frozen=True, eq=False)
class Model:
    """Ordered DeepCA layers; B_j w_j reconstructs w_{j-1} with w_0 = x."""

    layers: Tuple[Layer, ...]
    T: int = 1
    rho: float = settings.DEFAULT_RHO
    w_update: WUpdateMode = "auto"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise DimensionError("a model needs at least one layer")
        if self.T < 1:
            raise DimensionError(f"T must be >= 1, got {self.T}")
        if not self.rho > 0:
            raise DimensionError(f"rho must be > 0, got {self.rho}")
        for j in range(1, len(self.layers)):
            prev, cur = self.layers[j - 1].op, self.layers[j].op
            if tuple(prev.output_shape) != tuple(cur.input_shape):
                raise DimensionError(
                    f"layer {j} output shape {prev.output_shape} does not chain into layer {j + 1} "
                    f"input shape {cur.input_shape}"
                )

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_shape(self) -> Shape:
        return tuple(self.layers[0].op.input_shape)

    @property
    def output_shape(self) -> Shape:
        return tuple(self.layers[-1].op.output_shape)

    def exact_update(self, j: int) -> bool:
        if self.w_update == "exact":
            return self.layers[j].op.kind == "dense"
        if self.w_update == "parseval":
            return False
        return self.layers[j].uses_exact_update

    def with_layers(self, layers) -> "Model":
        return replace(self, layers=tuple(layers))

    def with_iterations(self, T: int) -> "Model":
        return replace(self, T=T)

    def bind_output(self, mask, values) -> "Model":
        """Instantiate the last layer's equality slot with (per-example) constraints."""
        last = self.layers[-1]
        bound = Layer(last.op, last.penalty.bind(mask, values))
        return self.with_layers(self.layers[:-1] + (bound,))

    def with_parameters(self, values: Dict[str, Any]) -> "Model":
        """Swap in parameter tensors by name (``B{j}`` weights, ``b{j}`` biases)."""
        layers = []
        for j, layer in enumerate(self.layers, start=1):
            op, penalty = layer.op, layer.penalty
            if f"B{j}" in values:
                op = op.with_weight(values[f"B{j}"])
            if f"b{j}" in values:
                penalty = penalty.with_bias(values[f"b{j}"])
            layers.append(Layer(op, penalty))
        return self.with_layers(layers)

    def named_parameters(self) -> Iterator[Tuple[str, Any, bool]]:
        """(name, tensor, learnable) in declaration order: B_j then b_j."""
        for j, layer in enumerate(self.layers, start=1):
            yield f"B{j}", layer.op.weight, layer.op.learnable
            if layer.penalty.kind == "nonneg_l1":
                yield f"b{j}", layer.penalty.bias, layer.penalty.learnable

    def parameter_count(self) -> int:
        return int(sum(np.size(p) for _, p, _ in self.named_parameters()))


@dataclass
class InferenceState:
    """ADMM iterate: per-layer w_j, z_j and duals lambda_j, with w_0 = z_0 = x."""

    x: Any
    w: List[Any] = field(default_factory=list)
    z: List[Any] = field(default_factory=list)
    lam: List[Any] = field(default_factory=list)

    @property
    def output(self):
        return self.z[-1]

    def z_prev(self, j: int):
        return self.x if j == 0 else self.z[j - 1]

    def copy(self) -> "InferenceState":
        return InferenceState(self.x, list(self.w), list(self.z), list(self.lam))
