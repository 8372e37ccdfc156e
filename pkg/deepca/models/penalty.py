from dataclasses import dataclass, replace
from typing import Any, Literal, Optional, Sequence

import numpy as np

from ..core.errors import DimensionError
from .tensor import Shape, as_tensor

PenaltyKind = Literal["nonneg_l1", "nonneg", "simplex", "equality", "none"]
PENALTY_KINDS = ("nonneg_l1", "nonneg", "simplex", "equality", "none")


@dataclass(frozen=True, eq=False)
class PenaltySpec:
    """Penalty Phi_j attached to a layer.

    ``bias`` (nonneg_l1 only) broadcasts against the layer shape: per
    coordinate, per channel ``(C, 1, 1)`` or scalar. Equality constraints are
    stored as a boolean ``mask`` and ``values`` of the layer shape, optionally
    with a leading batch axis when every example carries its own constraints.
    An equality spec without a mask is an unbound slot and acts as identity.
    """

    kind: PenaltyKind
    shape: Shape
    bias: Any = None
    learnable: bool = False
    mask: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise DimensionError(f"unknown penalty kind {self.kind!r}")
        if self.kind == "nonneg_l1":
            if self.bias is None:
                raise DimensionError("nonneg_l1 penalty requires a bias")
            try:
                np.broadcast_shapes(tuple(self.bias.shape), tuple(self.shape))
            except ValueError as e:
                raise DimensionError(f"bias shape {self.bias.shape} does not broadcast to {self.shape}") from e
            if isinstance(self.bias, np.ndarray) and np.any(self.bias < 0):
                raise DimensionError("nonneg_l1 bias must be elementwise >= 0")
        if self.kind == "equality" and self.mask is not None:
            if self.mask.shape[-len(self.shape):] != tuple(self.shape) or self.values.shape != self.mask.shape:
                raise DimensionError(f"equality mask/values {self.mask.shape} do not match layer shape {self.shape}")

    @classmethod
    def nonneg_l1(cls, bias, shape: Sequence[int], learnable: bool = False) -> "PenaltySpec":
        return cls("nonneg_l1", tuple(shape), bias=as_tensor(bias), learnable=learnable)

    @classmethod
    def nonneg(cls, shape: Sequence[int]) -> "PenaltySpec":
        return cls("nonneg", tuple(shape))

    @classmethod
    def simplex(cls, shape: Sequence[int]) -> "PenaltySpec":
        return cls("simplex", tuple(shape))

    @classmethod
    def none(cls, shape: Sequence[int]) -> "PenaltySpec":
        return cls("none", tuple(shape))

    @classmethod
    def equality(cls, shape: Sequence[int], indices: Optional[Sequence[int]] = None, values=None) -> "PenaltySpec":
        """Equality constraint w[S] = y on flat positions S (strictly increasing)."""
        shape = tuple(shape)
        spec = cls("equality", shape)
        if indices is None:
            return spec
        return spec.bind(*equality_mask(shape, indices, values))

    @property
    def is_bound(self) -> bool:
        return self.kind != "equality" or self.mask is not None

    def bind(self, mask, values) -> "PenaltySpec":
        """Fill an equality slot with (possibly per-example) mask and values."""
        if self.kind != "equality":
            raise DimensionError(f"cannot bind constraints to a {self.kind} penalty")
        mask = np.asarray(mask, dtype=bool)
        values = np.where(mask, as_tensor(values), 0.0)
        return replace(self, mask=mask, values=values)

    def with_bias(self, bias) -> "PenaltySpec":
        return replace(self, bias=bias)


def equality_mask(shape: Shape, indices: Sequence[int], values) -> tuple:
    size = int(np.prod(shape))
    indices = np.asarray(indices, dtype=np.int64)
    values = as_tensor(values).ravel()
    if indices.ndim != 1 or indices.shape != values.shape:
        raise DimensionError(f"equality indices {indices.shape} and values {values.shape} differ")
    if indices.size and (indices.min() < 0 or indices.max() >= size):
        raise DimensionError(f"equality indices out of range for dimension {size}")
    if np.any(np.diff(indices) <= 0):
        raise DimensionError("equality indices must be strictly increasing")
    mask = np.zeros(size, dtype=bool)
    mask[indices] = True
    full = np.zeros(size)
    full[indices] = values
    return mask.reshape(shape), full.reshape(shape)
