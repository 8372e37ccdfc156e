"""Linear operators B_j with exact adjoints.

Direction convention: ``forward`` maps layer-j coefficients (``output_shape``)
to a reconstruction of layer j-1 (``input_shape``), i.e. it computes B w.
``adjoint`` goes the other way and is what a feed-forward pass applies.

For the conv2d kind the adjoint is a strided, zero-padded convolution and the
forward map is its transpose (an upsampling transposed convolution). Both are
built on the same im2col window view, so the adjoint identity holds by
construction.
"""
from dataclasses import dataclass, field, replace
from typing import Any, Literal, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..core.config import settings
from ..core.errors import CapacityError, DimensionError
from .tensor import DTYPE, Shape, as_tensor, check_trailing

OperatorKind = Literal["dense", "conv2d"]


@dataclass(frozen=True, eq=False)
class LinearOperator:
    kind: OperatorKind
    weight: Any
    input_shape: Shape
    output_shape: Shape
    stride: int = 1
    padding: int = 0
    learnable: bool = field(default=True)

    def __post_init__(self):
        wshape = tuple(self.weight.shape)
        if self.kind == "dense":
            if len(wshape) != 2:
                raise DimensionError(f"dense weight must be 2-D, got {wshape}")
            if int(np.prod(self.input_shape)) != wshape[0] or int(np.prod(self.output_shape)) != wshape[1]:
                raise DimensionError(
                    f"dense weight {wshape} does not map {self.output_shape} -> {self.input_shape}"
                )
        elif self.kind == "conv2d":
            if len(wshape) != 4 or len(self.input_shape) != 3:
                raise DimensionError(f"conv2d needs a 4-D kernel and (C, H, W) input, got {wshape}")
            if self.stride < 1 or self.padding < 0:
                raise DimensionError("conv2d stride must be >= 1 and padding >= 0")
            expected = _conv_output_shape(self.input_shape, wshape, self.stride, self.padding)
            if tuple(self.output_shape) != expected:
                raise DimensionError(f"conv2d output shape {self.output_shape} != {expected}")
        else:
            raise DimensionError(f"unknown operator kind {self.kind!r}")

    @classmethod
    def dense(cls, matrix, input_shape: Optional[Sequence[int]] = None, learnable: bool = True) -> "LinearOperator":
        matrix = as_tensor(matrix)
        if matrix.ndim != 2:
            raise DimensionError(f"dense weight must be 2-D, got {matrix.shape}")
        in_shape = tuple(input_shape) if input_shape is not None else (matrix.shape[0],)
        return cls("dense", matrix, in_shape, (matrix.shape[1],), learnable=learnable)

    @classmethod
    def conv2d(
        cls,
        kernel,
        input_shape: Sequence[int],
        stride: int = 1,
        padding: int = 0,
        learnable: bool = True,
    ) -> "LinearOperator":
        kernel = as_tensor(kernel)
        input_shape = tuple(input_shape)
        if kernel.ndim != 4 or len(input_shape) != 3:
            raise DimensionError(f"conv2d needs a 4-D kernel and (C, H, W) input, got {kernel.shape}")
        if kernel.shape[1] != input_shape[0]:
            raise DimensionError(f"kernel in-channels {kernel.shape[1]} != input channels {input_shape[0]}")
        out_shape = _conv_output_shape(input_shape, kernel.shape, stride, padding)
        return cls("conv2d", kernel, input_shape, out_shape, stride, padding, learnable)

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def output_size(self) -> int:
        return int(np.prod(self.output_shape))

    def with_weight(self, weight) -> "LinearOperator":
        return replace(self, weight=weight)

    # primitives taking an explicit weight value; the autodiff engine records these

    def forward_with(self, weight: np.ndarray, w: np.ndarray) -> np.ndarray:
        nb = check_trailing(w, self.output_shape, "forward input")
        if self.kind == "dense":
            lead = w.shape[:nb]
            out = w.reshape(lead + (self.output_size,)) @ weight.T
            return out.reshape(lead + self.input_shape)
        return _conv_transpose(w, weight, self.stride, self.padding, self.input_shape, nb)

    def adjoint_with(self, weight: np.ndarray, v: np.ndarray) -> np.ndarray:
        nb = check_trailing(v, self.input_shape, "adjoint input")
        if self.kind == "dense":
            lead = v.shape[:nb]
            return v.reshape(lead + (self.input_size,)) @ weight
        return _conv(v, weight, self.stride, self.padding, nb)

    def forward_weight_grad(self, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Gradient of <forward(W, w), g> with respect to W."""
        nb = check_trailing(w, self.output_shape, "forward input")
        if self.kind == "dense":
            return g.reshape(-1, self.input_size).T @ w.reshape(-1, self.output_size)
        return _kernel_grad(w, _windows(g, self.weight.shape, self.stride, self.padding), nb)

    def adjoint_weight_grad(self, v: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Gradient of <adjoint(W, v), g> with respect to W."""
        nb = check_trailing(v, self.input_shape, "adjoint input")
        if self.kind == "dense":
            return v.reshape(-1, self.input_size).T @ g.reshape(-1, self.output_size)
        return _kernel_grad(g, _windows(v, self.weight.shape, self.stride, self.padding), nb)

    def to_dense(self, cap: Optional[int] = None) -> np.ndarray:
        """Materialize B as a (input_size x output_size) matrix."""
        cap = settings.SIZE_CAP if cap is None else cap
        if self.input_size * self.output_size > cap:
            raise CapacityError(
                f"materializing a {self.input_size}x{self.output_size} operator exceeds the cap of {cap} entries"
            )
        if self.kind == "dense":
            return np.array(self.weight, dtype=DTYPE)
        basis = np.eye(self.output_size, dtype=DTYPE).reshape((self.output_size,) + self.output_shape)
        columns = self.forward_with(self.weight, basis)
        return columns.reshape(self.output_size, self.input_size).T.copy()


def apply_forward(op: LinearOperator, w) -> np.ndarray:
    """B w."""
    return op.forward_with(op.weight, as_tensor(w))


def apply_adjoint(op: LinearOperator, v) -> np.ndarray:
    """B^T v."""
    return op.adjoint_with(op.weight, as_tensor(v))


def operator_norm(op: LinearOperator, iters: int = 100, seed: int = 0, tol: float = 1e-10) -> float:
    """Largest singular value of B by power iteration on B^T B."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(op.output_shape)
    u /= np.linalg.norm(u)
    sigma_sq = 0.0
    for _ in range(iters):
        u_next = apply_adjoint(op, apply_forward(op, u))
        nrm = float(np.linalg.norm(u_next))
        if nrm == 0.0:
            return 0.0
        u = u_next / nrm
        if abs(nrm - sigma_sq) <= tol * max(1.0, sigma_sq):
            sigma_sq = nrm
            break
        sigma_sq = nrm
    return float(np.sqrt(sigma_sq))


def _conv_output_shape(input_shape, kernel_shape, stride: int, padding: int) -> Shape:
    _, h, w = input_shape
    c_out, _, kh, kw = kernel_shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kernel_shape[2:]} does not fit input {input_shape[1:]} with padding {padding}")
    return (int(c_out), int(ho), int(wo))


def _windows(x: np.ndarray, kernel_shape, stride: int, padding: int) -> np.ndarray:
    """im2col view: (..., C, Ho, Wo, kH, kW)."""
    kh, kw = kernel_shape[2], kernel_shape[3]
    pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    xp = np.pad(x, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(-2, -1))
    return win[..., ::stride, ::stride, :, :]


def _conv(v: np.ndarray, kernel: np.ndarray, stride: int, padding: int, nb: int) -> np.ndarray:
    win = _windows(v, kernel.shape, stride, padding)
    out = np.tensordot(win, kernel, axes=([nb, nb + 3, nb + 4], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(out, -1, nb))


def _conv_transpose(w, kernel, stride: int, padding: int, input_shape: Shape, nb: int) -> np.ndarray:
    c_in, h, wd = input_shape
    kh, kw = kernel.shape[2], kernel.shape[3]
    ho, wo = w.shape[-2], w.shape[-1]
    lead = w.shape[:nb]
    contrib = np.tensordot(w, kernel, axes=([nb], [0]))
    xp = np.zeros(lead + (c_in, h + 2 * padding, wd + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            xp[..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += np.moveaxis(
                contrib[..., i, j], -1, nb
            )
    return np.ascontiguousarray(xp[..., padding:padding + h, padding:padding + wd])


def _kernel_grad(codes: np.ndarray, win: np.ndarray, nb: int) -> np.ndarray:
    lead_axes = list(range(nb))
    return np.tensordot(codes, win, axes=(lead_axes + [nb + 1, nb + 2], lead_axes + [nb + 1, nb + 2]))
