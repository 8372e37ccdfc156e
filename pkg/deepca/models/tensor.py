"""Dense tensor helpers.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in row-major
layout. The helpers here add the shape checking and error reporting the rest of
the package relies on.
"""
from typing import Sequence, Tuple, Union

import numpy as np

from ..core.errors import DimensionError, NumericalError

Shape = Tuple[int, ...]
DTYPE = np.float64


def as_tensor(data, shape: Union[Sequence[int], None] = None) -> np.ndarray:
    arr = np.asarray(data, dtype=DTYPE, order="C")
    if shape is not None and arr.shape != tuple(shape):
        raise DimensionError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{what} contains NaN or Inf")
    return arr


def check_trailing(arr: np.ndarray, shape: Shape, what: str = "tensor") -> int:
    """Check that ``arr`` is ``shape`` with at most one leading batch axis.

    Returns the number of leading batch axes (0 or 1).
    """
    shape = tuple(shape)
    if arr.shape == shape:
        return 0
    if arr.ndim == len(shape) + 1 and arr.shape[1:] == shape:
        return 1
    raise DimensionError(f"{what}: expected shape {shape} (optionally batched), got {arr.shape}")


def _conform(a: np.ndarray, b: np.ndarray) -> None:
    if np.ndim(a) and np.ndim(b) and np.shape(a) != np.shape(b):
        raise DimensionError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def add(a, b) -> np.ndarray:
    _conform(a, b)
    return np.add(a, b)


def sub(a, b) -> np.ndarray:
    _conform(a, b)
    return np.subtract(a, b)


def scale(alpha: float, a) -> np.ndarray:
    return np.multiply(alpha, a)


def hadamard(a, b) -> np.ndarray:
    _conform(a, b)
    return np.multiply(a, b)


def dot(a, b) -> float:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def norm2(a) -> float:
    return float(np.linalg.norm(np.ravel(a)))


def norm1(a) -> float:
    return float(np.sum(np.abs(a)))


def count_nonzero(a, eps: float) -> int:
    return int(np.count_nonzero(np.abs(a) > eps))


def max(a) -> float:  # noqa: A001
    return float(np.max(a))
