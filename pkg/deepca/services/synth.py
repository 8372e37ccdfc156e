"""Synthetic data: coherent dictionaries, sparse codes, piecewise-planar depth fields
and prototype classification tasks. Every generator is deterministic in its seed."""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..core.errors import UsageError
from ..models.dataset import Dataset


def _normalize_columns(matrix: np.ndarray) -> np.ndarray:
    return matrix / np.linalg.norm(matrix, axis=0, keepdims=True)


def dictionary_gen(d: int, k: int, coherence: float, seed: int, orthonormal: bool = False) -> np.ndarray:
    """d x k dictionary with unit-norm columns.

    ``coherence`` in [0, 1) mixes a shared direction into every atom, raising
    the mutual coherence. ``orthonormal`` returns orthonormal columns (k <= d).
    """
    if d < 1 or k < 1:
        raise UsageError(f"dictionary needs positive sizes, got {d}x{k}")
    if not 0.0 <= coherence < 1.0:
        raise UsageError(f"coherence must lie in [0, 1), got {coherence}")
    rng = np.random.default_rng(seed)
    gaussian = rng.standard_normal((d, k))
    if orthonormal:
        if k > d:
            raise UsageError(f"an orthonormal dictionary needs k <= d, got {d}x{k}")
        q, _ = np.linalg.qr(gaussian)
        return np.ascontiguousarray(q)
    shared = rng.standard_normal(d)
    shared /= np.linalg.norm(shared)
    mixed = np.sqrt(1.0 - coherence) * _normalize_columns(gaussian) + np.sqrt(coherence) * shared[:, None]
    return _normalize_columns(mixed)


def sparse_code_gen(k: int, density: float, seed: int, n: Optional[int] = None) -> np.ndarray:
    """Nonnegative codes with floor(density * k) nonzeros of magnitude in [0.5, 1.5]."""
    if not 0.0 <= density <= 1.0:
        raise UsageError(f"density must lie in [0, 1], got {density}")
    rng = np.random.default_rng(seed)
    nnz = int(np.floor(density * k))
    count = 1 if n is None else n
    codes = np.zeros((count, k))
    for i in range(count):
        support = rng.choice(k, size=nnz, replace=False)
        codes[i, np.sort(support)] = rng.uniform(0.5, 1.5, size=nnz)
    return codes[0] if n is None else codes


def sparse_signals(d: int, k: int, n: int, coherence: float, density: float, noise: float,
                   seed: int, orthonormal: bool = False) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dictionary, codes, signals) with signals = codes D^T + noise."""
    dictionary = dictionary_gen(d, k, coherence, seed, orthonormal)
    codes = sparse_code_gen(k, density, seed + 1, n=n)
    rng = np.random.default_rng(seed + 2)
    signals = codes @ dictionary.T + noise * rng.standard_normal((n, d))
    return dictionary, codes, signals


@dataclass
class SyntheticDepthTask:
    """Piecewise-planar depth maps with a random set of observed pixels per map."""

    depth: np.ndarray
    mask: np.ndarray
    observed: np.ndarray
    mask_density: float
    noise: float

    def __len__(self) -> int:
        return len(self.depth)

    def to_dataset(self) -> Dataset:
        """Inputs (sparse depth, mask) as 2 channels; targets and output constraints as 1 channel."""
        inputs = np.stack([self.observed, self.mask.astype(np.float64)], axis=1)
        return Dataset(
            inputs,
            self.depth[:, None],
            masks=self.mask[:, None],
            values=self.observed[:, None],
        )


def depth_field_gen(h: int, w: int, patches: int, mask_density: float, noise: float, seed: int,
                    n: int = 1) -> SyntheticDepthTask:
    """Base plane plus ``patches`` random rectangles carrying their own planes.

    Exactly floor(mask_density * h * w) pixels are observed per map; observed
    values equal the ground truth when ``noise`` is 0.
    """
    if not 0.0 < mask_density < 1.0:
        raise UsageError(f"mask_density must lie in (0, 1), got {mask_density}")
    if h < 2 or w < 2:
        raise UsageError(f"depth fields need at least 2x2 pixels, got {h}x{w}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    count = int(np.floor(mask_density * h * w))
    depth = np.empty((n, h, w))
    mask = np.zeros((n, h, w), dtype=bool)
    for i in range(n):
        field = _plane(rng, yy, xx, base=2.0)
        for _ in range(patches):
            top, left = rng.integers(0, h - 1), rng.integers(0, w - 1)
            bottom = rng.integers(top + 1, h + 1)
            right = rng.integers(left + 1, w + 1)
            field[top:bottom, left:right] = _plane(rng, yy, xx, base=1.0 + rng.uniform())[top:bottom, left:right]
        depth[i] = field
        mask[i].flat[rng.choice(h * w, size=count, replace=False)] = True
    observed = np.where(mask, depth + noise * rng.standard_normal(depth.shape), 0.0)
    return SyntheticDepthTask(depth, mask, observed, mask_density, noise)


def _plane(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, base: float) -> np.ndarray:
    slope_y, slope_x = rng.uniform(-0.5, 0.5, size=2)
    return base + slope_y * yy + slope_x * xx


def prototype_gen(n: int, shape: Tuple[int, ...], classes: int, noise: float, seed: int) -> Dataset:
    """Class prototypes plus Gaussian noise; targets are integer labels."""
    if classes < 2:
        raise UsageError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    prototypes = np.abs(rng.standard_normal((classes,) + tuple(shape)))
    labels = rng.integers(0, classes, size=n)
    inputs = prototypes[labels] + noise * rng.standard_normal((n,) + tuple(shape))
    return Dataset(inputs, labels)


def linear_gen(d: int, k: int, n: int, noise: float, seed: int) -> Tuple[Dataset, np.ndarray]:
    """Consistent linear regression data y = M^T x (+ noise); returns the data and M."""
    rng = np.random.default_rng(seed)
    mapping = rng.standard_normal((d, k)) / np.sqrt(d)
    inputs = rng.standard_normal((n, d))
    targets = inputs @ mapping + noise * rng.standard_normal((n, k))
    return Dataset(inputs, targets), mapping
