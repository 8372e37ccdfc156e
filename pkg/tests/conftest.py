import numpy as np
import pytest

from deepca.models.deepca import Layer, Model
from deepca.models.operators import LinearOperator
from deepca.models.penalty import PenaltySpec
from deepca.services.learning import init_dense_weight


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def _penalty(kind: str, shape, bias: float, learnable: bool) -> PenaltySpec:
    if kind == "nonneg_l1":
        return PenaltySpec.nonneg_l1(np.full(shape, bias), shape, learnable=learnable)
    if kind == "nonneg":
        return PenaltySpec.nonneg(shape)
    if kind == "simplex":
        return PenaltySpec.simplex(shape)
    if kind == "equality":
        return PenaltySpec.equality(shape)
    return PenaltySpec.none(shape)


@pytest.fixture
def dense_model():
    """Factory: dense model with layer sizes ``sizes = [d, k1, k2, ...]``."""

    def build(rng, sizes, penalty="nonneg_l1", bias=0.1, T=1, rho=1.0, learnable_bias=False,
              orthonormal=False, last_penalty=None):
        layers = []
        for j, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if orthonormal:
                weight = init_dense_weight(rng, n_in, n_out)
            else:
                weight = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
            kind = last_penalty if last_penalty is not None and j == len(sizes) - 2 else penalty
            layers.append(Layer(LinearOperator.dense(weight), _penalty(kind, (n_out,), bias, learnable_bias)))
        return Model(tuple(layers), T=T, rho=rho)

    return build


@pytest.fixture
def conv_model():
    """Factory: conv2d stack on a (C, H, W) input followed by an optional dense layer."""

    def build(rng, input_shape=(1, 6, 6), channels=(2, 3), kernel=3, stride=1, padding=1, bias=0.05,
              dense_units=None, T=1):
        layers = []
        shape = tuple(input_shape)
        for c in channels:
            weight = rng.standard_normal((c, shape[0], kernel, kernel)) / np.sqrt(shape[0] * kernel * kernel)
            op = LinearOperator.conv2d(weight, shape, stride, padding)
            bias_tensor = np.full((c, 1, 1), bias)
            layers.append(Layer(op, PenaltySpec.nonneg_l1(bias_tensor, op.output_shape)))
            shape = op.output_shape
        if dense_units is not None:
            size = int(np.prod(shape))
            op = LinearOperator.dense(rng.standard_normal((size, dense_units)) / np.sqrt(size), input_shape=shape)
            layers.append(Layer(op, PenaltySpec.nonneg_l1(np.full((dense_units,), bias), (dense_units,))))
        return Model(tuple(layers), T=T)

    return build
