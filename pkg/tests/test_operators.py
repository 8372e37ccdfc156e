import numpy as np
import pytest

from deepca.core.errors import CapacityError, DimensionError
from deepca.models.operators import LinearOperator, apply_adjoint, apply_forward, operator_norm
from deepca.services.oracle import _naive_correlate


def _random_ops(rng):
    yield LinearOperator.dense(rng.standard_normal((5, 7)))
    yield LinearOperator.dense(rng.standard_normal((12, 4)), input_shape=(3, 2, 2))
    yield LinearOperator.conv2d(rng.standard_normal((3, 2, 3, 3)), (2, 6, 6), stride=1, padding=1)
    yield LinearOperator.conv2d(rng.standard_normal((2, 2, 3, 3)), (2, 5, 5), stride=2, padding=1)
    yield LinearOperator.conv2d(rng.standard_normal((1, 1, 2, 2)), (1, 4, 5), stride=1, padding=0)


class TestDense:
    def test_identity(self):
        op = LinearOperator.dense(np.eye(2))
        np.testing.assert_array_equal(apply_forward(op, [3.0, 4.0]), [3.0, 4.0])

    def test_forward_hand_arithmetic(self):
        op = LinearOperator.dense([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(apply_forward(op, [1.0, 1.0]), [3.0, 7.0])

    def test_adjoint_extracts_row(self):
        op = LinearOperator.dense([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(apply_adjoint(op, [1.0, 0.0]), [1.0, 2.0])

    def test_shape_mismatch(self):
        op = LinearOperator.dense(np.ones((3, 2)))
        with pytest.raises(DimensionError):
            apply_forward(op, np.ones(3))
        with pytest.raises(DimensionError):
            apply_adjoint(op, np.ones(2))

    def test_structured_input_shape(self, rng):
        op = LinearOperator.dense(rng.standard_normal((12, 4)), input_shape=(3, 2, 2))
        assert apply_forward(op, np.ones(4)).shape == (3, 2, 2)
        assert apply_adjoint(op, np.ones((3, 2, 2))).shape == (4,)

    def test_bad_input_shape_rejected(self):
        with pytest.raises(DimensionError):
            LinearOperator.dense(np.ones((6, 2)), input_shape=(2, 2))


class TestConv2d:
    def test_diagonal_kernel(self):
        kernel = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
        op = LinearOperator.conv2d(kernel, (1, 2, 2))
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        assert op.output_shape == (1, 1, 1)
        np.testing.assert_array_equal(apply_adjoint(op, x), [[[5.0]]])
        np.testing.assert_array_equal(apply_forward(op, [[[2.0]]]), [[[2.0, 0.0], [0.0, 2.0]]])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_adjoint_matches_loop_convolution(self, rng, stride, padding):
        kernel = rng.standard_normal((3, 2, 3, 3))
        op = LinearOperator.conv2d(kernel, (2, 7, 6), stride, padding)
        v = rng.standard_normal((2, 7, 6))
        expected = _naive_correlate(v, kernel, stride, padding)
        np.testing.assert_allclose(apply_adjoint(op, v), expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
    def test_forward_is_transpose_of_loop_convolution(self, rng, stride, padding):
        kernel = rng.standard_normal((2, 2, 3, 3))
        op = LinearOperator.conv2d(kernel, (2, 5, 5), stride, padding)
        basis = np.eye(op.input_size).reshape((op.input_size,) + op.input_shape)
        columns = [_naive_correlate(e, kernel, stride, padding).ravel() for e in basis]
        naive_adjoint = np.stack(columns, axis=1)
        np.testing.assert_allclose(op.to_dense(), naive_adjoint.T, rtol=0, atol=1e-12)

    def test_output_shape(self):
        op = LinearOperator.conv2d(np.zeros((4, 2, 3, 3)), (2, 28, 28), stride=2, padding=1)
        assert op.output_shape == (4, 14, 14)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            LinearOperator.conv2d(np.zeros((4, 3, 3, 3)), (2, 8, 8))

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            LinearOperator.conv2d(np.zeros((1, 1, 5, 5)), (1, 3, 3))


class TestAdjointness:
    """<B u, v> == <u, B^T v> for every operator kind."""

    def test_inner_product_identity(self, rng):
        for op in _random_ops(rng):
            for _ in range(200):
                u = rng.standard_normal(op.output_shape)
                v = rng.standard_normal(op.input_shape)
                lhs = float(np.sum(apply_forward(op, u) * v))
                rhs = float(np.sum(u * apply_adjoint(op, v)))
                assert abs(lhs - rhs) <= 1e-10 * (1.0 + abs(lhs))

    def test_linearity(self, rng):
        for op in _random_ops(rng):
            u = rng.standard_normal(op.output_shape)
            w = rng.standard_normal(op.output_shape)
            alpha, beta = 0.7, -1.3
            combined = apply_forward(op, alpha * u + beta * w)
            separate = alpha * apply_forward(op, u) + beta * apply_forward(op, w)
            np.testing.assert_allclose(combined, separate, rtol=1e-12, atol=1e-12)

    def test_batched_matches_per_example(self, rng):
        for op in _random_ops(rng):
            batch = rng.standard_normal((3,) + op.input_shape)
            stacked = apply_adjoint(op, batch)
            for i in range(3):
                np.testing.assert_allclose(stacked[i], apply_adjoint(op, batch[i]), rtol=1e-13, atol=1e-13)


class TestMaterialization:
    def test_to_dense_matches_forward(self, rng):
        for op in _random_ops(rng):
            u = rng.standard_normal(op.output_shape)
            np.testing.assert_allclose(
                op.to_dense() @ u.ravel(), apply_forward(op, u).ravel(), rtol=1e-12, atol=1e-12
            )

    def test_capacity_cap(self):
        op = LinearOperator.dense(np.zeros((200, 100)))
        with pytest.raises(CapacityError):
            op.to_dense()
        assert op.to_dense(cap=20_000).shape == (200, 100)

    def test_operator_norm(self):
        matrix = np.zeros((4, 3))
        matrix[0, 0], matrix[1, 1], matrix[2, 2] = 3.0, 1.0, 0.5
        op = LinearOperator.dense(matrix)
        assert operator_norm(op, iters=500) == pytest.approx(3.0, rel=1e-6)
