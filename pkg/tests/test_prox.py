import numpy as np
import pytest

from deepca.core.errors import DimensionError
from deepca.models.penalty import PenaltySpec
from deepca.services.oracle import prox_grid_oracle
from deepca.services.prox import penalty_value, prox, unbroadcast


def _spec(kind: str, shape, rng=None):
    if kind == "nonneg_l1":
        bias = rng.uniform(0.0, 1.0, size=shape) if rng is not None else np.full(shape, 0.5)
        return PenaltySpec.nonneg_l1(bias, shape)
    if kind == "nonneg":
        return PenaltySpec.nonneg(shape)
    if kind == "simplex":
        return PenaltySpec.simplex(shape)
    if kind == "equality":
        return PenaltySpec.equality(shape, [0], [0.25])
    return PenaltySpec.none(shape)


class TestExamples:
    def test_biased_relu(self):
        spec = PenaltySpec.nonneg_l1([1.0, 1.0, 1.0], (3,))
        np.testing.assert_array_equal(prox(spec, [3.0, -1.0, 0.5]), [2.0, 0.0, 0.0])

    def test_simplex_vertex_and_feasible(self):
        spec = PenaltySpec.simplex((2,))
        np.testing.assert_allclose(prox(spec, [2.0, 0.0]), [1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(prox(spec, [0.3, 0.7]), [0.3, 0.7], atol=1e-15)

    def test_simplex_shared_support(self):
        spec = PenaltySpec.simplex((3,))
        np.testing.assert_allclose(prox(spec, [0.6, 0.6, 0.1]), [0.5, 0.5, 0.0], atol=1e-12)

    def test_equality_projection(self):
        spec = PenaltySpec.equality((3,), [1], [9.0])
        np.testing.assert_array_equal(prox(spec, [1.0, 2.0, 3.0]), [1.0, 9.0, 3.0])

    def test_unbound_equality_is_identity(self):
        spec = PenaltySpec.equality((3,))
        np.testing.assert_array_equal(prox(spec, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])

    def test_none_is_identity(self):
        np.testing.assert_array_equal(prox(PenaltySpec.none((2,)), [-4.0, 5.0]), [-4.0, 5.0])

    @pytest.mark.parametrize("kind", ["nonneg_l1", "nonneg"])
    def test_zero_maps_to_zero(self, kind):
        spec = _spec(kind, (3,))
        np.testing.assert_array_equal(prox(spec, np.zeros(3)), np.zeros(3))

    def test_zero_bias_keeps_nonnegative_input(self, rng):
        v = np.abs(rng.standard_normal(6))
        np.testing.assert_array_equal(prox(PenaltySpec.nonneg_l1(np.zeros(6), (6,)), v), v)

    def test_channel_bias_broadcasts(self):
        spec = PenaltySpec.nonneg_l1(np.array([[[1.0]], [[2.0]]]), (2, 1, 2))
        out = prox(spec, np.full((2, 1, 2), 3.0))
        np.testing.assert_array_equal(out, [[[2.0, 2.0]], [[1.0, 1.0]]])

    def test_per_example_equality(self):
        spec = PenaltySpec.equality((3,)).bind([[True, False, False], [False, False, True]],
                                               [[7.0, 0.0, 0.0], [0.0, 0.0, 8.0]])
        out = prox(spec, np.ones((2, 3)))
        np.testing.assert_array_equal(out, [[7.0, 1.0, 1.0], [1.0, 1.0, 8.0]])


class TestPenaltyValue:
    def test_weighted_l1(self):
        spec = PenaltySpec.nonneg_l1([1.0, 0.5], (2,))
        assert penalty_value(spec, [1.0, 2.0]) == 2.0

    def test_negative_coefficient_is_infeasible(self):
        spec = PenaltySpec.nonneg_l1([1.0, 0.5], (2,))
        assert penalty_value(spec, [-0.1, 0.0]) == float("inf")

    def test_indicators(self):
        assert penalty_value(PenaltySpec.nonneg((2,)), [0.0, 1.0]) == 0.0
        assert penalty_value(PenaltySpec.simplex((2,)), [0.25, 0.75]) == 0.0
        assert penalty_value(PenaltySpec.simplex((2,)), [0.5, 0.75]) == float("inf")
        spec = PenaltySpec.equality((3,), [1], [9.0])
        assert penalty_value(spec, [5.0, 9.0, -1.0]) == 0.0
        assert penalty_value(spec, [5.0, 8.0, -1.0]) == float("inf")
        assert penalty_value(PenaltySpec.none((2,)), [-3.0, 3.0]) == 0.0


class TestProxProperties:
    @pytest.mark.parametrize("kind", ["nonneg_l1", "nonneg", "simplex", "equality", "none"])
    def test_no_grid_point_does_better(self, kind):
        """prox(v) attains a value no larger than the best point on a 1e-3 grid."""
        rng = np.random.default_rng(7)
        for _ in range(100):
            dim = int(rng.integers(1, 4))
            spec = _spec(kind, (dim,), rng)
            v = rng.uniform(-2.0, 2.0, size=dim)
            u = prox(spec, v)
            value = 0.5 * float(np.sum((v - u) ** 2)) + penalty_value(spec, u)
            _, grid_value = prox_grid_oracle(spec, v)
            assert value <= grid_value + 1e-6

    def test_simplex_output_is_feasible(self, rng):
        spec = PenaltySpec.simplex((10,))
        for _ in range(50):
            u = prox(spec, 3.0 * rng.standard_normal(10))
            assert abs(u.sum() - 1.0) <= 1e-12
            assert np.all(u >= 0)

    @pytest.mark.parametrize("kind", ["nonneg_l1", "nonneg", "simplex", "equality", "none"])
    def test_nonexpansive(self, rng, kind):
        spec = _spec(kind, (3,), rng)
        for _ in range(100):
            u, v = rng.standard_normal(3), rng.standard_normal(3)
            assert np.linalg.norm(prox(spec, u) - prox(spec, v)) <= np.linalg.norm(u - v) + 1e-12

    @pytest.mark.parametrize("kind", ["nonneg", "simplex", "equality", "none"])
    def test_projections_are_idempotent(self, rng, kind):
        spec = _spec(kind, (4,), rng)
        for _ in range(20):
            once = prox(spec, rng.standard_normal(4))
            np.testing.assert_array_equal(prox(spec, once), once)

    def test_batched_matches_per_example(self, rng):
        spec = _spec("simplex", (5,))
        batch = rng.standard_normal((4, 5))
        out = prox(spec, batch)
        for i in range(4):
            np.testing.assert_array_equal(out[i], prox(spec, batch[i]))


class TestValidation:
    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            prox(PenaltySpec.nonneg((3,)), np.zeros(4))

    def test_negative_bias_rejected(self):
        with pytest.raises(DimensionError):
            PenaltySpec.nonneg_l1([0.5, -0.1], (2,))

    def test_bias_must_broadcast(self):
        with pytest.raises(DimensionError):
            PenaltySpec.nonneg_l1(np.ones(3), (2,))

    def test_equality_indices_increasing(self):
        with pytest.raises(DimensionError):
            PenaltySpec.equality((4,), [2, 1], [1.0, 2.0])

    def test_equality_index_range(self):
        with pytest.raises(DimensionError):
            PenaltySpec.equality((4,), [4], [1.0])

    def test_bind_requires_equality(self):
        with pytest.raises(DimensionError):
            PenaltySpec.nonneg((2,)).bind([True, False], [1.0, 0.0])


def test_unbroadcast_sums_shared_axes():
    grad = np.ones((5, 2, 3, 4))
    np.testing.assert_array_equal(unbroadcast(grad, (2, 1, 1)), np.full((2, 1, 1), 60.0))
    assert unbroadcast(grad, ()) == 120.0
