import numpy as np
import pytest

from deepca.core.errors import UsageError
from deepca.models.deepca import InferenceState, Layer, Model
from deepca.models.operators import LinearOperator
from deepca.models.penalty import PenaltySpec
from deepca.services import admm
from deepca.services.autodiff import GramSolver
from deepca.services.learning import init_dense_weight
from deepca.services.objective import augmented_lagrangian, objective
from deepca.services.oracle import feed_forward_reference, proximal_gradient_solve, reference_ls_solve


def _scalar_layers(count: int = 1):
    return tuple(Layer(LinearOperator.dense([[1.0]]), PenaltySpec.none((1,))) for _ in range(count))


def _scalar_state(x, z, lam, w=0.0):
    return InferenceState(np.array([x]), w=[np.array([w])], z=[np.array([z])], lam=[np.array([lam])])


class TestFeedForwardInit:
    def test_identity(self):
        model = Model((Layer(LinearOperator.dense(np.eye(2)), PenaltySpec.none((2,))),))
        state = admm.feed_forward_init(model, [2.0, 3.0])
        np.testing.assert_array_equal(state.w[0], [2.0, 3.0])
        np.testing.assert_array_equal(state.z[0], [2.0, 3.0])
        np.testing.assert_array_equal(state.lam[0], [0.0, 0.0])

    def test_biased_relu(self):
        model = Model((Layer(LinearOperator.dense(np.eye(2)), PenaltySpec.nonneg_l1([1.0, 1.0], (2,))),))
        state = admm.feed_forward_init(model, [2.0, -3.0])
        np.testing.assert_array_equal(state.w[0], [2.0, -3.0])
        np.testing.assert_array_equal(state.z[0], [1.0, 0.0])

    def test_single_iteration_is_feed_forward_network(self, dense_model, conv_model):
        """f^[1] equals an independent loop-based feed-forward evaluator."""
        rng = np.random.default_rng(5)
        for i in range(50):
            if i % 2:
                depth = int(rng.integers(1, 4))
                sizes = [int(n) for n in rng.integers(2, 9, size=depth + 1)]
                model = dense_model(rng, sizes, bias=0.1)
                x = rng.standard_normal(sizes[0])
            else:
                channels = tuple(int(c) for c in rng.integers(1, 3, size=int(rng.integers(1, 3))))
                model = conv_model(rng, input_shape=(1, 5, 5), channels=channels,
                                   stride=int(rng.integers(1, 3)), dense_units=3)
                x = rng.standard_normal((1, 5, 5))
            state = admm.infer(model, x, T=1)
            reference = feed_forward_reference(model, x)
            for z, a in zip(state.z, reference):
                np.testing.assert_allclose(z, a, rtol=0, atol=1e-12)


class TestWUpdate:
    def test_exact_scalar(self):
        w = admm.w_update_exact(_scalar_layers(), 0, _scalar_state(x=2.0, z=1.0, lam=0.0), rho=1.0)
        np.testing.assert_allclose(w, [1.5], atol=1e-15)

    def test_parseval_scalar(self):
        w = admm.w_update_parseval(_scalar_layers(), 0, _scalar_state(x=2.0, z=1.0, lam=0.0), rho=1.0)
        np.testing.assert_allclose(w, [1.5], atol=1e-15)

    def test_parseval_scalar_with_dual(self):
        w = admm.w_update_parseval(_scalar_layers(), 0, _scalar_state(x=2.0, z=1.0, lam=0.5), rho=1.0)
        np.testing.assert_allclose(w, [1.25], atol=1e-15)

    def test_exact_matches_gaussian_elimination(self, rng):
        weight = rng.standard_normal((4, 6))
        layers = (Layer(LinearOperator.dense(weight), PenaltySpec.none((6,))),)
        rho = 0.7
        state = InferenceState(rng.standard_normal(4), w=[np.zeros(6)], z=[rng.standard_normal(6)],
                               lam=[rng.standard_normal(6)])
        w = admm.w_update_exact(layers, 0, state, rho)
        system = weight.T @ weight + rho * np.eye(6)
        rhs = weight.T @ state.x + rho * state.z[0] - state.lam[0]
        np.testing.assert_allclose(w, reference_ls_solve(system, rhs), rtol=0, atol=1e-9)

    def test_large_rho_limit(self, rng):
        weight = rng.standard_normal((4, 6))
        layers = (Layer(LinearOperator.dense(weight), PenaltySpec.none((6,))),)
        rho = 1e6
        state = InferenceState(rng.standard_normal(4), w=[np.zeros(6)], z=[rng.standard_normal(6)],
                               lam=[rng.standard_normal(6)])
        w = admm.w_update_exact(layers, 0, state, rho)
        np.testing.assert_allclose(w, state.z[0] - state.lam[0] / rho, rtol=0, atol=1e-4)

    def test_parseval_equals_exact_for_orthonormal_rows(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            d = int(rng.integers(2, 8))
            k = int(rng.integers(d, 2 * d + 1))
            weight = init_dense_weight(rng, d, k)
            np.testing.assert_allclose(weight @ weight.T, np.eye(d), atol=1e-12)
            layers = (Layer(LinearOperator.dense(weight), PenaltySpec.none((k,))),)
            rho = float(rng.uniform(0.1, 10.0))
            state = InferenceState(rng.standard_normal(d), w=[np.zeros(k)], z=[rng.standard_normal(k)],
                                   lam=[rng.standard_normal(k)])
            exact = admm.w_update_exact(layers, 0, state, rho)
            parseval = admm.w_update_parseval(layers, 0, state, rho)
            np.testing.assert_allclose(parseval, exact, rtol=0, atol=1e-9)


class TestZUpdate:
    def test_last_layer(self):
        state = _scalar_state(x=0.0, z=0.0, lam=0.5, w=2.0)
        z = admm.z_update(_scalar_layers(), 0, state, rho=2.0)
        np.testing.assert_allclose(z, [2.25], atol=1e-15)

    def test_hidden_layer_averages_feedback(self):
        layers = _scalar_layers(2)
        state = InferenceState(np.array([0.0]), w=[np.array([0.0]), np.array([2.0])],
                               z=[np.array([0.0]), np.array([0.0])], lam=[np.zeros(1), np.zeros(1)])
        z = admm.z_update(layers, 0, state, rho=1.0)
        np.testing.assert_allclose(z, [1.0], atol=1e-15)

    def test_hidden_layer_applies_prox(self):
        layers = (Layer(LinearOperator.dense([[1.0]]), PenaltySpec.nonneg((1,))),) + _scalar_layers(1)
        state = InferenceState(np.array([0.0]), w=[np.array([-1.0]), np.array([-2.0])],
                               z=[np.array([0.0]), np.array([0.0])], lam=[np.zeros(1), np.zeros(1)])
        np.testing.assert_array_equal(admm.z_update(layers, 0, state, rho=1.0), [0.0])


class TestDualUpdate:
    def test_violation(self):
        lam = admm.dual_update(_scalar_layers(), 0, _scalar_state(x=0.0, z=1.5, lam=0.0, w=2.0), rho=1.0)
        np.testing.assert_allclose(lam, [0.5], atol=1e-15)

    def test_consensus_keeps_dual(self):
        lam = admm.dual_update(_scalar_layers(), 0, _scalar_state(x=0.0, z=2.0, lam=0.3, w=2.0), rho=1.0)
        np.testing.assert_array_equal(lam, [0.3])

    def test_accumulates(self):
        state = _scalar_state(x=0.0, z=1.0, lam=0.1, w=1.25)
        rho = 2.0
        for _ in range(2):
            state.lam[0] = admm.dual_update(_scalar_layers(), 0, state, rho)
        np.testing.assert_allclose(state.lam, [[0.1 + 2 * rho * 0.25]], atol=1e-15)


class TestInfer:
    def test_single_iteration_equals_initialization(self, rng, dense_model):
        model = dense_model(rng, [6, 8, 5])
        x = rng.standard_normal(6)
        state = admm.infer(model, x, T=1)
        init = admm.feed_forward_init(model, x)
        for a, b in zip(state.z, init.z):
            np.testing.assert_array_equal(a, b)

    def test_rejects_zero_iterations(self, rng, dense_model):
        with pytest.raises(UsageError):
            admm.infer(dense_model(rng, [3, 4]), np.zeros(3), T=0)

    def test_batched_matches_per_example(self, rng, dense_model):
        model = dense_model(rng, [6, 8, 5], T=7)
        x = rng.standard_normal((3, 6))
        batched = admm.infer(model, x).output
        for i in range(3):
            np.testing.assert_allclose(batched[i], admm.infer(model, x[i]).output, rtol=1e-12, atol=1e-12)

    def test_equality_output_holds_exactly(self, rng, dense_model):
        model = dense_model(rng, [6, 8, 5], last_penalty="equality", T=20)
        model = model.bind_output(np.array([True, False, True, False, False]), np.array([1.5, 0.0, -2.0, 0.0, 0.0]))
        out = admm.infer(model, rng.standard_normal(6)).output
        assert abs(out[0] - 1.5) <= 1e-12
        assert abs(out[2] + 2.0) <= 1e-12

    def test_parseval_and_exact_paths_agree_for_orthonormal_rows(self, rng, dense_model):
        model = dense_model(rng, [5, 8], orthonormal=True, T=15)
        x = rng.standard_normal(5)
        exact = admm.infer(model, x).output
        parseval = admm.infer(Model(model.layers, T=15, w_update="parseval"), x).output
        np.testing.assert_allclose(parseval, exact, rtol=0, atol=1e-9)

    def test_tolerance_stops_early(self):
        model = Model((Layer(LinearOperator.dense(np.eye(3)), PenaltySpec.none((3,))),), T=50)
        trace = []
        admm.infer(model, np.array([1.0, -2.0, 0.5]), tol=1e-8, trace=trace)
        assert max(row.t for row in trace) == 2

    def test_trace_rows(self, rng, dense_model):
        model = dense_model(rng, [4, 6, 3], T=5)
        trace = []
        admm.infer(model, rng.standard_normal(4), trace=trace)
        assert len(trace) == 5 * 2
        assert [(row.t, row.layer) for row in trace[:3]] == [(1, 1), (1, 2), (2, 1)]
        assert all(np.isfinite(row.objective) for row in trace)


class TestConvergence:
    """Single-layer nonneg-l1 models are two-block ADMM and reach the objective minimum."""

    def _instance(self, rng):
        d = int(rng.integers(8, 33))
        k = int(rng.integers(2, d // 2 + 1))
        weight = rng.standard_normal((d, k)) / np.sqrt(d)
        bias = np.full(k, float(rng.uniform(0.05, 0.3)))
        model = Model((Layer(LinearOperator.dense(weight), PenaltySpec.nonneg_l1(bias, (k,))),))
        return model, rng.standard_normal(d)

    def test_matches_proximal_gradient_optimum(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            model, x = self._instance(rng)
            z = admm.infer(model, x, T=500).output
            optimum = proximal_gradient_solve(model, x)
            assert abs(objective(model, x, [z]) - objective(model, x, optimum.ws)) <= 1e-6

    def test_primal_residual_vanishes(self):
        rng = np.random.default_rng(22)
        for _ in range(5):
            model, x = self._instance(rng)
            state = admm.infer(model, x, T=500)
            primal, _ = admm.residuals(model, state)[0]
            assert primal < 1e-6

    def test_fixed_point_is_optimal(self):
        model, x = self._instance(np.random.default_rng(23))
        z = admm.infer(model, x, T=3000).output
        optimum = proximal_gradient_solve(model, x)
        assert abs(objective(model, x, [z]) - objective(model, x, optimum.ws)) <= 1e-8

    def test_residuals_are_zero_at_consensus(self, rng, dense_model):
        model = dense_model(rng, [3, 4])
        z = np.abs(rng.standard_normal(4))
        state = InferenceState(rng.standard_normal(3), w=[z.copy()], z=[z], lam=[np.zeros(4)])
        assert admm.residuals(model, state)[0][0] == 0.0


class TestAugmentedLagrangian:
    """A sweep minimizes the augmented Lagrangian block by block on one-layer models."""

    def _random_state(self, rng, d, k, consensus):
        z = np.abs(rng.standard_normal(k))
        w = z.copy() if consensus else rng.standard_normal(k)
        return InferenceState(rng.standard_normal(d), w=[w], z=[z], lam=[rng.standard_normal(k)])

    def test_sweep_lowers_value_from_consensus(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            d, k = int(rng.integers(3, 9)), int(rng.integers(2, 9))
            model = Model((Layer(LinearOperator.dense(rng.standard_normal((d, k))),
                                 PenaltySpec.nonneg_l1(np.full(k, 0.1), (k,))),), rho=1.0)
            state = self._random_state(rng, d, k, consensus=True)
            before = augmented_lagrangian(model, state)
            admm.sweep(model, state, {0: GramSolver(model.layers[0].op, model.rho)})
            assert augmented_lagrangian(model, state) < before

    def test_primal_updates_never_raise_value(self):
        rng = np.random.default_rng(32)
        for _ in range(20):
            d, k = int(rng.integers(3, 9)), int(rng.integers(2, 9))
            model = Model((Layer(LinearOperator.dense(rng.standard_normal((d, k))),
                                 PenaltySpec.nonneg_l1(np.full(k, 0.1), (k,))),), rho=1.0)
            state = self._random_state(rng, d, k, consensus=False)
            state.lam[0] = admm.dual_update(model.layers, 0, state, model.rho)
            after_dual = augmented_lagrangian(model, state)
            state.w[0] = admm.w_update_exact(model.layers, 0, state, model.rho)
            after_w = augmented_lagrangian(model, state)
            state.z[0] = admm.z_update(model.layers, 0, state, model.rho)
            after_z = augmented_lagrangian(model, state)
            assert after_w <= after_dual + 1e-10
            assert after_z <= after_w + 1e-10


class TestResidualTrend:
    """Fifty sweeps on one-layer nonneg-l1 models."""

    def _run(self, rng, sweeps=50):
        d = int(rng.integers(8, 17))
        k = int(rng.integers(2, d // 2 + 1))
        weight = rng.standard_normal((d, k)) / np.sqrt(d)
        model = Model((Layer(LinearOperator.dense(weight), PenaltySpec.nonneg_l1(np.full(k, 0.2), (k,))),), rho=1.0)
        state = admm.feed_forward_init(model, rng.standard_normal(d))
        solvers = {0: GramSolver(model.layers[0].op, model.rho)}
        primal = [admm.residuals(model, state)[0][0]]
        combined = []
        for _ in range(sweeps):
            previous = np.array(state.z[0], copy=True)
            admm.sweep(model, state, solvers)
            primal.append(admm.residuals(model, state)[0][0])
            dz = state.z[0] - previous
            combined.append(model.rho * (float(dz @ dz) + primal[-1] ** 2))
        return primal, combined

    def test_combined_residual_never_increases(self):
        rng = np.random.default_rng(41)
        for _ in range(10):
            _, combined = self._run(rng)
            for a, b in zip(combined, combined[1:]):
                assert b <= a * (1 + 1e-9) + 1e-14

    def test_primal_residual_trends_down(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            primal, _ = self._run(rng)
            assert max(primal[-5:]) <= max(primal[:5]) + 1e-8
