"""Slow reference solvers and checkers.

Nothing here touches the ADMM or autodiff code paths: the solvers work on the
stacked shallow form of the objective, the feed-forward evaluator and trainer
use hand-written loops and explicit backpropagation.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from ..core.errors import CapacityError, DimensionError, NumericalError, UsageError
from ..models.dataset import Dataset
from ..models.deepca import Model
from ..models.penalty import PenaltySpec
from ..models.tensor import as_tensor, count_nonzero
from ..schemas.training import TrainConfig
from .objective import StackedSystem, build_stacked_system, stacked_objective
from .prox import penalty_value, prox

logger = logging.getLogger(__name__)

LIPSCHITZ_SAFETY = 1.1
NONZERO_EPS = 1e-10
GRID_DIM_CAP = 3


def power_iteration(matrix: np.ndarray, iters: int = 500, seed: int = 0) -> float:
    """Largest eigenvalue of matrix^T matrix."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(matrix.shape[1])
    u /= np.linalg.norm(u)
    value = 0.0
    for _ in range(iters):
        u_next = matrix.T @ (matrix @ u)
        norm = float(np.linalg.norm(u_next))
        if norm == 0.0:
            return 0.0
        u = u_next / norm
        if abs(norm - value) <= 1e-12 * norm:
            return norm
        value = norm
    return value


# ---------------------------------------------------------------- stacked solver


@dataclass
class ProxGradResult:
    ws: List[np.ndarray]
    objectives: List[float]
    step_size: float


def _scaled_prox(spec: PenaltySpec, v: np.ndarray, step: float) -> np.ndarray:
    """prox of step * Phi."""
    if spec.kind == "nonneg_l1":
        return prox(spec.with_bias(step * np.asarray(spec.bias)), v)
    return prox(spec, v)


def proximal_gradient_solve(
    model: Model,
    x,
    steps: int = 20000,
    step_size: Optional[float] = None,
    tol: float = 1e-12,
    cap: Optional[int] = None,
    system: Optional[StackedSystem] = None,
) -> ProxGradResult:
    """Monotone accelerated proximal gradient on 1/2 ||[x; 0] - A w||^2 + sum_j Phi_j(w_j).

    The default step is 1 / (1.1 L) with L estimated by power iteration on A.
    """
    system = system if system is not None else build_stacked_system(model, cap)
    x = as_tensor(x)
    if x.shape != tuple(model.input_shape):
        raise DimensionError(f"oracle solves one example of shape {model.input_shape}, got {x.shape}")
    lipschitz = power_iteration(system.matrix)
    if step_size is None:
        step_size = 1.0 / (LIPSCHITZ_SAFETY * lipschitz) if lipschitz > 0 else 1.0
    elif lipschitz > 0 and step_size > 1.0 / lipschitz:
        raise UsageError(f"step size {step_size} exceeds 1/L = {1.0 / lipschitz}")
    target = system.target(x)
    A = system.matrix
    penalties = [layer.penalty for layer in model.layers]

    def prox_all(vec: np.ndarray) -> np.ndarray:
        return system.stack([_scaled_prox(p, w, step_size) for p, w in zip(penalties, system.split(vec))])

    def value(vec: np.ndarray) -> float:
        return stacked_objective(model, system, x, system.split(vec))

    current = prox_all(np.zeros(A.shape[1]))
    best = value(current)
    objectives = [best]
    extrap, t = current.copy(), 1.0
    for _ in range(steps):
        point = extrap
        candidate = prox_all(point - step_size * (A.T @ (A @ point - target)))
        cand_value = value(candidate)
        previous = current
        if cand_value <= best:
            current, best = candidate, cand_value
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        extrap = current + (t / t_next) * (candidate - current) + ((t - 1.0) / t_next) * (current - previous)
        t = t_next
        objectives.append(best)
        # a prox-gradient step that does not move marks a fixed point
        if np.linalg.norm(candidate - point) <= tol * max(1.0, np.linalg.norm(current)):
            break
    logger.debug(f"proximal gradient stopped after {len(objectives) - 1} steps at objective {best:.12g}")
    return ProxGradResult(system.split(current), objectives, step_size)


# ---------------------------------------------------------------- linear algebra


def reference_ls_solve(A, b) -> np.ndarray:
    """Gaussian elimination with partial pivoting; ``b`` may hold several right-hand sides."""
    A = np.array(as_tensor(A), copy=True)
    b = np.array(as_tensor(b), copy=True)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n or b.shape[0] != n:
        raise DimensionError(f"need a square system, got A {A.shape} and b {b.shape}")
    vector = b.ndim == 1
    rhs = b.reshape(n, -1)
    scale = max(float(np.max(np.abs(A))), 1e-300)
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(A[col:, col])))
        if abs(A[pivot, col]) <= 1e-14 * scale:
            raise NumericalError(f"matrix is singular to working precision at column {col}")
        if pivot != col:
            A[[col, pivot]] = A[[pivot, col]]
            rhs[[col, pivot]] = rhs[[pivot, col]]
        for row in range(col + 1, n):
            factor = A[row, col] / A[col, col]
            A[row, col:] -= factor * A[col, col:]
            rhs[row] -= factor * rhs[col]
    solution = np.zeros_like(rhs)
    for row in range(n - 1, -1, -1):
        solution[row] = (rhs[row] - A[row, row + 1:] @ solution[row + 1:]) / A[row, row]
    return solution[:, 0] if vector else solution


# ---------------------------------------------------------------- prox grid


def prox_grid_oracle(spec: PenaltySpec, v, grid_step: float = 1e-3, margin: float = 1.0) -> Tuple[np.ndarray, float]:
    """Exhaustive grid minimizer of 1/2 ||v - u||^2 + Phi(u) and its value.

    Separable penalties are searched coordinate by coordinate (exact for a
    product grid); the simplex is searched over its own grid.
    """
    v = as_tensor(v)
    if v.shape != tuple(spec.shape):
        raise DimensionError(f"grid oracle expects shape {spec.shape}, got {v.shape}")
    if v.size > GRID_DIM_CAP:
        raise CapacityError(f"grid oracle handles at most {GRID_DIM_CAP} coordinates, got {v.size}")
    flat = v.ravel()
    if spec.kind == "simplex":
        best = _simplex_grid(flat, grid_step)
    else:
        best = np.array([_coordinate_grid(spec, flat, i, grid_step, margin) for i in range(flat.size)])
    best = best.reshape(v.shape)
    return best, 0.5 * float(np.sum((v - best) ** 2)) + penalty_value(spec, best)


def _coordinate_grid(spec: PenaltySpec, v: np.ndarray, i: int, step: float, margin: float) -> float:
    if spec.kind == "equality" and spec.is_bound and spec.mask.ravel()[i]:
        return float(spec.values.ravel()[i])
    lo, hi = min(0.0, v[i]) - margin, max(0.0, v[i]) + margin
    if spec.kind in ("nonneg_l1", "nonneg"):
        lo = 0.0
    grid = np.floor(lo / step) * step + step * np.arange(int(np.ceil((hi - lo) / step)) + 2)
    if spec.kind in ("nonneg_l1", "nonneg"):
        grid = grid[grid >= 0.0]
    cost = 0.5 * (grid - v[i]) ** 2
    if spec.kind == "nonneg_l1":
        cost = cost + float(np.broadcast_to(spec.bias, spec.shape).ravel()[i]) * grid
    return float(grid[np.argmin(cost)])


def _simplex_grid(v: np.ndarray, step: float) -> np.ndarray:
    n = int(round(1.0 / step))
    p = v.size
    if p == 1:
        return np.ones(1)
    ticks = np.arange(n + 1)
    if p == 2:
        points = np.stack([ticks, n - ticks], axis=1)
    else:
        a, b = np.meshgrid(ticks, ticks, indexing="ij")
        keep = a + b <= n
        points = np.stack([a[keep], b[keep], n - a[keep] - b[keep]], axis=1)
    points = points / n
    cost = 0.5 * np.sum((points - v) ** 2, axis=1)
    return points[np.argmin(cost)]


# ---------------------------------------------------------------- finite differences


def finite_difference_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """(f(theta + h e_i) - f(theta - h e_i)) / 2h for every coordinate."""
    if not h > 0:
        raise UsageError(f"finite-difference step must be > 0, got {h}")
    theta = np.array(as_tensor(theta), copy=True)
    grad = np.zeros_like(theta)
    flat, out = theta.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = f(theta)
        flat[i] = saved - h
        minus = f(theta)
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * h)
    return grad


# ---------------------------------------------------------------- explaining away


@dataclass
class ExplainingAwayStats:
    ff_sparsity: int
    opt_sparsity: int
    ff_error: float
    opt_error: float
    opt_penalty: float


def nonneg_lasso(dictionary: np.ndarray, x: np.ndarray, b: float, steps: int = 20000,
                 tol: float = 1e-13) -> np.ndarray:
    """min_c 1/2 ||x - D c||^2 + b sum(c), c >= 0, by monotone accelerated proximal gradient."""
    step = 1.0 / (LIPSCHITZ_SAFETY * power_iteration(dictionary))
    gram, corr = dictionary.T @ dictionary, dictionary.T @ x

    def value(c):
        r = x - dictionary @ c
        return 0.5 * float(r @ r) + b * float(np.sum(c))

    current = np.maximum(0.0, step * (corr - b))
    best = value(current)
    extrap, t = current.copy(), 1.0
    for _ in range(steps):
        point = extrap
        candidate = np.maximum(0.0, point - step * (gram @ point - corr) - step * b)
        cand_value = value(candidate)
        previous = current
        if cand_value <= best:
            current, best = candidate, cand_value
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        extrap = current + (t / t_next) * (candidate - current) + ((t - 1.0) / t_next) * (current - previous)
        t = t_next
        if np.linalg.norm(candidate - point) <= tol * max(1.0, np.linalg.norm(current)):
            break
    return current


def explaining_away_stats(dictionary, images, b: float, bisection_steps: int = 40) -> List[ExplainingAwayStats]:
    """Feed-forward thresholded codes vs optimized nonnegative-l1 codes, per image.

    When the optimized codes reconstruct worse than the feed-forward ones, the
    l1 weight is lowered by bisection to the largest value whose error matches.
    """
    dictionary = as_tensor(dictionary)
    norms = np.linalg.norm(dictionary, axis=0)
    if not np.allclose(norms, 1.0, atol=1e-8):
        raise UsageError("dictionary columns must have unit norm")
    images = as_tensor(images)
    if images.ndim == 1:
        images = images[None]
    results = []
    for x in images:
        ff = np.maximum(0.0, dictionary.T @ x - b)
        ff_error = float(np.linalg.norm(x - dictionary @ ff))
        matched = ff_error * (1.0 + 1e-9) + 1e-12
        weight = b
        opt = nonneg_lasso(dictionary, x, weight)
        opt_error = float(np.linalg.norm(x - dictionary @ opt))
        if opt_error > matched:
            lo, hi = 0.0, b
            opt = nonneg_lasso(dictionary, x, lo)
            weight = lo
            for _ in range(bisection_steps):
                mid = 0.5 * (lo + hi)
                trial = nonneg_lasso(dictionary, x, mid)
                if np.linalg.norm(x - dictionary @ trial) <= matched:
                    lo, opt, weight = mid, trial, mid
                else:
                    hi = mid
            opt_error = float(np.linalg.norm(x - dictionary @ opt))
        results.append(ExplainingAwayStats(
            count_nonzero(ff, NONZERO_EPS), count_nonzero(opt, NONZERO_EPS), ff_error, opt_error, weight,
        ))
    return results


# ---------------------------------------------------------------- plain feed-forward network


def _activation(spec: PenaltySpec, pre: np.ndarray) -> np.ndarray:
    if spec.kind == "nonneg_l1":
        return np.maximum(0.0, pre - spec.bias)
    if spec.kind == "nonneg":
        return np.maximum(0.0, pre)
    if spec.kind == "none":
        return pre.copy()
    raise UsageError(f"feed-forward reference supports biased ReLU layers only, not {spec.kind}")


def _naive_correlate(x: np.ndarray, kernel: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """out[o, i, j] = sum_{c, a, b} K[o, c, a, b] x_pad[c, i s + a, j s + b], by loops."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for a in range(kh):
                        for bb in range(kw):
                            acc += kernel[o, c, a, bb] * xp[c, i * stride + a, j * stride + bb]
                out[o, i, j] = acc
    return out


def feed_forward_reference(model: Model, x) -> List[np.ndarray]:
    """a_j = phi_j(B_j^T a_{j-1}) for a single example; returns every a_j."""
    a = as_tensor(x)
    outputs = []
    for layer in model.layers:
        op = layer.op
        if op.kind == "dense":
            flat = a.reshape(-1)
            pre = np.array([sum(flat[r] * op.weight[r, c] for r in range(flat.size)) for c in range(op.weight.shape[1])])
        else:
            pre = _naive_correlate(a, op.weight, op.stride, op.padding)
        a = _activation(layer.penalty, pre.reshape(op.output_shape))
        outputs.append(a)
    return outputs


@dataclass
class ReferenceTrainResult:
    params: dict
    epoch_losses: List[float]


def feed_forward_train(model: Model, dataset: Dataset, config: TrainConfig) -> ReferenceTrainResult:
    """Minibatch momentum SGD on a dense biased-ReLU network with hand-written backprop.

    Mirrors the ADNN trainer at T=1: same data order, mean minibatch loss,
    momentum update and bias clamping.
    """
    if any(layer.op.kind != "dense" for layer in model.layers):
        raise UsageError("feed-forward reference trainer supports dense layers only")
    weights = [np.array(layer.op.weight, copy=True) for layer in model.layers]
    specs = [layer.penalty for layer in model.layers]
    biases = [np.array(s.bias, copy=True) if s.kind == "nonneg_l1" else None for s in specs]
    learn_w = [layer.op.learnable for layer in model.layers]
    learn_b = [
        (config.learn_bias if config.learn_bias is not None else s.learnable) if s.kind == "nonneg_l1" else False
        for s in specs
    ]
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) if b is not None else None for b in biases]
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = dataset.inputs[idx]
            m = len(idx)
            acts = [x.reshape(m, -1)]
            for w, b, s in zip(weights, biases, specs):
                pre = acts[-1] @ w
                if s.kind == "nonneg_l1":
                    acts.append(np.maximum(0.0, pre - b))
                elif s.kind == "nonneg":
                    acts.append(np.maximum(0.0, pre))
                elif s.kind == "none":
                    acts.append(pre)
                else:
                    raise UsageError(f"feed-forward reference trainer cannot handle {s.kind} layers")
            g_w = [np.zeros_like(w) for w in weights]
            g_b = [np.zeros_like(b) if b is not None else None for b in biases]
            if config.objective == "reconstruction":
                recon = [acts[-1]]
                for w in reversed(weights):
                    recon.append(recon[-1] @ w.T)
                diff = recon[-1] - acts[0]
                loss = (1.0 / m) * (0.5 * float(np.sum(diff * diff)))
                g = (1.0 / m) * diff
                for j in range(len(weights)):
                    code = recon[len(weights) - 1 - j]
                    g_w[j] = g_w[j] + g.T @ code
                    g = g @ weights[j]
            else:
                diff = acts[-1] - dataset.targets[idx].reshape(m, -1)
                loss = (1.0 / m) * (0.5 * float(np.sum(diff * diff)))
                g = (1.0 / m) * diff
            for j in range(len(weights) - 1, -1, -1):
                if specs[j].kind in ("nonneg_l1", "nonneg"):
                    g = np.where(acts[j + 1] > 0, g, 0.0)
                if biases[j] is not None:
                    g_b[j] = -np.sum(g, axis=0).reshape(biases[j].shape) if biases[j].ndim else -np.sum(g)
                g_w[j] = g_w[j] + acts[j].T @ g
                g = g @ weights[j].T
            for j in range(len(weights)):
                if learn_w[j]:
                    vel_w[j] = config.momentum * vel_w[j] + g_w[j]
                    weights[j] = weights[j] - config.learning_rate * vel_w[j]
                if learn_b[j]:
                    vel_b[j] = config.momentum * vel_b[j] + g_b[j]
                    biases[j] = np.maximum(biases[j] - config.learning_rate * vel_b[j], 0.0)
            total += loss * m
        losses.append(total / n)
    params = {}
    for j in range(len(weights)):
        params[f"B{j + 1}"] = weights[j]
        if biases[j] is not None:
            params[f"b{j + 1}"] = biases[j]
    return ReferenceTrainResult(params, losses)
