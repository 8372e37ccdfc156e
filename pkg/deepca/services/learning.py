"""Learning by backpropagation through the unrolled ADNN.

The training loss is the minibatch mean of the per-example loss on the model
output z_l (or on the decoded reconstruction for the unsupervised objective).
Gradients flow through every unrolled update, duals included.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..core.errors import DimensionError, DivergenceError, UsageError
from ..models.dataset import Dataset
from ..models.deepca import InferenceState, Layer, Model
from ..models.operators import LinearOperator, operator_norm
from ..models.penalty import PenaltySpec
from ..schemas.experiment import LayerConfig, ModelConfig
from ..schemas.training import TrainConfig
from . import autodiff as ad
from .admm import infer

logger = logging.getLogger(__name__)

SPARSITY_EPS = 1e-12


# ---------------------------------------------------------------- losses


def loss(kind: str, prediction, target):
    """Summed loss over a leading batch axis (plain array or recorded node)."""
    if kind == "squared_error":
        if np.shape(ad.value_of(prediction)) != np.shape(target):
            raise DimensionError(
                f"prediction {np.shape(ad.value_of(prediction))} and target {np.shape(target)} differ"
            )
        return ad.half_squared_norm(ad.sub(prediction, target))
    if kind == "softmax_cross_entropy":
        return ad.softmax_cross_entropy(prediction, target)
    raise UsageError(f"unknown loss kind {kind!r}")


def decode(model: Model, code):
    """B_1 B_2 ... B_l code: the reconstruction of x implied by a top-layer code."""
    for layer in reversed(model.layers):
        code = ad.forward(layer.op, code)
    return code


def intermediate_loss(model: Model, state: InferenceState):
    """sum over hidden layers of 1/2 ||z_{j-1} - B_j w_j||^2."""
    terms = [
        ad.half_squared_norm(ad.sub(state.z_prev(j), ad.forward(model.layers[j].op, state.w[j])))
        for j in range(model.depth - 1)
    ]
    total = terms[0] if terms else np.asarray(0.0)
    for term in terms[1:]:
        total = ad.add(total, term)
    return total


def batch_loss(model: Model, batch: Dataset, config: TrainConfig) -> Tuple[object, InferenceState]:
    """Summed loss of f^[T] over ``batch``; ``model`` already carries T and bound constraints."""
    state = infer(model, batch.inputs)
    if config.objective == "reconstruction":
        value = loss("squared_error", decode(model, state.output), batch.inputs)
    else:
        value = loss(config.loss, state.output, batch.targets)
    if config.intermediate_weight > 0 and model.depth > 1:
        value = ad.add(value, ad.scale(config.intermediate_weight, intermediate_loss(model, state)))
    return value, state


def sparsity(state: InferenceState) -> List[float]:
    """Per layer, the fraction of zero activations in z_j."""
    return [float(np.mean(np.abs(ad.value_of(z)) <= SPARSITY_EPS)) for z in state.z]


# ---------------------------------------------------------------- initialization


def init_dense_weight(rng: np.random.Generator, input_size: int, output_size: int) -> np.ndarray:
    """Gaussian / sqrt(fan-in); overcomplete layers get orthonormal rows (B B^T = I)."""
    weight = rng.standard_normal((input_size, output_size)) / np.sqrt(input_size)
    if output_size >= input_size:
        q, _ = np.linalg.qr(weight.T)
        weight = np.ascontiguousarray(q.T)
    return weight


def init_conv_kernel(rng: np.random.Generator, channels: int, input_shape, kernel: int,
                     stride: int, padding: int) -> np.ndarray:
    """Gaussian / sqrt(fan-in), rescaled so the operator norm is at most 1."""
    c_in = input_shape[0]
    weight = rng.standard_normal((channels, c_in, kernel, kernel)) / np.sqrt(c_in * kernel * kernel)
    norm = operator_norm(LinearOperator.conv2d(weight, input_shape, stride, padding), iters=50,
                         seed=int(rng.integers(2**31)))
    if norm > 1.0:
        weight /= norm
    return weight


def build_penalty(cfg: LayerConfig, shape) -> PenaltySpec:
    if cfg.penalty == "nonneg_l1":
        if cfg.bias_sharing == "scalar":
            bias = np.full((), cfg.bias)
        elif cfg.bias_sharing == "channel":
            bias = np.full((shape[0],) + (1,) * (len(shape) - 1), cfg.bias)
        else:
            bias = np.full(shape, cfg.bias)
        return PenaltySpec.nonneg_l1(bias, shape, learnable=cfg.learnable_bias)
    if cfg.penalty == "nonneg":
        return PenaltySpec.nonneg(shape)
    if cfg.penalty == "simplex":
        return PenaltySpec.simplex(shape)
    if cfg.penalty == "equality":
        return PenaltySpec.equality(shape)
    return PenaltySpec.none(shape)


def build_model(cfg: ModelConfig, seed: int, T: int = 1) -> Model:
    """Fresh model from an architecture description, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    shape = tuple(cfg.input_shape)
    layers = []
    for lc in cfg.layers:
        if lc.kind == "dense":
            weight = init_dense_weight(rng, int(np.prod(shape)), lc.units)
            op = LinearOperator.dense(weight, input_shape=shape, learnable=lc.learnable)
        else:
            if len(shape) != 3:
                raise DimensionError(f"conv2d layer needs a (C, H, W) input, got {shape}")
            weight = init_conv_kernel(rng, lc.channels, shape, lc.kernel, lc.stride, lc.padding)
            op = LinearOperator.conv2d(weight, shape, lc.stride, lc.padding, learnable=lc.learnable)
        layers.append(Layer(op, build_penalty(lc, op.output_shape)))
        shape = op.output_shape
    return Model(tuple(layers), T=T, rho=cfg.rho, w_update=cfg.w_update)


# ---------------------------------------------------------------- training


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    sparsity: List[float]

    def row(self) -> list:
        return [self.epoch, self.split, self.loss, *self.sparsity]


def metrics_header(depth: int) -> List[str]:
    return ["epoch", "split", "loss"] + [f"avg_sparsity_layer{j}" for j in range(1, depth + 1)]


@dataclass
class TrainState:
    """Optimizer state carried across epochs and through checkpoints."""

    epoch: int
    velocity: Dict[str, np.ndarray]
    rng: np.random.Generator

    @classmethod
    def fresh(cls, model: Model, seed: int) -> "TrainState":
        velocity = {name: np.zeros(np.shape(p)) for name, p, learnable in model.named_parameters() if learnable}
        return cls(0, velocity, np.random.default_rng(seed))


@dataclass
class TrainResult:
    model: Model
    state: TrainState
    metrics: List[EpochMetrics] = field(default_factory=list)
    bias_history: List[Optional[float]] = field(default_factory=list)


def prepare_model(model: Model, config: TrainConfig) -> Model:
    """Apply T and the bias-learnability override, and take private copies of every parameter."""
    layers = []
    for layer in model.layers:
        penalty = layer.penalty
        if penalty.kind == "nonneg_l1" and config.learn_bias is not None:
            penalty = PenaltySpec.nonneg_l1(penalty.bias, penalty.shape, learnable=config.learn_bias)
        layers.append(Layer(layer.op, penalty))
    model = model.with_layers(layers).with_iterations(config.T)
    return model.with_parameters({name: np.array(p, copy=True) for name, p, _ in model.named_parameters()})


def mean_bias(model: Model) -> Optional[float]:
    biases = [np.ravel(layer.penalty.bias) for layer in model.layers if layer.penalty.kind == "nonneg_l1"]
    if not biases:
        return None
    return float(np.mean(np.concatenate(biases)))


def loss_and_grad(model: Model, batch: Dataset, config: TrainConfig) -> Tuple[float, Dict[str, np.ndarray], List[float]]:
    """Mean minibatch loss, its gradient for every learnable parameter, and layer sparsity."""
    leaves = {name: ad.leaf(p, name) for name, p, learnable in model.named_parameters() if learnable}
    traced = model.with_parameters(leaves)
    if batch.constrained:
        traced = traced.bind_output(batch.masks, batch.values)
    value, state = batch_loss(traced, batch, config)
    mean = ad.scale(1.0 / len(batch), value)
    grads: Dict[str, np.ndarray] = {}
    if ad.is_node(mean) and leaves:
        by_leaf = ad.backward(mean)
        grads = {name: by_leaf.get(node, np.zeros(node.shape)) for name, node in leaves.items()}
    return float(ad.value_of(mean)), grads, sparsity(state)


def sgd_step(model: Model, grads: Dict[str, np.ndarray], velocity: Dict[str, np.ndarray],
             config: TrainConfig) -> Model:
    """v <- mu v + g; theta <- theta - lr v. Biases are clamped at zero."""
    params = {name: p for name, p, _ in model.named_parameters()}
    updated = {}
    for name, g in grads.items():
        velocity[name] = config.momentum * velocity[name] + g
        value = params[name] - config.learning_rate * velocity[name]
        if name.startswith("b"):
            value = np.maximum(value, 0.0)
        updated[name] = value
    return model.with_parameters(updated)


def evaluate(model: Model, dataset: Dataset, config: TrainConfig, epoch: int = 0,
             split: str = "test") -> EpochMetrics:
    """Mean loss and layer sparsity of ``model`` (eager, no graph) over a dataset."""
    bound = model.bind_output(dataset.masks, dataset.values) if dataset.constrained else model
    value, state = batch_loss(bound, dataset, config)
    return EpochMetrics(epoch, split, float(ad.value_of(value)) / len(dataset), sparsity(state))


def predict(model: Model, dataset: Dataset, T: Optional[int] = None) -> np.ndarray:
    """f^[T](x) for every example, with per-example output constraints bound."""
    bound = model.bind_output(dataset.masks, dataset.values) if dataset.constrained else model
    return infer(bound, dataset.inputs, T).output


def train(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    state: Optional[TrainState] = None,
    eval_set: Optional[Dataset] = None,
    on_epoch: Optional[Callable[[Model, TrainState], None]] = None,
) -> TrainResult:
    """Minibatch SGD with momentum on the unrolled network.

    ``state`` resumes an interrupted run; the data order is drawn from the
    state's generator so a resumed run replays the uninterrupted trajectory.
    """
    if state is None:
        model = prepare_model(model, config)
        state = TrainState.fresh(model, config.seed)
    else:
        model = model.with_iterations(config.T)
    result = TrainResult(model, state, bias_history=[mean_bias(model)])
    n = len(dataset)
    logger.info(
        f"training {model.depth}-layer model, T={model.T}, {model.parameter_count()} parameters, "
        f"{n} examples, epochs {state.epoch + 1}..{config.epochs}"
    )
    last_finite = None
    for epoch in range(state.epoch, config.epochs):
        order = state.rng.permutation(n)
        total = 0.0
        zeros = np.zeros(model.depth)
        for step, start in enumerate(range(0, n, config.batch_size)):
            batch = dataset.subset(order[start:start + config.batch_size])
            value, grads, layer_sparsity = loss_and_grad(model, batch, config)
            if not np.isfinite(value):
                raise DivergenceError(
                    f"training loss became {value} at epoch {epoch + 1}, step {step + 1} "
                    f"(last finite loss {last_finite})"
                )
            last_finite = value
            model = sgd_step(model, grads, state.velocity, config)
            total += value * len(batch)
            zeros += np.asarray(layer_sparsity) * len(batch)
        state.epoch = epoch + 1
        row = EpochMetrics(epoch + 1, "train", total / n, list(zeros / n))
        result.metrics.append(row)
        if eval_set is not None:
            result.metrics.append(evaluate(model, eval_set, config, epoch + 1))
        result.bias_history.append(mean_bias(model))
        logger.info(f"epoch {epoch + 1}/{config.epochs}: train loss {row.loss:.6g}")
        if on_epoch is not None:
            on_epoch(model, state)
    result.model = model
    return result
