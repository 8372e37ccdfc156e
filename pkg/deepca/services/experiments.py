"""Experiment runners behind the CLI verbs.

Every runner takes a validated :class:`ExperimentConfig`, writes its artifacts
into a run directory and returns a JSON-serializable summary.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.config import settings
from ..core.errors import ToleranceError, UsageError
from ..models.dataset import Dataset
from ..models.deepca import Model
from ..schemas.experiment import DataConfig, ExperimentConfig, LayerConfig, ModelConfig
from ..schemas.training import TrainConfig
from ..storage.artifacts import RunDirectory
from ..storage.checkpoint import Checkpoint, load_checkpoint
from ..storage.tensor_io import load_tensor, save_tensor
from . import autodiff as ad
from .admm import TRACE_HEADER, infer
from .learning import (
    batch_loss,
    build_model,
    evaluate,
    loss_and_grad,
    mean_bias,
    metrics_header,
    predict,
    prepare_model,
    train,
)
from .oracle import explaining_away_stats, finite_difference_grad
from .synth import depth_field_gen, dictionary_gen, linear_gen, prototype_gen, sparse_code_gen, sparse_signals

logger = logging.getLogger(__name__)

KINK_MARGIN = 1e-4


# ---------------------------------------------------------------- shared plumbing


def run_parallel(fn: Callable, jobs: Sequence) -> List:
    """Apply ``fn`` to every job on a pool capped by DEEPCA_THREADS; results keep job order."""
    workers = min(settings.DEEPCA_THREADS, max(1, len(jobs)))
    if workers == 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def make_dataset(data: DataConfig, input_shape: Optional[Sequence[int]] = None,
                 seed: Optional[int] = None) -> Tuple[Dataset, Optional[Dataset]]:
    """Generate the configured data and split it into (train, test)."""
    seed = data.seed if seed is None else seed
    n = data.n_train + data.n_test
    if data.generator == "sparse_dictionary":
        _, codes, signals = sparse_signals(data.dim, data.atoms, n, data.coherence, data.density,
                                           data.noise, seed, data.orthonormal)
        full = Dataset(signals, codes)
    elif data.generator == "depth_field":
        full = depth_field_gen(data.height, data.width, data.patches, data.mask_density, data.noise,
                               seed, n=n).to_dataset()
    elif data.generator == "prototypes":
        if input_shape is None:
            raise UsageError("the prototypes generator needs the model input shape")
        full = prototype_gen(n, tuple(input_shape), data.classes, data.noise, seed)
    elif data.generator == "linear":
        full, _ = linear_gen(data.dim, data.atoms, n, data.noise, seed)
    else:
        if data.path is None:
            raise UsageError("the tensor_file generator needs data.path")
        inputs = load_tensor(data.path)
        return Dataset(inputs, inputs), None
    train_set = full.subset(slice(0, data.n_train))
    test_set = full.subset(slice(data.n_train, n)) if data.n_test else None
    return train_set, test_set


def require_model(cfg: ExperimentConfig, default: Callable[[ExperimentConfig], ModelConfig]) -> ModelConfig:
    return cfg.model if cfg.model is not None else default(cfg)


def _default_dense_model(cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(
        input_shape=[cfg.data.dim],
        layers=[
            LayerConfig(kind="dense", units=cfg.data.atoms, penalty="nonneg_l1", bias=cfg.run.bias,
                        learnable_bias=True),
        ],
    )


def _default_inpaint_model(cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(
        input_shape=[2, cfg.data.height, cfg.data.width],
        layers=[
            LayerConfig(kind="conv2d", channels=8, kernel=3, padding=1, penalty="nonneg_l1", bias=0.01,
                        bias_sharing="channel"),
            LayerConfig(kind="conv2d", channels=8, kernel=3, padding=1, penalty="nonneg_l1", bias=0.01,
                        bias_sharing="channel"),
            LayerConfig(kind="conv2d", channels=1, kernel=3, padding=1, penalty="equality"),
        ],
    )


def _default_classify_model(cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(
        input_shape=[1, 8, 8],
        layers=[
            LayerConfig(kind="conv2d", channels=4, kernel=3, stride=2, padding=1, penalty="nonneg_l1",
                        bias=0.01, bias_sharing="channel"),
            LayerConfig(kind="conv2d", channels=8, kernel=3, stride=2, padding=1, penalty="nonneg_l1",
                        bias=0.01, bias_sharing="channel"),
            LayerConfig(kind="dense", units=cfg.data.classes, penalty="none"),
        ],
    )


def _default_gradcheck_model(cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(
        input_shape=[cfg.data.dim],
        layers=[
            LayerConfig(kind="dense", units=cfg.data.atoms, penalty="nonneg_l1", bias=cfg.run.bias,
                        learnable_bias=True),
            LayerConfig(kind="dense", units=max(2, cfg.data.atoms // 2), penalty="nonneg_l1",
                        bias=cfg.run.bias, learnable_bias=True),
        ],
    )


# ---------------------------------------------------------------- gradcheck


def kink_distance(model: Model, batch: Dataset, config: TrainConfig) -> float:
    """Smallest distance of any recorded ReLU-type prox input to its kink."""
    leaves = {name: ad.leaf(p, name) for name, p, learnable in model.named_parameters() if learnable}
    value, _ = batch_loss(model.with_parameters(leaves), batch, config)
    if not ad.is_node(value):
        return float("inf")
    closest = float("inf")
    for node in ad.topological_order(value):
        if isinstance(node.op, ad.Prox) and node.op.spec.kind in ("nonneg_l1", "nonneg"):
            v = node.parents[0].value
            kink = node.parents[1].value if len(node.parents) > 1 else 0.0
            closest = min(closest, float(np.min(np.abs(v - kink))))
    return closest


def gradient_errors(model: Model, batch: Dataset, config: TrainConfig, h: float) -> Dict[str, float]:
    """Per parameter: max |autodiff - finite difference| relative to the gradient scale."""
    _, grads, _ = loss_and_grad(model, batch, config)
    params = {name: p for name, p, _ in model.named_parameters()}
    errors = {}
    for name, analytic in grads.items():
        def f(theta, name=name):
            value, _ = batch_loss(model.with_parameters({name: theta}), batch, config)
            return float(value) / len(batch)

        numeric = finite_difference_grad(f, params[name], h)
        scale = max(float(np.max(np.abs(numeric))), 1e-8)
        errors[name] = float(np.max(np.abs(analytic - numeric))) / scale
    return errors


def cmd_gradcheck(cfg: ExperimentConfig, out: Path) -> dict:
    run = RunDirectory(out, "gradcheck", cfg)
    model_cfg = require_model(cfg, _default_gradcheck_model)
    rows = []
    for T in cfg.run.T:
        config = cfg.train.model_copy(update={"T": T})
        for attempt in range(20):
            seed = cfg.data.seed + attempt
            model = prepare_model(build_model(model_cfg, seed, T), config)
            rng = np.random.default_rng(seed)
            inputs = rng.standard_normal((min(cfg.data.n_train, 4),) + tuple(model.input_shape))
            if config.loss == "softmax_cross_entropy":
                targets = rng.integers(0, model.output_shape[-1], size=len(inputs))
            else:
                targets = rng.standard_normal((len(inputs),) + tuple(model.output_shape))
            batch = Dataset(inputs, targets)
            if kink_distance(model, batch, config) >= KINK_MARGIN:
                break
            logger.info(f"T={T}: sample {attempt} lies within {KINK_MARGIN} of a kink, resampling")
        for name, error in gradient_errors(model, batch, config, cfg.run.fd_step).items():
            rows.append([T, name, error, error <= cfg.run.tolerance])
    run.write_csv("gradcheck.csv", ["T", "parameter", "max_rel_error", "passed"], rows)
    run.finalize()
    worst = max(r[2] for r in rows) if rows else 0.0
    summary = {"command": "gradcheck", "max_rel_error": worst, "tolerance": cfg.run.tolerance,
               "checks": len(rows), "out": str(out)}
    if any(not r[3] for r in rows):
        failed = [f"T={r[0]}:{r[1]}" for r in rows if not r[3]]
        raise ToleranceError(f"gradient check failed for {', '.join(failed)} (worst {worst:.3e})")
    logger.info(f"gradient check passed: worst relative error {worst:.3e}")
    return summary


# ---------------------------------------------------------------- explaining away


def _explaining_away_trial(args) -> list:
    cfg, trial = args
    data = cfg.data
    seed = data.seed + 1000 * trial
    dictionary = dictionary_gen(data.dim, data.atoms, data.coherence, seed, data.orthonormal)
    code = sparse_code_gen(data.atoms, data.density, seed + 1)
    rng = np.random.default_rng(seed + 2)
    image = dictionary @ code + data.noise * rng.standard_normal(data.dim)
    stats = explaining_away_stats(dictionary, image, cfg.run.bias)[0]
    sparser = stats.opt_sparsity < stats.ff_sparsity and stats.opt_error <= stats.ff_error * (1 + 1e-9) + 1e-12
    return [trial, stats.ff_sparsity, stats.opt_sparsity, stats.ff_error, stats.opt_error, stats.opt_penalty,
            sparser]


def cmd_demo_explaining_away(cfg: ExperimentConfig, out: Path) -> dict:
    run = RunDirectory(out, "demo-explaining-away", cfg)
    rows = sorted(run_parallel(_explaining_away_trial, [(cfg, t) for t in range(cfg.run.trials)]))
    run.write_csv(
        "explaining_away.csv",
        ["trial", "ff_nonzeros", "opt_nonzeros", "ff_error", "opt_error", "opt_penalty", "opt_sparser"],
        rows,
    )
    run.finalize()
    sparser = sum(1 for r in rows if r[-1])
    equal = sum(1 for r in rows if r[1] == r[2])
    logger.info(f"optimized codes sparser in {sparser}/{len(rows)} trials")
    return {"command": "demo-explaining-away", "trials": len(rows), "opt_sparser": sparser,
            "equal_sparsity": equal, "out": str(out)}


# ---------------------------------------------------------------- sparsity vs T


def _sparsity_job(args) -> Tuple[list, List[list]]:
    cfg, model_cfg, seed, T, learnable = args
    train_set, test_set = make_dataset(cfg.data, seed=cfg.data.seed + seed)
    config = cfg.train.model_copy(update={"T": T, "learn_bias": learnable, "objective": "reconstruction",
                                          "seed": cfg.train.seed + seed})
    result = train(build_model(model_cfg, cfg.data.seed + seed, T), train_set, config, eval_set=test_set)
    final = evaluate(result.model, test_set if test_set is not None else train_set, config, config.epochs)
    mode = "learnable" if learnable else "fixed"
    summary = [seed, T, mode, _last(result, "train"), final.loss,
               result.bias_history[0], result.bias_history[-1], *final.sparsity]
    epochs = [[seed, T, mode, *m.row()] for m in result.metrics]
    return summary, epochs


def _last(result, split: str) -> float:
    return [m for m in result.metrics if m.split == split][-1].loss


def cmd_demo_sparsity(cfg: ExperimentConfig, out: Path) -> dict:
    run = RunDirectory(out, "demo-sparsity", cfg)
    model_cfg = require_model(cfg, _default_dense_model)
    jobs = [(cfg, model_cfg, s, T, learnable)
            for s in range(cfg.run.seeds) for T in cfg.run.T for learnable in (False, True)]
    results = run_parallel(_sparsity_job, jobs)
    depth = len(model_cfg.layers)
    summary = sorted(r[0] for r in results)
    epochs = sorted(row for r in results for row in r[1])
    run.write_csv(
        "sparsity.csv",
        ["seed", "T", "bias", "train_loss", "test_loss", "mean_bias_init", "mean_bias_final"]
        + [f"sparsity_layer{j}" for j in range(1, depth + 1)],
        summary,
    )
    run.write_csv("epochs.csv", ["seed", "T", "bias"] + metrics_header(depth), epochs)
    run.finalize()
    report = {"command": "demo-sparsity", "out": str(out), "runs": len(summary)}
    for T in cfg.run.T:
        for mode in ("fixed", "learnable"):
            losses = [r[4] for r in summary if r[1] == T and r[2] == mode]
            report[f"T{T}_{mode}_test_loss"] = float(np.mean(losses))
    return report


# ---------------------------------------------------------------- constrained inpainting


def _inpaint_job(args) -> Tuple[list, np.ndarray]:
    cfg, model_cfg, seed, T = args
    train_set, test_set = make_dataset(cfg.data, seed=cfg.data.seed + seed)
    config = cfg.train.model_copy(update={"T": T, "seed": cfg.train.seed + seed,
                                          "objective": "supervised", "loss": "squared_error"})
    result = train(build_model(model_cfg, cfg.data.seed + seed, T), train_set, config)
    train_pred = predict(result.model, train_set, T)
    evaluation = test_set if test_set is not None else train_set
    test_pred = predict(result.model, evaluation, T)
    violation = float(np.max(np.abs(test_pred - evaluation.values)[evaluation.masks]))
    row = [seed, T, float(np.mean(np.abs(train_pred - train_set.targets))),
           float(np.mean(np.abs(test_pred - evaluation.targets))), violation]
    return row, test_pred


def cmd_demo_inpaint(cfg: ExperimentConfig, out: Path) -> dict:
    if cfg.data.generator != "depth_field":
        raise UsageError("demo-inpaint needs data.generator = 'depth_field'")
    run = RunDirectory(out, "demo-inpaint", cfg)
    model_cfg = require_model(cfg, _default_inpaint_model)
    jobs = [(cfg, model_cfg, s, T) for s in range(cfg.run.seeds) for T in cfg.run.T]
    results = run_parallel(_inpaint_job, jobs)
    rows = []
    for (_, _, s, T), (row, pred) in sorted(zip(jobs, results), key=lambda item: (item[0][2], item[0][3])):
        rows.append(row)
        run.write_tensor(f"predictions/seed{s}_T{T}.dcat", pred)
    run.write_csv("inpaint.csv", ["seed", "T", "train_mae", "test_mae", "max_violation"], rows)
    run.finalize()
    report = {"command": "demo-inpaint", "out": str(out), "runs": len(rows)}
    for T in cfg.run.T:
        report[f"T{T}_test_mae"] = float(np.mean([r[3] for r in rows if r[1] == T]))
        report[f"T{T}_max_violation"] = float(max(r[4] for r in rows if r[1] == T))
    return report


# ---------------------------------------------------------------- supervised classification


def _classify_job(args) -> list:
    cfg, model_cfg, seed, T = args
    train_set, test_set = make_dataset(cfg.data, model_cfg.input_shape, seed=cfg.data.seed + seed)
    config = cfg.train.model_copy(update={"T": T, "seed": cfg.train.seed + seed,
                                          "objective": "supervised", "loss": "softmax_cross_entropy"})
    result = train(build_model(model_cfg, cfg.data.seed + seed, T), train_set, config)
    evaluation = test_set if test_set is not None else train_set
    train_err = float(np.mean(np.argmax(predict(result.model, train_set, T), axis=-1) != train_set.targets))
    test_err = float(np.mean(np.argmax(predict(result.model, evaluation, T), axis=-1) != evaluation.targets))
    return [seed, T, train_err, test_err, evaluate(result.model, evaluation, config).loss]


def cmd_demo_classify(cfg: ExperimentConfig, out: Path) -> dict:
    if cfg.data.generator != "prototypes":
        raise UsageError("demo-classify needs data.generator = 'prototypes'")
    run = RunDirectory(out, "demo-classify", cfg)
    model_cfg = require_model(cfg, _default_classify_model)
    rows = sorted(run_parallel(_classify_job, [(cfg, model_cfg, s, T) for s in range(cfg.run.seeds)
                                               for T in cfg.run.T]))
    run.write_csv("classify.csv", ["seed", "T", "train_error", "test_error", "test_loss"], rows)
    run.finalize()
    report = {"command": "demo-classify", "out": str(out), "runs": len(rows)}
    for T in cfg.run.T:
        report[f"T{T}_test_error"] = float(np.mean([r[3] for r in rows if r[1] == T]))
    return report


# ---------------------------------------------------------------- train / eval / infer


def cmd_train(cfg: ExperimentConfig, out: Path) -> dict:
    run = RunDirectory(out, "train", cfg)
    train_set, test_set = make_dataset(cfg.data, cfg.model.input_shape if cfg.model else None)
    state = None
    if cfg.run.checkpoint is not None:
        checkpoint = load_checkpoint(cfg.run.checkpoint)
        model, state = checkpoint.model, checkpoint.state
        logger.info(f"resuming from {cfg.run.checkpoint} at epoch {state.epoch if state else 0}")
    else:
        if cfg.model is None:
            raise UsageError("train needs a model section or run.checkpoint")
        model = build_model(cfg.model, cfg.data.seed, cfg.train.T)
    result = train(model, train_set, cfg.train, state=state, eval_set=test_set)
    run.write_checkpoint("model.dcac", Checkpoint(result.model, result.state))
    run.write_csv("metrics.csv", metrics_header(result.model.depth), [m.row() for m in result.metrics])
    run.finalize()
    return {
        "command": "train",
        "out": str(out),
        "epochs": result.state.epoch,
        "train_loss": _last(result, "train") if result.metrics else None,
        "mean_bias": mean_bias(result.model),
    }


def _checkpoint_model(cfg: ExperimentConfig) -> Model:
    if cfg.run.checkpoint is None:
        raise UsageError("this command needs run.checkpoint")
    return load_checkpoint(cfg.run.checkpoint).model


def cmd_eval(cfg: ExperimentConfig, out: Path) -> dict:
    run = RunDirectory(out, "eval", cfg)
    model = _checkpoint_model(cfg)
    train_set, test_set = make_dataset(cfg.data, model.input_shape)
    rows = []
    for T in cfg.run.T:
        config = cfg.train.model_copy(update={"T": T})
        sized = model.with_iterations(T)
        rows.append([T, *evaluate(sized, train_set, config, split="train").row()[1:]])
        if test_set is not None:
            rows.append([T, *evaluate(sized, test_set, config, split="test").row()[1:]])
    run.write_csv("eval.csv", ["T", "split", "loss"] + metrics_header(model.depth)[3:], rows)
    run.finalize()
    return {"command": "eval", "out": str(out), "rows": len(rows)}


def cmd_infer(cfg: ExperimentConfig, out: Path) -> dict:
    run = RunDirectory(out, "infer", cfg)
    model = _checkpoint_model(cfg)
    if cfg.run.input is None:
        raise UsageError("infer needs run.input (a DCAT tensor)")
    inputs = load_tensor(cfg.run.input)
    T = cfg.run.T[0]
    trace = [] if cfg.run.trace else None
    tol = settings.PRIMAL_TOL if cfg.run.early_stop else None
    output = infer(model, inputs, T, tol=tol, trace=trace).output
    run.write_tensor("prediction.dcat", output)
    if cfg.run.output is not None:
        save_tensor(cfg.run.output, output)
    if trace is not None:
        run.write_csv("trace.csv", TRACE_HEADER,
                      [[r.t, r.layer, r.primal_residual, r.recon_residual, r.objective] for r in trace])
    run.finalize()
    return {"command": "infer", "out": str(out), "T": T, "output_shape": list(np.shape(output))}


COMMANDS: Dict[str, Callable[[ExperimentConfig, Path], dict]] = {
    "gradcheck": cmd_gradcheck,
    "demo-explaining-away": cmd_demo_explaining_away,
    "demo-sparsity": cmd_demo_sparsity,
    "demo-inpaint": cmd_demo_inpaint,
    "demo-classify": cmd_demo_classify,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
}
