"""DCAC model checkpoints.

Layout: ``DCAC`` | version u8 (0x01) | record length u32 LE | JSON
architecture record | DCAT parameter tensors in declaration order | DCAT
momentum buffers for the learnable parameters (same order).

The architecture record holds shapes, penalty kinds, rho, T and the optimizer
bookkeeping (epoch, generator state); no tensor data depends on T.
"""
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..core.errors import FormatError
from ..models.deepca import Layer, Model
from ..models.operators import LinearOperator
from ..models.penalty import PenaltySpec
from ..services.learning import TrainState
from .tensor_io import decode_tensor, encode_tensor

logger = logging.getLogger(__name__)

MAGIC = b"DCAC"
VERSION = 0x01
_HEADER = struct.Struct("<4sBI")


@dataclass
class Checkpoint:
    model: Model
    state: Optional[TrainState] = None


def architecture_record(model: Model) -> dict:
    layers = []
    for layer in model.layers:
        op, penalty = layer.op, layer.penalty
        layers.append({
            "kind": op.kind,
            "input_shape": list(op.input_shape),
            "output_shape": list(op.output_shape),
            "weight_shape": list(np.shape(op.weight)),
            "stride": op.stride,
            "padding": op.padding,
            "learnable": op.learnable,
            "penalty": {
                "kind": penalty.kind,
                "shape": list(penalty.shape),
                "learnable": penalty.learnable,
                "bias_shape": list(np.shape(penalty.bias)) if penalty.kind == "nonneg_l1" else None,
            },
        })
    return {"layers": layers, "T": model.T, "rho": model.rho, "w_update": model.w_update}


def encode_parameters(model: Model) -> bytes:
    return b"".join(encode_tensor(p) for _, p, _ in model.named_parameters())


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    model, state = checkpoint.model, checkpoint.state
    record = architecture_record(model)
    record["parameters"] = [name for name, _, _ in model.named_parameters()]
    if state is not None:
        record["optimizer"] = {
            "epoch": state.epoch,
            "velocity": list(state.velocity),
            "rng": state.rng.bit_generator.state,
        }
    body = json.dumps(record, sort_keys=True).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, len(body)), body, encode_parameters(model)]
    if state is not None:
        parts.extend(encode_tensor(v) for v in state.velocity.values())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated DCAC header")
    magic, version, length = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad DCAC magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported DCAC version {version}")
    offset = _HEADER.size
    try:
        record = json.loads(buf[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt DCAC architecture record: {e}") from e
    missing = {"layers", "parameters", "T", "rho", "w_update"} - set(record)
    if missing:
        raise FormatError(f"DCAC architecture record lacks {sorted(missing)}")
    offset += length

    tensors = {}
    for name in record["parameters"]:
        tensors[name], offset = decode_tensor(buf, offset)
    layers = []
    for j, spec in enumerate(record["layers"], start=1):
        weight = tensors[f"B{j}"]
        if list(weight.shape) != spec["weight_shape"]:
            raise FormatError(f"B{j} has shape {weight.shape}, record says {spec['weight_shape']}")
        op = LinearOperator(
            spec["kind"], weight, tuple(spec["input_shape"]), tuple(spec["output_shape"]),
            spec["stride"], spec["padding"], spec["learnable"],
        )
        pen = spec["penalty"]
        bias = tensors.get(f"b{j}") if pen["kind"] == "nonneg_l1" else None
        layers.append(Layer(op, PenaltySpec(pen["kind"], tuple(pen["shape"]), bias=bias, learnable=pen["learnable"])))
    model = Model(tuple(layers), T=record["T"], rho=record["rho"], w_update=record["w_update"])

    state = None
    if "optimizer" in record:
        opt = record["optimizer"]
        velocity = {}
        for name in opt["velocity"]:
            velocity[name], offset = decode_tensor(buf, offset)
        rng_state = opt["rng"]
        rng = np.random.Generator(getattr(np.random, rng_state["bit_generator"])())
        rng.bit_generator.state = rng_state
        state = TrainState(opt["epoch"], velocity, rng)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes in checkpoint")
    return Checkpoint(model, state)


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.info(f"saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    checkpoint = decode_checkpoint(Path(path).read_bytes())
    logger.info(f"loaded {checkpoint.model.depth}-layer checkpoint from {path}")
    return checkpoint
