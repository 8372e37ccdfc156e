from pydantic import BaseModel, Field, field_validator, model_validator
from typing import List, Literal, Optional

from .training import TrainConfig


class LayerConfig(BaseModel):
    kind: Literal["dense", "conv2d"] = "dense"
    units: Optional[int] = Field(None, ge=1)
    channels: Optional[int] = Field(None, ge=1)
    kernel: int = Field(3, ge=1)
    stride: int = Field(1, ge=1)
    padding: int = Field(0, ge=0)
    penalty: Literal["nonneg_l1", "nonneg", "simplex", "equality", "none"] = "nonneg_l1"
    bias: float = Field(0.0, ge=0)
    bias_sharing: Literal["coordinate", "channel", "scalar"] = "coordinate"
    learnable: bool = True
    learnable_bias: bool = False

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def check_size(self) -> "LayerConfig":
        if self.kind == "dense" and self.units is None:
            raise ValueError("dense layers need 'units'")
        if self.kind == "conv2d" and self.channels is None:
            raise ValueError("conv2d layers need 'channels'")
        if self.bias_sharing == "channel" and self.kind != "conv2d":
            raise ValueError("per-channel biases need a conv2d layer")
        return self


class ModelConfig(BaseModel):
    input_shape: List[int] = Field(..., min_length=1)
    layers: List[LayerConfig] = Field(..., min_length=1)
    rho: float = Field(1.0, gt=0)
    w_update: Literal["auto", "exact", "parseval"] = "auto"

    class Config:
        extra = "forbid"

    @field_validator("input_shape")
    @classmethod
    def validate_input_shape(cls, v: List[int]) -> List[int]:
        if any(n < 1 for n in v):
            raise ValueError("input_shape extents must be positive")
        return v


class DataConfig(BaseModel):
    generator: Literal["sparse_dictionary", "depth_field", "prototypes", "linear", "tensor_file"] = "sparse_dictionary"
    seed: int = Field(0, ge=0)
    n_train: int = Field(64, ge=1)
    n_test: int = Field(64, ge=0)
    # sparse_dictionary / linear
    dim: int = Field(16, ge=1)
    atoms: int = Field(32, ge=1)
    coherence: float = Field(0.0, ge=0, lt=1)
    density: float = Field(0.1, ge=0, le=1)
    orthonormal: bool = False
    noise: float = Field(0.0, ge=0)
    # depth_field
    height: int = Field(28, ge=2)
    width: int = Field(28, ge=2)
    patches: int = Field(4, ge=0)
    mask_density: float = Field(0.1, gt=0, lt=1)
    # prototypes
    classes: int = Field(4, ge=2)
    # tensor_file
    path: Optional[str] = None

    class Config:
        extra = "forbid"


class RunConfig(BaseModel):
    T: List[int] = Field(default_factory=lambda: [1])
    seeds: int = Field(1, ge=1)
    trials: int = Field(100, ge=1)
    bias: float = Field(0.1, ge=0)
    tolerance: float = Field(1e-4, ge=0)
    fd_step: float = Field(1e-5, gt=0)
    out: str = "runs"
    checkpoint: Optional[str] = None
    input: Optional[str] = None
    output: Optional[str] = None
    trace: bool = False
    early_stop: bool = False

    class Config:
        extra = "forbid"

    @field_validator("T")
    @classmethod
    def validate_iterations(cls, v: List[int]) -> List[int]:
        if not v or any(t < 1 for t in v):
            raise ValueError("run.T must be a non-empty list of iteration counts >= 1")
        return v


class ExperimentConfig(BaseModel):
    model: Optional[ModelConfig] = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    run: RunConfig = Field(default_factory=RunConfig)

    class Config:
        extra = "forbid"
