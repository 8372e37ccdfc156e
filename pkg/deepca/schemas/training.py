from pydantic import BaseModel, Field
from typing import Optional
from enum import Enum


class LossKind(str, Enum):
    SQUARED_ERROR = "squared_error"
    SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"


class TrainObjective(str, Enum):
    SUPERVISED = "supervised"
    RECONSTRUCTION = "reconstruction"


class TrainConfig(BaseModel):
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    seed: int = Field(0, ge=0)
    T: int = Field(1, ge=1)
    loss: LossKind = LossKind.SQUARED_ERROR
    objective: TrainObjective = TrainObjective.SUPERVISED
    # overrides the per-layer learnable flag of every nonneg_l1 bias when set
    learn_bias: Optional[bool] = None
    intermediate_weight: float = Field(0.0, ge=0)

    class Config:
        extra = "forbid"
        use_enum_values = True
