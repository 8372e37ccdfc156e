from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core.errors import DimensionError


@dataclass
class Dataset:
    """Examples stacked along axis 0.

    ``targets`` holds regression targets or integer class labels. ``masks``
    and ``values`` carry per-example equality constraints for the output layer.
    """

    inputs: np.ndarray
    targets: np.ndarray
    masks: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise DimensionError("dataset is empty")
        if len(self.targets) != len(self.inputs):
            raise DimensionError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if (self.masks is None) != (self.values is None):
            raise DimensionError("masks and values must be given together")
        if self.masks is not None and (len(self.masks) != len(self.inputs) or self.masks.shape != self.values.shape):
            raise DimensionError("constraint masks/values must have one entry per example")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def constrained(self) -> bool:
        return self.masks is not None

    def subset(self, index) -> "Dataset":
        return Dataset(
            self.inputs[index],
            self.targets[index],
            None if self.masks is None else self.masks[index],
            None if self.values is None else self.values[index],
        )
