from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from ..autodiff import Tensor
from ..dataset import STEPS, Normalizer
from ..errors import DimensionError

MODEL_KINDS: dict[str, type["ForecastModel"]] = {}


def register_kind(cls):
    MODEL_KINDS[cls.kind] = cls
    return cls


def check_batch(inputs: np.ndarray, n_sensors: int) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[1] != STEPS or inputs.shape[2] != n_sensors:
        raise DimensionError(f"expected a [B, {STEPS}, {n_sensors}] batch, got {inputs.shape}")
    return inputs


class ForecastModel:
    """Maps [B, 12, N] windows to [B, 12, N] forecasts in its own units."""

    kind: ClassVar[str]
    model_id: str
    n_sensors: int

    def predict(self, inputs: np.ndarray, sample_times: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def get_config(self) -> dict:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    @classmethod
    def from_config(cls, config: dict, state: dict[str, np.ndarray]) -> "ForecastModel":
        raise NotImplementedError


class NeuralModel(ForecastModel):
    """Differentiable model whose parameters live in ``self.params``."""

    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def predict(self, inputs, sample_times=None):
        inputs = check_batch(inputs, self.n_sensors)
        return self.forward(Tensor._wrap(inputs)).data.copy()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise DimensionError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class ModelBundle:
    """A model plus the normalizer its owner applies around it.

    ``predict_raw`` takes and returns vehicles/hour. ``normalizer`` is None
    for models that already work in raw units (historical average).
    """

    model: ForecastModel
    normalizer: Normalizer | None = None
    role: str = "target"

    @property
    def model_id(self) -> str:
        return self.model.model_id

    @property
    def n_sensors(self) -> int:
        return self.model.n_sensors

    def predict_raw(self, inputs: np.ndarray, sample_times: np.ndarray | None = None) -> np.ndarray:
        inputs = check_batch(inputs, self.n_sensors)
        if self.normalizer is None:
            return self.model.predict(inputs, sample_times)
        z = self.model.predict(self.normalizer.apply(inputs), sample_times)
        return self.normalizer.invert(z)
