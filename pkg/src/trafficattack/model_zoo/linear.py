from __future__ import annotations

import numpy as np

from ..dataset import STEPS, WindowedDataset
from ..errors import ContractError, SingularSystemError
from .base import ForecastModel, check_batch, register_kind


@register_kind
class LRModel(ForecastModel):
    """Per-sensor ordinary least squares on the sensor's own 12-hour history.

    ``weights[n, out_step, in_step]`` and ``intercept[n, out_step]``.
    """

    kind = "lr"

    def __init__(self, weights: np.ndarray, intercept: np.ndarray, model_id: str = "lr"):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.intercept = np.asarray(intercept, dtype=np.float64)
        self.model_id = model_id
        self.n_sensors = self.weights.shape[0]

    def predict(self, inputs, sample_times=None):
        x = check_batch(inputs, self.n_sensors)
        return np.einsum("bin,noi->bon", x, self.weights) + self.intercept.T[None]

    def get_config(self):
        return {"n_sensors": self.n_sensors, "model_id": self.model_id}

    def state_dict(self):
        return {"weights": self.weights.copy(), "intercept": self.intercept.copy()}

    @classmethod
    def from_config(cls, config, state):
        return cls(state["weights"], state["intercept"], model_id=config["model_id"])


def fit_lr(train: WindowedDataset, model_id: str = "lr") -> LRModel:
    """Closed-form least squares per sensor (no regularisation).

    Solved on centred data, which is the normal-equation solution with the
    intercept eliminated. A sensor whose history never varies gets an
    intercept-only fit; any other rank deficiency is an error.
    """
    x, y = train.inputs, train.targets
    s, steps, n = x.shape
    if s == 0:
        raise ContractError("empty training set")
    weights = np.zeros((n, STEPS, steps))
    intercept = np.zeros((n, STEPS))
    for j in range(n):
        xj, yj = x[:, :, j], y[:, :, j]
        x_mean, y_mean = xj.mean(axis=0), yj.mean(axis=0)
        xc, yc = xj - x_mean, yj - y_mean
        if not xc.any():
            intercept[j] = y_mean
            continue
        if s < steps + 1 or np.linalg.matrix_rank(xc) < steps:
            raise SingularSystemError(f"sensor {j}: design matrix is rank deficient ({s} samples)")
        coef = np.linalg.solve(xc.T @ xc, xc.T @ yc)  # [in, out]
        weights[j] = coef.T
        intercept[j] = y_mean - x_mean @ coef
    return LRModel(weights, intercept, model_id=model_id)
