from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import AdamState, Tape, Tensor, adam_step
from ..errors import ConfigurationError, DimensionError, DivergenceError
from .base import NeuralModel

RMSE_GUARD = 1e-12


def rmse_loss(pred: Tensor, target) -> Tensor:
    """sqrt(mean((pred - target)^2) + guard), differentiable everywhere."""
    target = ad.as_tensor(target)
    return ad.sqrt(ad.mean(ad.square(pred - target)) + RMSE_GUARD)


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    batch_size: int = 24
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError(f"invalid training config {asdict(self)}")


@dataclass
class TrainResult:
    loss_curve: list[float] = field(default_factory=list)  # mean batch loss per epoch
    steps: int = 0


def train_step(model: NeuralModel, x: np.ndarray, y: np.ndarray, state: AdamState,
               learning_rate: float) -> float:
    params = model.parameters()
    with Tape() as tape:
        loss = rmse_loss(model.forward(Tensor._wrap(x)), y)
    grads = ad.backward(loss, tape)
    adam_step(params, [grads.get(p) for p in params], state, learning_rate)
    return loss.item()


def train_model(model: NeuralModel, inputs: np.ndarray, targets: np.ndarray,
                config: TrainConfig) -> TrainResult:
    """Mini-batch Adam on the RMSE loss, reshuffling every epoch.

    Data must already be in the model's (normalised) space.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape != targets.shape or inputs.ndim != 3 or len(inputs) == 0:
        raise DimensionError(f"inputs {inputs.shape} and targets {targets.shape} must match and be non-empty")
    rng = np.random.default_rng(config.seed)
    state = AdamState.for_params(model.parameters())
    result = TrainResult()
    n = len(inputs)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                value = train_step(model, inputs[idx], targets[idx], state, config.learning_rate)
            except ArithmeticError as exc:
                raise DivergenceError(f"training diverged in epoch {epoch}: {exc}", epoch) from exc
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss in epoch {epoch}", epoch)
            losses.append(value)
        result.loss_curve.append(float(np.mean(losses)))
        result.steps = state.step_count
    return result
