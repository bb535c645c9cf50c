"""Adversary-side substitute: a pooling-free residual 1-D ConvNet fit to oracle logs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import STEPS, Normalizer, fit_normalizer
from .errors import ConfigurationError, DimensionError
from .evaluation import rmse
from .model_zoo.base import ModelBundle, NeuralModel, register_kind
from .model_zoo.training import TrainConfig, TrainResult, train_model


@register_kind
class ResidualTSNet(NeuralModel):
    """Sensors are input channels, time is the convolution axis.

    stem conv (N -> C) -> ``blocks`` x [conv, relu, conv, + skip, relu] -> linear head
    over the flattened [12, C] map to 12 x N outputs. Every convolution is
    stride 1 with same padding, so no layer changes the temporal length.
    """

    kind = "residual_tsnet"

    def __init__(self, n_sensors: int, channels: int = 32, blocks: int = 3, kernel: int = 3,
                 seed: int = 0, model_id: str = "substitute"):
        if kernel % 2 != 1 or channels < 1 or blocks < 0:
            raise ConfigurationError("kernel must be odd, channels >= 1, blocks >= 0")
        self.n_sensors = n_sensors
        self.channels = channels
        self.blocks = blocks
        self.kernel = kernel
        self.seed = seed
        self.model_id = model_id

        rng = np.random.default_rng(seed)

        def he(shape, fan_in, gain=1.0):
            return Tensor(gain * rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        k, c, n = kernel, channels, n_sensors
        self.params = {"stem_w": he((k, n, c), k * n), "stem_b": zeros(c)}
        for i in range(blocks):
            self.params[f"block{i}_w1"] = he((k, c, c), k * c)
            self.params[f"block{i}_b1"] = zeros(c)
            self.params[f"block{i}_w2"] = he((k, c, c), k * c, gain=0.5)
            self.params[f"block{i}_b2"] = zeros(c)
        self.params["head_w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / (STEPS * c)), size=(STEPS * c, STEPS * n)),
                                       requires_grad=True)
        self.params["head_b"] = zeros(STEPS * n)

    def layer_shapes(self, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
        """Output shape of every layer for a probe batch (architecture audit)."""
        shapes = []
        x = Tensor(np.zeros((batch, STEPS, self.n_sensors)))
        self.forward(x, trace=shapes)
        return shapes

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[1] != STEPS or x.shape[2] != self.n_sensors:
            raise DimensionError(f"expected [B, {STEPS}, {self.n_sensors}], got {x.shape}")
        p = self.params
        h = ad.relu(ad.conv1d(x, p["stem_w"]) + p["stem_b"])
        if trace is not None:
            trace.append(("stem", h.shape))
        for i in range(self.blocks):
            r = ad.relu(ad.conv1d(h, p[f"block{i}_w1"]) + p[f"block{i}_b1"])
            r = ad.conv1d(r, p[f"block{i}_w2"]) + p[f"block{i}_b2"]
            h = ad.relu(h + r)
            if trace is not None:
                trace.append((f"block{i}", h.shape))
        batch = x.shape[0]
        out = ad.reshape(h, (batch, STEPS * self.channels)) @ p["head_w"] + p["head_b"]
        out = ad.reshape(out, (batch, STEPS, self.n_sensors))
        if trace is not None:
            trace.append(("head", out.shape))
        return out

    def get_config(self):
        return {"n_sensors": self.n_sensors, "channels": self.channels, "blocks": self.blocks,
                "kernel": self.kernel, "seed": self.seed, "model_id": self.model_id}

    @classmethod
    def from_config(cls, config, state):
        model = cls(config["n_sensors"], config["channels"], config["blocks"], config["kernel"],
                    seed=config["seed"], model_id=config["model_id"])
        model.load_state_dict(state)
        return model


@dataclass
class SubstituteTrainConfig:
    learning_rate: float = 0.005
    optimizer: str = "adam"
    batch_size: int = 24
    epochs: int = 50
    seed: int = 0
    channels: int = 32
    blocks: int = 3

    def __post_init__(self):
        if self.optimizer.lower() != "adam":
            raise ConfigurationError(f"only the Adam optimizer is supported, got {self.optimizer!r}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("learning rate, batch size and epochs must be positive")
        if self.channels < 1 or self.blocks < 0:
            raise ConfigurationError("channels must be positive and blocks non-negative")


def train_substitute(log, config: SubstituteTrainConfig,
                     model_id: str | None = None) -> tuple[ModelBundle, TrainResult]:
    """Fit a freshly initialised substitute to ``log`` (an OracleLog).

    Inputs and recorded predictions are both scaled with the mean/std of the
    logged inputs.
    """
    if len(log) == 0:
        raise ConfigurationError("oracle log is empty")
    normalizer = fit_normalizer(log.inputs)
    net = ResidualTSNet(log.inputs.shape[2], config.channels, config.blocks, seed=config.seed,
                        model_id=model_id or f"substitute-{log.model_id}")
    result = train_model(net, normalizer.apply(log.inputs), normalizer.apply(log.predictions),
                         TrainConfig(config.learning_rate, config.batch_size, config.epochs, config.seed))
    return ModelBundle(net, normalizer, role="substitute"), result


def fidelity(substitute, endpoint, probe_inputs: np.ndarray, sample_times=None) -> float:
    """RMSE, in vehicles/hour, between substitute and oracle outputs on probes.

    ``substitute`` is anything with ``predict_raw(inputs)``.
    """
    ours = substitute.predict_raw(probe_inputs)
    theirs = endpoint.query(probe_inputs, sample_times)
    return rmse(ours, theirs)


def adversary_bounds(normalizer: Normalizer, inputs: np.ndarray) -> tuple[float, float]:
    """Observed min/max of the normalised inputs: the plausibility box."""
    z = normalizer.apply(inputs)
    return float(z.min()), float(z.max())
