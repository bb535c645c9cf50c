"""Gradient-sign attacks computed on the substitute and replayed on the target.

Both methods ascend the substitute's RMSE against the ground truth. Work is
in the adversary's normalised space; bounds ``clip_min``/``clip_max`` are
normalised values. An entry whose original value already lies outside the
box may stay where it is, but the attack never moves it further out, so
the L-infinity budget always holds.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigurationError, DimensionError, NumericError
from .model_zoo.base import ModelBundle, NeuralModel
from .model_zoo.training import RMSE_GUARD

METHODS = ("fgsm", "bim")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "fgsm"
    epsilon: float = 0.2
    alpha: float = 0.05
    iterations: int = 10
    clip_min: float = -np.inf
    clip_max: float = np.inf

    def __post_init__(self):
        method = self.method.lower()
        object.__setattr__(self, "method", method)
        if method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if method == "bim" and not (0 < self.alpha <= self.epsilon and self.iterations >= 1):
            raise ConfigurationError("BIM needs 0 < alpha <= epsilon and iterations >= 1")
        if not self.clip_min < self.clip_max:
            raise ConfigurationError("clip_min must be below clip_max")

    def with_bounds(self, clip_min: float, clip_max: float) -> "AttackConfig":
        return AttackConfig(self.method, self.epsilon, self.alpha, self.iterations, clip_min, clip_max)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdversarialBatch:
    originals: np.ndarray  # [S, 12, N], normalised
    adversarials: np.ndarray
    config: AttackConfig

    @property
    def linf(self) -> np.ndarray:
        d = (self.adversarials - self.originals).reshape(len(self.originals), -1)
        return np.abs(d).max(axis=1)

    @property
    def l2(self) -> np.ndarray:
        d = (self.adversarials - self.originals).reshape(len(self.originals), -1)
        return np.sqrt((d ** 2).sum(axis=1))


def _net(sub) -> NeuralModel:
    return sub.model if isinstance(sub, ModelBundle) else sub


def attack_cost(net: NeuralModel, x: Tensor, y) -> Tensor:
    """Sum over samples of each sample's RMSE (guarded under the root).

    Sample i's slice of the input gradient is therefore exactly the
    gradient of sample i's own RMSE.
    """
    err = net.forward(x) - ad.as_tensor(y)
    per_sample = ad.sqrt(ad.mean(ad.square(err), axis=(1, 2)) + RMSE_GUARD)
    return ad.sum_(per_sample)


def input_gradient(sub, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d RMSE(sub(x), y) / dx for every sample (normalised space)."""
    net = _net(sub)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"input {x.shape} and ground truth {y.shape} differ")
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        cost = attack_cost(net, xt, y)
    grads = ad.backward(cost, tape)
    g = grads.get(xt)
    if g is None:
        g = np.zeros_like(x)
    if not np.isfinite(g).all():
        raise NumericError("input gradient is not finite")
    return g


def _box(x: np.ndarray, config: AttackConfig) -> tuple[np.ndarray, np.ndarray]:
    return np.minimum(config.clip_min, x), np.maximum(config.clip_max, x)


def fgsm(sub, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> np.ndarray:
    """x* = clip(x + eps * sign(grad)), one step."""
    if config.method != "fgsm":
        raise ConfigurationError("config.method must be 'fgsm'")
    x = np.asarray(x, dtype=np.float64)
    step = x + config.epsilon * np.sign(input_gradient(sub, x, y))
    lo, hi = _box(x, config)
    return np.clip(step, lo, hi)


def bim(sub, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> np.ndarray:
    """Iterated sign steps of size alpha, each projected onto the eps-ball and the box."""
    if config.method != "bim":
        raise ConfigurationError("config.method must be 'bim'")
    x = np.asarray(x, dtype=np.float64)
    eps = config.epsilon
    ball_lo, ball_hi = x - eps, x + eps
    lo, hi = _box(x, config)
    adv = x.copy()
    for _ in range(config.iterations):
        step = adv + config.alpha * np.sign(input_gradient(sub, adv, y))
        adv = np.clip(np.clip(step, ball_lo, ball_hi), lo, hi)
    return adv


def generate(sub, x: np.ndarray, y: np.ndarray, config: AttackConfig,
             batch_size: int = 256) -> AdversarialBatch:
    """Craft adversarial inputs for every sample, ``batch_size`` samples per tape."""
    x = np.asarray(x, dtype=np.float64)
    fn = fgsm if config.method == "fgsm" else bim
    parts = [fn(sub, x[i:i + batch_size], y[i:i + batch_size], config) for i in range(0, len(x), batch_size)]
    adv = np.concatenate(parts) if parts else x.copy()
    return AdversarialBatch(x.copy(), adv, config)


@dataclass
class AttackOutcome:
    batch: AdversarialBatch
    original_raw: np.ndarray
    adversarial_raw: np.ndarray
    pre_predictions: np.ndarray
    post_predictions: np.ndarray


def run_attack(endpoint, substitute: ModelBundle, inputs: np.ndarray, ground_truth: np.ndarray,
               config: AttackConfig, sample_times=None, *, use_oracle_targets: bool = False) -> AttackOutcome:
    """Craft on the substitute, then deliver originals and adversarials to the oracle.

    ``inputs`` and ``ground_truth`` are raw flows. With ``use_oracle_targets``
    the ascended cost uses the target's own forecasts as ``y``.
    """
    norm = substitute.normalizer
    if norm is None:
        raise ConfigurationError("substitute bundle has no normalizer")
    inputs = np.asarray(inputs, dtype=np.float64)
    pre = endpoint.query(inputs, sample_times)
    y = norm.apply(pre if use_oracle_targets else ground_truth)
    batch = generate(substitute, norm.apply(inputs), y, config)
    # clip_min >= -mu/sigma keeps flows non-negative; max() only absorbs rounding
    adv_raw = np.maximum(norm.invert(batch.adversarials), 0.0)
    post = endpoint.query(adv_raw, sample_times)
    return AttackOutcome(batch, inputs.copy(), adv_raw, pre, post)
