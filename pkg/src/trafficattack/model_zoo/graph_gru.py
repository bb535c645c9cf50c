from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..dataset import STEPS
from ..errors import ContractError, DimensionError
from .adjacency import random_walk
from .base import NeuralModel, register_kind


@register_kind
class GraphGRUModel(NeuralModel):
    """Graph-convolutional GRU encoder-decoder.

    Each step feeds ``[x_t, P x_t]`` to a GRU cell, where ``P`` is a
    row-stochastic transition matrix: the random-walk normalised distance
    kernel for the ``fixed`` variant, or ``softmax(logits)`` over trainable
    logits for the ``adaptive`` variant. The decoder starts from the last
    input step and feeds back its own readout for 12 steps.
    """

    kind = "graph_gru"

    def __init__(self, n_sensors: int, hidden: int = 32, *, variant: str = "fixed",
                 adjacency: np.ndarray | None = None, seed: int = 0, init: str = "uniform",
                 model_id: str | None = None):
        if variant not in ("fixed", "adaptive"):
            raise ContractError(f"unknown variant {variant!r}")
        if variant == "fixed":
            if adjacency is None:
                raise ContractError("fixed variant needs an adjacency matrix")
            adjacency = np.asarray(adjacency, dtype=np.float64)
            if adjacency.shape != (n_sensors, n_sensors):
                raise DimensionError(f"adjacency must be [{n_sensors}, {n_sensors}]")
        self.n_sensors = n_sensors
        self.hidden = hidden
        self.variant = variant
        self.adjacency = adjacency
        self.seed = seed
        self.model_id = model_id or f"gru-{variant}"
        self._transition = None if adjacency is None else Tensor(random_walk(adjacency).T)

        rng = np.random.default_rng(seed)
        n, h = n_sensors, hidden
        bound = 1.0 / np.sqrt(h)

        def w(*shape):
            if init == "zeros":
                return Tensor(np.zeros(shape), requires_grad=True)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        self.params = {
            "enc_wx": w(2 * n, 3 * h),
            "enc_wh": w(h, 3 * h),
            "enc_b": zeros(3 * h),
            "dec_wx": w(2 * n, 3 * h),
            "dec_wh": w(h, 3 * h),
            "dec_b": zeros(3 * h),
            "out_w": w(h, n),
            "out_b": zeros(n),
        }
        if variant == "adaptive":
            self.params["adj_logits"] = w(n, n)

    def transition(self) -> Tensor:
        """Transposed transition matrix, so that ``x @ transition()`` is ``(P x^T)^T``."""
        if self.variant == "adaptive":
            return ad.transpose(ad.softmax(self.params["adj_logits"], axis=-1))
        return self._transition

    def effective_adjacency(self) -> np.ndarray:
        return self.transition().data.T.copy()

    def _cell(self, gx: Tensor, h: Tensor | None, wh: Tensor) -> Tensor:
        hd = self.hidden
        if h is None:
            # zero state: the recurrent projection vanishes
            z = ad.sigmoid(gx[..., hd:2 * hd])
            n = ad.tanh(gx[..., 2 * hd:])
            return n - z * n
        gh = h @ wh
        r = ad.sigmoid(gx[..., :hd] + gh[..., :hd])
        z = ad.sigmoid(gx[..., hd:2 * hd] + gh[..., hd:2 * hd])
        n = ad.tanh(gx[..., 2 * hd:] + r * gh[..., 2 * hd:])
        return n + z * (h - n)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != STEPS or x.shape[2] != self.n_sensors:
            raise DimensionError(f"expected [B, {STEPS}, {self.n_sensors}], got {x.shape}")
        p = self.params
        pt = self.transition()
        batch = x.shape[0]

        feats = ad.concat([x, x @ pt], axis=-1)  # [B, 12, 2N]
        gx_all = feats @ p["enc_wx"] + p["enc_b"]
        h = None
        for t in range(STEPS):
            h = self._cell(gx_all[:, t, :], h, p["enc_wh"])

        y = x[:, STEPS - 1, :]
        outputs = []
        for _ in range(STEPS):
            gx = ad.concat([y, y @ pt], axis=-1) @ p["dec_wx"] + p["dec_b"]
            h = self._cell(gx, h, p["dec_wh"])
            y = h @ p["out_w"] + p["out_b"]
            outputs.append(ad.reshape(y, (batch, 1, self.n_sensors)))
        return ad.concat(outputs, axis=1)

    def get_config(self):
        return {
            "n_sensors": self.n_sensors,
            "hidden": self.hidden,
            "variant": self.variant,
            "seed": self.seed,
            "model_id": self.model_id,
        }

    def state_dict(self):
        state = super().state_dict()
        if self.adjacency is not None:
            state["adjacency"] = self.adjacency.copy()
        return state

    @classmethod
    def from_config(cls, config, state):
        state = dict(state)
        adjacency = state.pop("adjacency", None)
        model = cls(config["n_sensors"], config["hidden"], variant=config["variant"],
                    adjacency=adjacency, seed=config["seed"], model_id=config["model_id"])
        model.load_state_dict(state)
        return model


def gru_forward(model: GraphGRUModel, batch) -> Tensor:
    return model.forward(ad.as_tensor(batch))
