from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataset import SensorNetwork
from ..errors import ContractError, DegenerateDataError


@dataclass(frozen=True)
class AdjacencyMatrix:
    weights: np.ndarray  # [N, N]
    sigma_dist: float


def build_adjacency(network: SensorNetwork, *, squared: bool = False,
                    threshold: float | None = None) -> AdjacencyMatrix:
    """Gaussian-style distance kernel ``A_ij = exp(-dist_ij / sigma**2)``.

    ``sigma`` is the population standard deviation of the off-diagonal
    distances. ``squared=True`` uses ``dist**2`` in the numerator instead.
    Weights below ``threshold`` (if given) are zeroed; the diagonal stays 1.
    """
    d = np.asarray(network.pairwise_distances, dtype=np.float64)
    n = d.shape[0]
    if n < 2:
        raise ContractError("adjacency needs at least two sensors")
    off = d[~np.eye(n, dtype=bool)]
    sigma = float(off.std())
    if sigma <= 1e-12 * max(float(off.max()), 1e-300):
        raise DegenerateDataError("all pairwise distances are equal; kernel width is zero")
    num = d ** 2 if squared else d
    weights = np.exp(-num / sigma ** 2)
    weights = 0.5 * (weights + weights.T)
    if threshold is not None:
        weights = np.where(weights >= threshold, weights, 0.0)
    np.fill_diagonal(weights, 1.0)
    return AdjacencyMatrix(weights, sigma)


def random_walk(weights: np.ndarray) -> np.ndarray:
    """Row-normalised transition matrix D^-1 W."""
    return weights / weights.sum(axis=1, keepdims=True)
