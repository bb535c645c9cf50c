"""Target forecasters: linear regression, historical average, graph GRUs."""

from .adjacency import AdjacencyMatrix, build_adjacency, random_walk
from .base import MODEL_KINDS, ForecastModel, ModelBundle, NeuralModel
from .graph_gru import GraphGRUModel, gru_forward
from .historical import HAModel, ha_predict
from .linear import LRModel, fit_lr
from .serialization import load_model, save_model
from .training import TrainConfig, TrainResult, rmse_loss, train_model

__all__ = [
    "AdjacencyMatrix",
    "ForecastModel",
    "GraphGRUModel",
    "HAModel",
    "LRModel",
    "MODEL_KINDS",
    "ModelBundle",
    "NeuralModel",
    "TrainConfig",
    "TrainResult",
    "build_adjacency",
    "fit_lr",
    "gru_forward",
    "ha_predict",
    "load_model",
    "random_walk",
    "rmse_loss",
    "save_model",
    "train_model",
]
