"""Federated training of graph-convolutional traffic forecasters with learned
adjacency and node-specific parameters."""

from .stgcn import Architecture, ModelParams, init_params, model_forward
from .federation import StrategyKind, run_rounds, prepare_data

__all__ = ["Architecture", "ModelParams", "init_params", "model_forward", "StrategyKind",
           "run_rounds", "prepare_data"]
__version__ = "0.1.0"
