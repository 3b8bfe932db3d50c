"""FishNet on a small numpy autodiff engine.

The graph engine lives in :mod:`fishnet.tensor`, network assembly in
:mod:`fishnet.builder`, gradient-flow analysis in :mod:`fishnet.analyzer` and
the training harness in :mod:`fishnet.train`.
"""

from .accounting import count_flops, count_params, param_ledger
from .analyzer import analyze, classify_edges, verify_direct_bp_numerical
from .builder import build_fishnet, zero_residual_branches
from .config import FishNetConfig, load_config, parse_config
from .errors import (AnalysisError, AttributeValidationError, BuildError, ConfigError,
                     FishNetError, FormatError, ShapeError, TrainingDivergedError)
from .tensor import Graph, OpNode, Tensor
from .train import TrainRecipe, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AnalysisError", "AttributeValidationError", "BuildError", "ConfigError", "FishNetConfig",
    "FishNetError", "FormatError", "Graph", "OpNode", "ShapeError", "Tensor",
    "TrainRecipe", "TrainingDivergedError", "analyze", "build_fishnet", "classify_edges",
    "count_flops", "count_params", "evaluate", "load_config", "param_ledger", "parse_config",
    "train", "verify_direct_bp_numerical", "zero_residual_branches",
]
