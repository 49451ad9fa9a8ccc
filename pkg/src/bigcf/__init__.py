"""Bilateral intent-guided graph collaborative filtering on a small numpy autodiff core."""
from .config import ABLATIONS, VARIANTS, TrainConfig, parse_config
from .errors import (BigcfError, ConfigError, ContractError, DataError, NumericError,
                     ParseError, PersistenceError)
from .evaluation import MetricReport, evaluate, export_intent_scores
from .graphdata import InteractionDataset, build_normalized_adjacency, load_dataset
from .training import fit, init_params, test_metrics

__all__ = [
    "ABLATIONS", "VARIANTS", "TrainConfig", "parse_config",
    "BigcfError", "ConfigError", "ContractError", "DataError", "NumericError", "ParseError",
    "PersistenceError", "MetricReport", "evaluate", "export_intent_scores",
    "InteractionDataset", "build_normalized_adjacency", "load_dataset",
    "fit", "init_params", "test_metrics",
]
__version__ = "0.1.0"
