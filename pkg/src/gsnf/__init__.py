"""Graph-structured neural flows for classifying irregularly sampled multivariate series."""

from .data import Dataset, IrregularSeries, SynthSpec, generate_synthetic, load_dataset, save_dataset
from .estimator import GSNFClassifier, SeriesNormalizer
from .exceptions import (ConfigError, ContractViolation, DatasetError, DimensionError, GSNFError,
                         NonConvergenceError, NumericError, UndefinedMetricError)
from .metrics import auprc, auroc
from .model import GSNFModel
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "IrregularSeries",
    "SynthSpec",
    "generate_synthetic",
    "load_dataset",
    "save_dataset",
    "GSNFClassifier",
    "SeriesNormalizer",
    "GSNFModel",
    "TrainConfig",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "auroc",
    "auprc",
    "ConfigError",
    "ContractViolation",
    "DatasetError",
    "DimensionError",
    "GSNFError",
    "NonConvergenceError",
    "NumericError",
    "UndefinedMetricError",
]
