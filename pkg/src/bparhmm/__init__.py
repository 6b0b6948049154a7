"""Beta-process autoregressive HMM: feature-based discovery of shared
dynamical behaviors across multiple time series."""

from .errors import BparhmmError, ConfigError, InvalidInputError, InvalidStateError, NumericFailure
from .model import Dataset, FeatureMatrix, MniwPrior, TimeSeries, VarBehavior
from .driver import RunConfig, initialize, run_chains, run_single

__all__ = [
    "BparhmmError",
    "ConfigError",
    "InvalidInputError",
    "InvalidStateError",
    "NumericFailure",
    "Dataset",
    "FeatureMatrix",
    "MniwPrior",
    "TimeSeries",
    "VarBehavior",
    "RunConfig",
    "initialize",
    "run_chains",
    "run_single",
]

__version__ = "0.1.0"
