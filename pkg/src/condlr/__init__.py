"""Low-rank neural network training with a per-layer condition-number bound."""

from .errors import (CondLRError, ConfigError, DataError, DimensionError, InfeasibleRankError,
                     NumericalError)
from .lowrank import FactorizedLayer, TrainVariant, condlr_step, select_rank, sigma_band_project
from .nn import Activation, DenseLayer, Network, forward, backward, cross_entropy

__version__ = "0.1.0"

__all__ = [
    "Activation", "CondLRError", "ConfigError", "DataError", "DenseLayer", "DimensionError",
    "FactorizedLayer", "InfeasibleRankError", "Network", "NumericalError", "TrainVariant",
    "backward", "condlr_step", "cross_entropy", "forward", "select_rank", "sigma_band_project",
]
