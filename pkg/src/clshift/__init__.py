"""Continual-learning strategies and a two-domain forgetting benchmark.

Joint training with fractional replay, EWC with a binarized empirical Fisher
diagonal, and LWF with partial-label soft targets, measured by AUC-based
backward and forward transfer.
"""

from .errors import ConfigurationError, IntegrityError, NumericError, ShapeError
from .nn import BACKEND, MlpModel, ParameterVector

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigurationError",
    "IntegrityError",
    "MlpModel",
    "NumericError",
    "ParameterVector",
    "ShapeError",
]
