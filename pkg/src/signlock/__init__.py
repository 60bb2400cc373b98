"""Sign lock-in instrumentation, interventions, bounds and sub-bit compression."""

from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    InfeasibleBudgetError,
    NumericError,
    SignlockError,
)
from .matio import WeightMatrix, flip_ratio, load_matrix, recompose, save_matrix, sign_decompose

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DivergenceError", "FormatError", "InfeasibleBudgetError", "NumericError",
    "SignlockError", "WeightMatrix", "flip_ratio", "load_matrix", "recompose", "save_matrix",
    "sign_decompose",
]
