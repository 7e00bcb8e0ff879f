"""High-order effective wave equations for periodic media."""

from .cell import CellGeometry, CoefficientField, CorrectorField, builtin_medium, make_medium
from .effective import EffectiveModel, algorithm1, bloch_dispersion_1d, savings_count
from .errors import ConfigError, LongwaveError, NumericalError
from .tensor import SymTensor

__all__ = [
    "CellGeometry", "CoefficientField", "CorrectorField", "builtin_medium", "make_medium",
    "EffectiveModel", "algorithm1", "bloch_dispersion_1d", "savings_count",
    "ConfigError", "LongwaveError", "NumericalError", "SymTensor",
]
