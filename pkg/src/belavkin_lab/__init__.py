"""Repeated-measurement quantum trajectories and their continuous limits."""

from .errors import (
    AssumptionError,
    BelavkinLabError,
    ConstructionError,
    CovarianceError,
    DegeneracyError,
    DivergenceError,
    ResonanceError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "AssumptionError",
    "BelavkinLabError",
    "ConstructionError",
    "CovarianceError",
    "DegeneracyError",
    "DivergenceError",
    "ResonanceError",
    "ValidationError",
    "__version__",
]
