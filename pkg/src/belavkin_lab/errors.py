"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries the code it
should produce when it escapes a command.
"""

from __future__ import annotations


class BelavkinLabError(Exception):
    """Base class for all library errors."""

    exit_code = 5


class ValidationError(BelavkinLabError):
    """Malformed input: bad shapes, invalid states, bad configuration."""

    exit_code = 2


class AssumptionError(ValidationError):
    """A modelling assumption (e.g. non-diagonal observable) does not hold."""


class CovarianceError(ValidationError):
    """A noise covariance matrix failed the PSD check."""


class ResonanceError(BelavkinLabError):
    """phi_{iD} is not invertible: two eigenvalues differ by a nonzero multiple of 2*pi."""

    exit_code = 3

    def __init__(self, k: int, l: int, lam_k: float, lam_l: float):
        self.pair = (k, l)
        self.eigenvalues = (lam_k, lam_l)
        super().__init__(
            f"resonant eigenvalue pair ({k}, {l}): "
            f"lambda_{k}={lam_k:.12g}, lambda_{l}={lam_l:.12g}, "
            f"difference {lam_l - lam_k:.12g} is a nonzero multiple of 2*pi"
        )


class ConstructionError(BelavkinLabError):
    """A unitary or block construction failed its own postcondition check."""

    exit_code = 3


class DegeneracyError(BelavkinLabError):
    """Every measurement outcome has vanishing probability."""

    exit_code = 3


class DivergenceError(BelavkinLabError):
    """An integrator left its bounded region."""

    exit_code = 3

    def __init__(self, step: int, norm: float, limit: float):
        self.step = step
        self.norm = norm
        super().__init__(f"state norm {norm:.3e} exceeded {limit:.1e} at step {step}")
