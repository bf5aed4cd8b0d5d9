"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class EpidemicError(Exception):
    """Base class for all package errors."""


class InvalidDegree(EpidemicError, ValueError):
    """Sample size / degree outside the range a topology supports."""


class InvalidSize(EpidemicError, ValueError):
    """Node count not admissible for the requested topology."""


class OutOfRange(EpidemicError, IndexError):
    """Node id outside ``[0, n)``."""


class InvalidParam(EpidemicError, ValueError):
    """Numerical parameter outside its admissible domain."""


class DegenerateInput(EpidemicError, ValueError):
    """Input vectors have zero dispersion, so a ratio is undefined."""


class Disconnected(EpidemicError, ValueError):
    """Graph is not connected."""


class ZeroNoise(EpidemicError, ValueError):
    """Gradient noise level is zero where a positive value is required."""


class DimensionMismatch(EpidemicError, ValueError):
    """Vectors of different dimension were combined."""


class RoundMismatch(EpidemicError, ValueError):
    """A message stamped with one round was delivered in another."""


class MismatchedConfigs(EpidemicError, ValueError):
    """Experiment configs that must agree on shared fields do not."""


class ConfigError(EpidemicError, ValueError):
    """Config file missing, unreadable, or semantically invalid."""


class NonFinite(EpidemicError, ArithmeticError):
    """A model became NaN or infinite."""

    def __init__(self, message: str, round_index: int | None = None) -> None:
        super().__init__(message)
        self.round_index = round_index
