""" Exception hierarchy shared by the sensing and experiment packages. """

from typing import Optional


class SensingError(Exception):
    """Base class for every error raised by the simulation library."""


class ConfigurationError(SensingError, ValueError):
    """Invalid parameters, mismatched dimensions or refused oracle sizes."""


class ScenarioFileError(ConfigurationError):
    """
    A scenario file failed to parse or validate.

    Attributes:
        path (str): The scenario file path.
        line (Optional[int]): 1-based line of the offending entry, if known.
        reason (str): Human readable reason.
    """

    def __init__(self, path: str, reason: str, line: Optional[int] = None):
        self.path = path
        self.line = line
        self.reason = reason
        location = f"{path}:{line}" if line is not None else path
        super().__init__(f"{location}: {reason}")


class DegenerateGeometryError(SensingError, ValueError):
    """The target coincides with a BS origin or no RoI pixel is usable."""


class BehindArrayError(DegenerateGeometryError):
    """The local angle of arrival lies outside (-pi/2, pi/2)."""


class UndefinedCoefficientError(SensingError, ValueError):
    """The channel coefficient is undefined because ||Gx|| = 0."""


class NumericalDerivativeError(SensingError, RuntimeError):
    """A finite-difference derivative failed its step-halving check."""


class NuisanceDegeneracyError(SensingError, RuntimeError):
    """The nuisance block of a FIM is too ill-conditioned to invert."""


class UnobservablePositionError(SensingError, RuntimeError):
    """The position FIM is singular."""


class ExperimentAbortedError(SensingError, RuntimeError):
    """Too many Monte Carlo trials failed."""
