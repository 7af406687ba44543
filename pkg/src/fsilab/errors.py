"""Exception types shared across the package.

Exit-code mapping used by the command line driver:
ConfigError -> 2, NumericsError -> 3, GeometryError -> 4.
"""


class FsilabError(Exception):
    """Base class for all package errors."""


class ConfigError(FsilabError):
    """Invalid configuration, arguments, or input data."""


class NumericsError(FsilabError):
    """Linear solve failure, non-finite values, or non-convergence."""


class GeometryError(FsilabError):
    """Geometric admissibility violation (margins, contact)."""


class DiffeoFailure(GeometryError):
    """Jacobian determinant dropped to or below its floor.

    Carries the offending node index and the determinant value there.
    """

    def __init__(self, message, node=None, value=None):
        super().__init__(message)
        self.node = node
        self.value = value
