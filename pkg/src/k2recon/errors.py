"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigurationError -> 2, dataset/file
problems -> 3, numerical failures -> 4.
"""


class K2ReconError(Exception):
    """Base class for all package errors."""


class ContractViolation(K2ReconError):
    """An operation was called with arguments violating its contract."""


class ConfigurationError(K2ReconError):
    """A user-supplied configuration value is invalid or infeasible."""


class NumericalBreakdownError(K2ReconError):
    """A numerical routine encountered non-finite values or diverged."""


class CorruptDatasetError(K2ReconError):
    """A stored container failed validation (size, shape or checksum)."""


class UnsupportedVersionError(K2ReconError):
    """A stored container declares a format version this code cannot read."""
