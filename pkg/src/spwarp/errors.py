"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters more than the message wording.
"""


class SpwarpError(Exception):
    """Base class for all package errors."""


class ConfigError(SpwarpError):
    """Invalid or contradictory run configuration (CLI exit code 2)."""


class DataError(SpwarpError):
    """Invalid input data: bad CSV cells, domain violations (exit code 3)."""


class NumericError(SpwarpError):
    """Numerical failure: non-convergence, singular systems (exit code 4)."""


class ArchiveVersionError(SpwarpError):
    """Model archive written by an incompatible format version (exit code 5)."""
