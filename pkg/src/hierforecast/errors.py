"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4. Plain ValueError/TypeError stay
what they are: programmer errors, not run outcomes.
"""


class HierforecastError(Exception):
    """Base class for run-level failures."""

    exit_code = 1


class ConfigError(HierforecastError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(HierforecastError):
    """Input data violates a documented precondition."""

    exit_code = 3


class NumericalError(HierforecastError):
    """A numerical procedure failed (singular system, divergence)."""

    exit_code = 4
