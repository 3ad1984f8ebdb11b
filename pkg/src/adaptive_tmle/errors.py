"""Exception types shared across the package.

The CLI maps these onto exit codes, so library code should raise the most
specific type that applies rather than bare ValueError.
"""


class AdaptiveTmleError(Exception):
    """Base class for package errors."""


class ConfigError(AdaptiveTmleError):
    """Invalid configuration: unknown keys, bad values, inconsistent options."""


class DataError(AdaptiveTmleError):
    """Unusable input data: schema problems, missing values, degenerate columns."""


class NumericError(AdaptiveTmleError):
    """Estimation cannot proceed: singular systems, undefined estimands."""
