"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config errors -> 2, input/data/format
errors -> 3, anything else -> 4.
"""


class RaggateError(Exception):
    """Base class for all package errors."""


class ConfigError(RaggateError):
    """A parameter or configuration value is out of its legal range."""


class InputError(RaggateError):
    """A runtime input (vector, score sample, draft, ...) is invalid."""


class DataError(RaggateError):
    """A data file or record violates its schema or referential integrity."""


class FormatError(DataError):
    """A binary or text artifact is corrupt, truncated, or mis-versioned."""
