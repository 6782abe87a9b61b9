"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes by category: config errors, data errors,
numeric errors, and io/format errors.
"""


class CycleCapError(Exception):
    """Base class for all package errors."""

    category = "config"


class ConfigError(CycleCapError):
    """Invalid configuration value or flag combination."""

    category = "config"


class DataError(CycleCapError):
    """Invalid input data: empty corpora, malformed records, bad indices."""

    category = "data"


class FormatError(CycleCapError):
    """Malformed on-disk artifact: bad magic, truncation, schema mismatch."""

    category = "io"


class NumericError(CycleCapError):
    """Non-finite values or numerically invalid operations."""

    category = "numeric"


class DimensionError(NumericError):
    """Operand shapes do not conform for the requested operation."""


class StateError(CycleCapError):
    """API misuse: an object was driven through an invalid state transition."""

    category = "numeric"
