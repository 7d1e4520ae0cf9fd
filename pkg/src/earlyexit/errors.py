"""Exception taxonomy shared across the package.

The CLI maps each class to a one-line ``error: <kind>: <message>`` on stderr
and a nonzero exit status.
"""


class EarlyExitError(Exception):
    """Base class; `kind` is the machine-parsable category token."""

    kind = "error"


class DimensionError(EarlyExitError):
    kind = "dimension"


class ArgumentError(EarlyExitError):
    kind = "argument"


class CapacityError(EarlyExitError):
    kind = "capacity"


class DataError(EarlyExitError):
    kind = "data"


class ConfigurationError(EarlyExitError):
    kind = "config"


class FormatError(EarlyExitError):
    kind = "format"


class ValidationError(EarlyExitError):
    kind = "validation"
