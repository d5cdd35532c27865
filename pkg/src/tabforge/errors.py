"""Error taxonomy shared across the package.

Each class maps to one CLI exit code (see cli.EXIT_CODES), so commands can
fail with a structured status instead of a bare traceback.
"""


class TabforgeError(Exception):
    """Base class for all package errors."""


class DimensionError(TabforgeError):
    """Operand shapes are incompatible."""


class NumericError(TabforgeError):
    """A non-finite value appeared where finite math is required."""


class StateError(TabforgeError):
    """Operation called in an invalid order (e.g. backward before forward)."""


class SchemaError(TabforgeError):
    """Column declarations and data disagree."""


class ParseError(TabforgeError):
    """Malformed CSV input."""


class FitError(TabforgeError):
    """Preprocessing statistics cannot be estimated."""


class InputError(TabforgeError):
    """Argument outside the documented domain (empty input, bad count)."""


class DomainError(TabforgeError):
    """Numeric argument outside the mathematical domain (e.g. negative time)."""


class CompatibilityError(TabforgeError):
    """Artifacts trained on different schemas were combined."""


class ConfigError(TabforgeError):
    """Run configuration file is malformed or inconsistent."""


class IntegrityError(TabforgeError):
    """Model container failed checksum or shape validation."""


class ModelVersionError(TabforgeError):
    """Model container format version is not supported."""
