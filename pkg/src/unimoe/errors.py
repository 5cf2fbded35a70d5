"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError and CheckpointError are
user/config problems (exit 1), NumericError is a numeric failure (exit 2).
"""


class UmoeError(Exception):
    pass


class ShapeError(UmoeError):
    """Operand shapes are inconsistent for the requested operation."""


class ConfigError(UmoeError):
    """Invalid configuration, arguments, or missing prerequisites."""


class NumericError(UmoeError):
    """Non-finite values or otherwise undefined numeric results."""


class CheckpointError(UmoeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""
