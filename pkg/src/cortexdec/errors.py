"""Exception hierarchy shared across the package.

ConfigError maps to CLI exit code 2 (bad flags / bad config file / bad
request), everything else that escapes maps to exit code 1.
"""


class CortexdecError(Exception):
    """Base class for all package errors."""


class ConfigError(CortexdecError):
    """Invalid configuration value or precondition violation."""


class DimensionError(CortexdecError):
    """Tensor shapes do not match an operation's contract."""


class DataFormatError(CortexdecError):
    """Malformed or truncated container / checkpoint file."""


class TrainingDivergenceError(CortexdecError):
    """Non-finite loss or gradient encountered during optimization."""
