"""Exception types shared across the package.

The command-line front end maps these onto exit codes, so every module raises
one of them rather than a bare ``ValueError``.
"""


class MCNNError(Exception):
    """Base class for all package errors."""


class UsageError(MCNNError):
    """An API or command was called in a way that cannot make sense."""


class ShapeError(MCNNError, ValueError):
    """Array extents do not line up."""


class ConfigError(MCNNError, ValueError):
    """An architecture or run configuration is invalid."""


class DataFormatError(MCNNError, ValueError):
    """An input file does not follow its declared format."""


class IntegrityError(DataFormatError):
    """A binary payload is truncated or has the wrong size."""


class NumericError(MCNNError, ArithmeticError):
    """A non-finite value showed up where it must not."""
