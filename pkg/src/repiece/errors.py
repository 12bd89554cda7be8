"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4. Everything else is a plain bug.
"""


class RepieceError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(RepieceError):
    """Invalid configuration value or unusable config file."""


class DataError(RepieceError):
    """Missing, malformed or inconsistent input data."""


class NumericalError(RepieceError):
    """A non-finite value surfaced where the math requires finite ones."""
