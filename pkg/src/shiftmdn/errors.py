"""Exception hierarchy shared across the package.

Each class maps to a CLI exit code so failures are distinguishable in
scripts: ConfigError -> 2, DataError -> 3, NumericalError -> 4.
"""


class ShiftMdnError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(ShiftMdnError):
    """Invalid configuration: unknown keys, bad values, missing files."""

    exit_code = 2


class DataError(ShiftMdnError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class NumericalError(ShiftMdnError):
    """Numerical failure: non-finite losses, degenerate pools, divergence."""

    exit_code = 4
