"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code so failures stay diagnosable
from shell scripts: validation 2, numerical 3, I/O 4.
"""


class SCTError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(SCTError):
    """Invalid inputs, parameters, or configuration."""

    exit_code = 2


class NumericalError(SCTError):
    """Numerical failure: non-convergence, conditioning, non-finite values."""

    exit_code = 3


class IOFormatError(SCTError):
    """Malformed, truncated, or incompatible files."""

    exit_code = 4
