"""Exception hierarchy.

Each class carries the CLI exit code it maps to, so the front end can turn
any library failure into a stable process status.
"""


class CalibError(Exception):
    exit_code = 1


class UsageError(CalibError):
    exit_code = 2


class ParameterError(UsageError):
    """A kernel, model or option parameter is out of its admissible range."""


class DataError(CalibError):
    exit_code = 3


class DomainError(DataError):
    """A point lies outside the domain of a kernel or model."""


class InfeasibleError(DataError):
    """Calibration values fall outside the parameter box."""


class NumericError(CalibError):
    exit_code = 4


class ConvergenceError(CalibError):
    exit_code = 5
