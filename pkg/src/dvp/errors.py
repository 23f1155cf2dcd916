"""Exception hierarchy shared by every module.

Each error class carries the process exit code the CLI maps it to.
"""


class DVPError(Exception):
    exit_code = 1


class UsageError(DVPError):
    exit_code = 2


class ConfigError(DVPError, ValueError):
    exit_code = 2


class ShapeError(DVPError, ValueError):
    exit_code = 3


class DomainError(DVPError, ValueError):
    exit_code = 3


class DataError(DVPError, ValueError):
    exit_code = 3


class FormatError(DataError):
    pass


class DisjointnessError(DataError):
    pass


class ValidationError(DataError):
    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


class NumericError(DVPError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class CapabilityError(DVPError):
    exit_code = 5
