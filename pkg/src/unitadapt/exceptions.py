"""Exception hierarchy.

Each class carries the process exit code the command-line front end uses
when the error escapes a subcommand.
"""


class UnitAdaptError(Exception):
    exit_code = 1


class UsageError(UnitAdaptError):
    exit_code = 2


class ConfigurationError(UnitAdaptError, ValueError):
    exit_code = 3


class DataError(UnitAdaptError, ValueError):
    """Input data violates a documented precondition (domain error)."""

    exit_code = 4


class ContractViolation(DataError):
    """Shapes or values handed to an operation break its contract."""


class ModelHealthError(UnitAdaptError, FloatingPointError):
    """Non-finite values produced by a network, loss or sampler."""

    exit_code = 5

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class CheckpointError(UnitAdaptError):
    exit_code = 6


class MissingBaseError(CheckpointError):
    pass


class NotFittedError(UnitAdaptError, AttributeError):
    exit_code = 3
