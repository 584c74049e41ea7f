"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class GftDefectError(Exception):
    exit_code = 1


class ConfigError(GftDefectError, ValueError):
    exit_code = 2


class InvalidDimensionError(ConfigError):
    pass


class InputOutputError(GftDefectError, OSError):
    exit_code = 3


class FormatError(GftDefectError, ValueError):
    exit_code = 4


class CompatibilityError(GftDefectError, ValueError):
    exit_code = 5


class UndefinedMetricError(GftDefectError, ValueError):
    exit_code = 6


class CostRefusalError(GftDefectError, ValueError):
    exit_code = 7


class DivergenceError(GftDefectError, ArithmeticError):
    exit_code = 8

    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class SamplingExhaustedError(GftDefectError, RuntimeError):
    exit_code = 9


class ShapeError(GftDefectError, ValueError):
    exit_code = 10


class EmptyInputError(GftDefectError, ValueError):
    exit_code = 11


class EmptyClassError(EmptyInputError):
    pass


class ContractViolation(GftDefectError, ValueError):
    exit_code = 12


class NumericError(GftDefectError, ArithmeticError):
    exit_code = 13
