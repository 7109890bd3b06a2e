"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DualLossError(Exception):
    exit_code = 1


class ConfigError(DualLossError):
    exit_code = 1


class ParameterError(DualLossError, ValueError):
    exit_code = 1


class DimensionError(DualLossError, ValueError):
    exit_code = 2


class LabelError(DualLossError, ValueError):
    exit_code = 2


class FormatError(DualLossError):
    exit_code = 2


class VersionError(FormatError):
    pass


class DatasetError(DualLossError):
    exit_code = 2


class NumericError(DualLossError, ArithmeticError):
    exit_code = 3


class DegenerateInputError(NumericError):
    """A vector too close to zero to normalize."""
