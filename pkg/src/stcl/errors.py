"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class STCLError(Exception):
    exit_code = 1


class ConfigError(STCLError, ValueError):
    exit_code = 2


class InputError(STCLError, ValueError):
    exit_code = 2


class ContractError(STCLError, ValueError):
    """Raised when an operation's precondition is violated by the caller."""

    exit_code = 2


class DimensionError(ContractError):
    pass


class DataQualityError(STCLError):
    exit_code = 3


class NumericalError(STCLError, ArithmeticError):
    exit_code = 4


class CompatibilityError(STCLError):
    exit_code = 5
