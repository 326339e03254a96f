"""Exception hierarchy shared by every layer of the package."""


class DCFDGError(Exception):
    pass


class DimensionError(DCFDGError, ValueError):
    """Operand shapes do not conform for the requested operation."""


class ContractError(DCFDGError, RuntimeError):
    """A caller broke an operation's precondition (non-scalar backward, missing grad, ...)."""


class NumericError(DCFDGError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(DCFDGError, ValueError):
    pass


class DataError(DCFDGError, ValueError):
    pass


class CheckpointError(DCFDGError, IOError):
    pass
