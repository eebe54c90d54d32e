"""Exception types shared across the toolkit."""


class EwcNmtError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EwcNmtError, ValueError):
    pass


class ContractError(EwcNmtError, RuntimeError):
    pass


class DeterminismError(EwcNmtError, RuntimeError):
    pass


class NumericError(EwcNmtError, ArithmeticError):
    """NaN or Inf appeared where finite values are required."""


class DataError(EwcNmtError, ValueError):
    pass


class EmptyBatchError(DataError):
    pass


class ConfigError(EwcNmtError, ValueError):
    pass


class CompatibilityError(EwcNmtError, ValueError):
    """Checkpoints or artifacts do not fit the requested model."""
