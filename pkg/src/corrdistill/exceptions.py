"""Exception hierarchy shared across the package."""


class CorrDistillError(Exception):
    """Base class for all package errors."""


class DimensionError(CorrDistillError, ValueError):
    pass


class BatchSizeError(CorrDistillError, ValueError):
    pass


class ContractError(CorrDistillError, ValueError):
    pass


class NumericalError(CorrDistillError, ArithmeticError):
    pass


class DegenerateInputError(CorrDistillError, ValueError):
    pass


class ConfigError(CorrDistillError, ValueError):
    pass


class CheckpointError(CorrDistillError, ValueError):
    pass
