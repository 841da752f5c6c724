"""Exception hierarchy shared across the package."""


class CondLRError(Exception):
    """Base class for all package errors."""


class DimensionError(CondLRError, ValueError):
    """Operand shapes do not chain."""


class NumericalError(CondLRError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""


class RankDeficientError(NumericalError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SingularFactorError(NumericalError):
    """The r x r core factor S is numerically singular."""


class InfeasibleRankError(CondLRError, ValueError):
    """No rank satisfies the requested compression budget."""


class DataError(CondLRError):
    """Base class for dataset ingestion failures."""


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


class ConfigError(CondLRError, ValueError):
    pass
