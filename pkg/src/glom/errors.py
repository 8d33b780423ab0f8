"""Exception hierarchy shared by every glom module."""


class GlomError(Exception):
    """Base class for all errors raised by glom."""


class DimensionError(GlomError, ValueError):
    pass


class ParameterError(GlomError, ValueError):
    pass


class NumericError(GlomError, ArithmeticError):
    pass


class GraphError(GlomError, RuntimeError):
    pass


class DataError(GlomError, ValueError):
    pass


class ValidationError(GlomError, ValueError):
    pass


class CompatibilityError(GlomError, ValueError):
    pass


class FormatError(GlomError, ValueError):
    pass


class VersionError(FormatError):
    pass


class IntegrityError(FormatError):
    pass


class ConvergenceError(GlomError, RuntimeError):
    """Raised when SMO exhausts its iteration budget.

    ``model`` carries the partially optimized machine so callers that can
    tolerate an approximate solution (grid search) may still score it.
    """

    def __init__(self, message, violation=None, model=None):
        super().__init__(message)
        self.violation = violation
        self.model = model


class CalibrationError(GlomError, RuntimeError):
    pass


class PlanError(GlomError, ValueError):
    pass
