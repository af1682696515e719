"""Exception hierarchy shared by every module."""


class MvRiskError(Exception):
    """Base class for library errors."""


class InputError(MvRiskError, ValueError):
    """Malformed arguments: bad shapes, invalid simplex vectors, unknown kinds."""


class NumericError(MvRiskError, ArithmeticError):
    """A numerical failure (non-finite values, ill-conditioning, no convergence)."""

    def __init__(self, message, *, stage=None, index=None):
        super().__init__(message)
        self.stage = stage
        self.index = index


class IllConditionedError(NumericError):
    """A matrix needed for inversion has its k-th singular value below tolerance."""

    def __init__(self, message, *, singular_value=None, stage=None, index=None):
        super().__init__(message, stage=stage, index=index)
        self.singular_value = singular_value


class DegenerateScaleError(NumericError):
    """The feature scale B is zero, so gradient blocks cannot be rescaled."""


class AmplificationError(NumericError):
    """Every candidate estimate was discarded by the outlier rule."""


class UnsupportedError(MvRiskError):
    """Request is outside the documented support (e.g. exact gap for k > 10)."""
