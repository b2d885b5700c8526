"""Exception hierarchy shared by every stage of the pipeline."""


class ProfitError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ProfitError, ValueError):
    """Input data or configuration violates a documented invariant."""


class StructuralError(ValidationError):
    """Input file is readable but its layout is inconsistent (e.g. ragged grids)."""


class SmoothingError(ProfitError):
    """A smoother could not produce a fit (degenerate window, rank deficiency)."""


class DegenerateCovarianceError(ProfitError):
    """Covariance estimate carries no usable positive variation."""


class StageError(ProfitError):
    """Wraps a failure inside one named stage of the testing pipeline."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
