"""Projection-based test for a time-varying mean in longitudinal functional data.

Curves observed repeatedly per subject are projected onto the leading
eigenfunctions of their marginal covariance; each projected series is tested
for a trend in time with a pseudo-likelihood-ratio test, and the directions
are combined with a Bonferroni rule.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DegenerateCovarianceError,
    ProfitError,
    SmoothingError,
    StageError,
    StructuralError,
    ValidationError,
)
from .data import LongitudinalFunctionalDataset, SubjectRecord, load, load_csv  # noqa: E402
from .pipeline import ProfitConfig, ProfitReport, bonferroni, run_profit  # noqa: E402

__all__ = [
    "DegenerateCovarianceError",
    "LongitudinalFunctionalDataset",
    "ProfitConfig",
    "ProfitError",
    "ProfitReport",
    "SmoothingError",
    "StageError",
    "StructuralError",
    "SubjectRecord",
    "ValidationError",
    "bonferroni",
    "load",
    "load_csv",
    "run_profit",
]
