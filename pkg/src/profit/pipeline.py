"""End-to-end test: smooth, project, pre-whiten, test each direction, combine by Bonferroni."""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from . import marginal_basis as mb
from . import plrt
from . import prewhiten as pw
from . import smoothers as sm
from .data import LongitudinalFunctionalDataset
from .errors import DegenerateCovarianceError, ProfitError, StageError, ValidationError

REPORT_SCHEMA = "profit-report/1"
# residual energy below this share of the data energy is smoothing error, not variation
DEGENERATE_REL = 1e-10


@dataclass(frozen=True)
class ProfitConfig:
    pve_s: float = 0.9
    pve_t: float = 0.9
    alpha: float = 0.05
    p: int = 1
    n_sim: int = 10000
    seed: int = 0
    weight_scheme: str = "pooled"
    covariates: tuple[str, ...] = ()
    k_max: int = 15
    mean_basis_t: int = 10
    mean_basis_s: int = 20
    cov_bandwidth: float | None = None
    kernel: str = "epanechnikov"
    projected_cov_method: str = "pspline"

    def __post_init__(self):
        if not 0 < self.pve_s <= 1 or not 0 < self.pve_t <= 1:
            raise ValidationError("pve values must lie in (0, 1]")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.p < 1:
            raise ValidationError("p must be >= 1")
        if self.n_sim < 1:
            raise ValidationError("n_sim must be positive")
        if self.k_max < 1:
            raise ValidationError("k_max must be >= 1")
        object.__setattr__(self, "covariates", tuple(self.covariates))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["covariates"] = list(self.covariates)
        return d


@dataclass
class Bonferroni:
    reject: bool
    adjusted: list[float]
    global_p: float
    threshold: float


def bonferroni(p_values: Sequence[float], alpha: float) -> Bonferroni:
    """Reject iff min p < alpha / K; adjusted p = min(K p, 1)."""
    p = np.asarray(list(p_values), dtype=float)
    if p.size == 0:
        raise ValidationError("need at least one p-value")
    if np.any((p < 0) | (p > 1)) or np.any(~np.isfinite(p)):
        raise ValidationError("p-values must lie in [0, 1]")
    K = p.size
    return Bonferroni(
        bool(p.min() < alpha / K),
        [float(min(K * v, 1.0)) for v in p],
        float(min(K * p.min(), 1.0)),
        alpha / K,
    )


@dataclass
class DirectionResult:
    k: int
    eigenvalue: float
    statistic: float
    p_value: float
    vc_part: float = 0.0
    fe_part: float = 0.0
    lambda_hat: float = 0.0
    Q: int = 0
    L: int = 0
    sigma2: float = 0.0
    skipped: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["skipped"] is None:
            del d["skipped"]
        if not d["extra"]:
            del d["extra"]
        return d


@dataclass
class PipelineState:
    """Intermediate objects shared with competitor methods; never serialized."""

    mean: mb.MeanFit | None = None
    covariance: mb.MarginalCovariance | None = None
    basis: mb.MarginalBasis | None = None
    series: list = field(default_factory=list)
    cov_models: list = field(default_factory=list)


@dataclass
class ProfitReport:
    method: str
    config: dict
    K: int
    directions: list[DirectionResult]
    adjusted: list[float]
    global_p: float
    reject: bool
    alpha: float
    basis: dict
    provenance: dict
    timings: dict = field(default_factory=dict)
    state: PipelineState | None = field(default=None, repr=False)

    @property
    def p_values(self) -> list[float]:
        return [d.p_value for d in self.directions]

    @property
    def decision(self) -> str:
        return "reject" if self.reject else "retain"

    def to_json_dict(self, include_timings: bool = False) -> dict:
        doc = {
            "schema": REPORT_SCHEMA,
            "method": self.method,
            "decision": self.decision,
            "alpha": self.alpha,
            "K": self.K,
            "global_p": self.global_p,
            "adjusted_p": self.adjusted,
            "directions": [d.to_dict() for d in self.directions],
            "basis": self.basis,
            "config": self.config,
            "provenance": self.provenance,
        }
        if include_timings:
            doc["timings"] = self.timings
        return doc

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_json_dict(include_timings), indent=2, sort_keys=True)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (ProfitError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise StageError(name, exc) from exc


def prepare(ds: LongitudinalFunctionalDataset, cfg: ProfitConfig, basis: mb.MarginalBasis | None = None, timings=None) -> PipelineState:
    """Mean, marginal covariance, eigenbasis and projections shared by every method."""
    timings = {} if timings is None else timings
    st = PipelineState()
    clock = time.perf_counter()
    _stage("validate", ds.check)
    cov_names = list(cfg.covariates) or None
    st.mean = _stage(
        "mean",
        mb.estimate_mean,
        ds,
        sm.SplineConfig(n_basis=cfg.mean_basis_t),
        sm.SplineConfig(n_basis=cfg.mean_basis_s),
        cov_names,
    )
    timings["mean"] = time.perf_counter() - clock
    if basis is None:
        clock = time.perf_counter()
        curves = ds.curves
        resid = curves - st.mean.fitted(ds)
        if float(np.mean(resid**2)) <= DEGENERATE_REL * max(float(np.mean(curves**2)), 1e-300):
            raise StageError("basis", DegenerateCovarianceError("no variation to project onto (residuals vanish)"))
        raw = _stage("covariance", mb.raw_marginal_covariance, ds, st.mean, cfg.weight_scheme)
        st.covariance = _stage(
            "covariance", mb.smooth_marginal_covariance, raw, sm.KernelConfig(cfg.kernel), cfg.cov_bandwidth
        )
        timings["covariance"] = time.perf_counter() - clock
        try:
            basis = mb.eigen_basis(st.covariance, cfg.pve_s)
        except DegenerateCovarianceError as exc:
            raise StageError("basis", DegenerateCovarianceError(f"no variation to project onto ({exc})")) from exc
        except ProfitError as exc:
            raise StageError("basis", exc) from exc
    if basis.K > cfg.k_max:
        warnings.warn(f"K={basis.K} from PVE capped at {cfg.k_max}", RuntimeWarning, stacklevel=2)
        basis = basis.truncate(cfg.k_max)
    st.basis = basis
    clock = time.perf_counter()
    st.series = [
        _stage(f"project[k={k}]", mb.quasi_project, ds, basis, k, None, cov_names) for k in range(1, basis.K + 1)
    ]
    timings["project"] = time.perf_counter() - clock
    return st


def is_constant(values: np.ndarray) -> bool:
    scale = max(float(np.max(np.abs(values))), 1e-300)
    return float(np.ptp(values)) <= 1e-12 * scale


def fit_cov_models(st: PipelineState, cfg: ProfitConfig) -> list:
    out = []
    for ps in st.series:
        if is_constant(ps.values):
            out.append(None)
            continue
        out.append(_stage(f"prewhiten[k={ps.k}]", pw.fit_projected_cov, ps, cfg.pve_t, cfg.projected_cov_method))
    st.cov_models = out
    return out


def basis_summary(basis: mb.MarginalBasis) -> dict:
    return {
        "eigenvalues": basis.eigenvalues.tolist(),
        "pve_threshold": basis.pve_threshold,
        "pve_achieved": basis.pve_achieved,
        "total_trace": basis.total_trace,
        "hash": basis.hash(),
    }


def provenance(ds: LongitudinalFunctionalDataset, cfg: ProfitConfig) -> dict:
    meta = ds.metadata or {}
    return {
        "package_version": __version__,
        "seed": cfg.seed,
        "n": ds.n,
        "N": ds.N,
        "R": ds.R,
        "source_sha256": meta.get("source_sha256"),
        "rescale": meta.get("rescale"),
    }


def run_profit(
    ds: LongitudinalFunctionalDataset,
    cfg: ProfitConfig | None = None,
    basis: mb.MarginalBasis | None = None,
    state: PipelineState | None = None,
) -> ProfitReport:
    """Run the full test; ``basis`` replaces the estimated eigenbasis (e.g. a known one in simulations)."""
    cfg = cfg or ProfitConfig()
    timings: dict = {}
    start = time.perf_counter()
    st = state or prepare(ds, cfg, basis, timings)
    if not st.cov_models:
        clock = time.perf_counter()
        fit_cov_models(st, cfg)
        timings["projected_cov"] = time.perf_counter() - clock
    clock = time.perf_counter()
    results = []
    for ps, model in zip(st.series, st.cov_models):
        k = ps.k
        ev = float(st.basis.eigenvalues[k - 1])
        if model is None:
            warnings.warn(f"projected series k={k} is constant; p-value set to 1", RuntimeWarning, stacklevel=2)
            results.append(DirectionResult(k, ev, 0.0, 1.0, skipped="constant projected series"))
            continue
        blocks = _stage(f"prewhiten[k={k}]", pw.assemble_blocks, ps, model)
        res = _stage(
            f"plrt[k={k}]", plrt.run_series, ps.values, ps.times, blocks, cfg.p, ps.visit_covariates(), cfg.n_sim, [cfg.seed, k]
        )
        results.append(
            DirectionResult(
                k, ev, res.statistic, res.p_value, res.vc_part, res.fe_part, res.lam_hat,
                int(res.spectrum.xi.size), model.L, model.sigma2,
            )
        )
    timings["plrt"] = time.perf_counter() - clock
    bf = bonferroni([r.p_value for r in results], cfg.alpha)
    timings["total"] = time.perf_counter() - start
    return ProfitReport(
        "PROFIT", cfg.to_dict(), st.basis.K, results, bf.adjusted, bf.global_p, bf.reject, cfg.alpha,
        basis_summary(st.basis), provenance(ds, cfg), timings, st,
    )
