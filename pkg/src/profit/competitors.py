"""L2-norm trend tests on the projected series, calibrated two ways.

``T_k = int_0^1 (eta_k(t) - C_k)^2 dt`` with ``eta_k`` a penalized spline of the
projected values on time and ``C_k`` their grand mean.  The null law is
approximated either by a weighted sum of chi-square(1) variables (ZC-MC) or by
a subject bootstrap of null-centred data (ZC-BT).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import _kernels
from . import smoothers as sm
from .errors import ValidationError
from .marginal_basis import MarginalBasis, ProjectedSeries
from .pipeline import (
    DirectionResult,
    PipelineState,
    ProfitConfig,
    ProfitReport,
    basis_summary,
    bonferroni,
    fit_cov_models,
    is_constant,
    prepare,
    provenance,
)

ZC_BASIS = 10
QUAD_POINTS = 201
METHODS = ("ZC-MC", "ZC-BT")


def l2_distance(fn, center: float) -> float:
    """Simpson rule for int_0^1 (fn(t) - center)^2 dt on 201 points."""
    tg = np.linspace(0.0, 1.0, QUAD_POINTS)
    return float(integrate.simpson((np.asarray(fn(tg)) - center) ** 2, x=tg))


@dataclass
class ZcStatistic:
    statistic: float
    eta: sm.PSplineFit1D
    center: float


def _zc_config(times) -> sm.SplineConfig:
    distinct = np.unique(times).size
    nb = ZC_BASIS
    if distinct < ZC_BASIS:
        nb = max(4, distinct)
        warnings.warn(f"only {distinct} distinct times; using {nb} basis functions", RuntimeWarning, stacklevel=3)
    return sm.SplineConfig(n_basis=nb)


def zc_statistic(ps: ProjectedSeries) -> ZcStatistic:
    """Penalized cubic-spline mean (10 basis functions, GCV) against the grand mean."""
    fit = sm.fit_pspline_1d(ps.times, ps.values, cfg=_zc_config(ps.times))
    c = float(np.mean(ps.values))
    return ZcStatistic(l2_distance(fit, c), fit, c)


def mixture_draws(nu, n_sim: int, seed, scale: float = 1.0) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence(_entropy(seed)))
    if nu.size == 0:
        return np.zeros(n_sim)
    return (rng.standard_normal((n_sim, nu.size)) ** 2) @ nu / scale


def zc_mc_pvalue(stat: float, nu, n_sim: int = 10000, seed=0, n_scale: float | None = None) -> float:
    """Share of draws of sum nu_r A_r (A_r iid chi-square(1)) strictly above ``stat``.

    ``n_scale`` divides the draws by a sample size; the default (None) uses the
    mixture exactly as written, without any scaling.
    """
    nu = np.asarray(nu, dtype=float)
    if nu.size == 0 or not np.any(nu > 0):
        warnings.warn("no positive eigenvalues for the chi-square mixture; p-value set to 1", RuntimeWarning, stacklevel=2)
        return 1.0
    draws = mixture_draws(nu, n_sim, seed, 1.0 if n_scale is None else float(n_scale))
    return float(np.count_nonzero(draws > stat)) / n_sim


def _entropy(seed) -> list[int]:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def _bootstrap_stats_refit(centred: ProjectedSeries, draws: np.ndarray) -> np.ndarray:
    out = np.empty(draws.shape[0])
    for b, idx in enumerate(draws):
        out[b] = zc_statistic(centred.subset(idx)).statistic
    return out


def _bootstrap_stats_sufficient(centred: ProjectedSeries, draws: np.ndarray, impl=None) -> np.ndarray:
    """Same statistics as the refit path, from per-subject sufficient statistics."""
    impl = impl or _kernels.active
    cfg = _zc_config(centred.times)
    basis = cfg.basis(centred.times)
    pen = cfg.penalty()
    starts = centred.bounds[:-1]
    y = centred.values
    sub_gram = np.add.reduceat(basis[:, :, None] * basis[:, None, :], starts, axis=0)
    sub_cross = np.add.reduceat(basis * y[:, None], starts, axis=0)
    sub_yy = np.add.reduceat(y * y, starts)
    sub_sum = np.add.reduceat(y, starts)
    sub_count = centred.m.astype(float)
    gram, cross, yy, tot, cnt = impl.bootstrap_gram(sub_gram, sub_cross, sub_yy, sub_sum, sub_count, np.ascontiguousarray(draws))
    tg = np.linspace(0.0, 1.0, QUAD_POINTS)
    btg = cfg.basis(tg)
    grid = cfg.lambda_grid()
    out = np.empty(draws.shape[0])
    for b in range(draws.shape[0]):
        dr = sm.DemmlerReinsch(gram[b], pen)
        coefs, rss, tr = dr.path(cross[b], yy[b], grid)
        res = sm.pick_gcv(sm.gcv_scores(rss, tr, cnt[b]), tr, list(grid))
        eta = btg @ coefs[res.index]
        out[b] = float(integrate.simpson((eta - tot[b] / cnt[b]) ** 2, x=tg))
    return out


def zc_bootstrap_pvalue(
    ps: ProjectedSeries, stat: ZcStatistic | float | None = None, B: int = 1000, seed=0, fast: bool = True
) -> float:
    """Subject bootstrap of the null-centred series W - eta_hat(t) + C_hat.

    p = share of bootstrap statistics >= the observed one.  Each resample is
    refitted with its own GCV choice.  By default (``fast``) a refit sums
    per-subject normal equations; ``fast=False`` rebuilds the resampled series
    and calls :func:`zc_statistic`, giving the same statistics more slowly.
    """
    if B < 100:
        raise ValidationError("need at least 100 bootstrap samples")
    zs = stat if isinstance(stat, ZcStatistic) else zc_statistic(ps)
    observed = zs.statistic if stat is None or isinstance(stat, ZcStatistic) else float(stat)
    centred = ps.with_values(ps.values - zs.eta(ps.times) + zs.center)
    rng = np.random.default_rng(np.random.SeedSequence(_entropy(seed)))
    draws = rng.integers(0, ps.n, size=(B, ps.n))
    boot = _bootstrap_stats_sufficient(centred, draws) if fast else _bootstrap_stats_refit(centred, draws)
    # slack relative to the data scale so that exact ties (e.g. all zero) survive rounding
    scale = max(observed, float(np.mean(ps.values**2)), 1e-300)
    return float(np.count_nonzero(boot >= observed - 1e-12 * scale)) / B


def run_zc(
    ds,
    cfg: ProfitConfig | None = None,
    method: str = "ZC-MC",
    B: int = 1000,
    basis: MarginalBasis | None = None,
    state: PipelineState | None = None,
    n_scale: bool = False,
    fast_bootstrap: bool = True,
) -> ProfitReport:
    """Competitor test on the same projections as PROFIT; combined by Bonferroni."""
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}; choose from {METHODS}")
    cfg = cfg or ProfitConfig()
    timings: dict = {}
    start = time.perf_counter()
    st = state or prepare(ds, cfg, basis, timings)
    if method == "ZC-MC" and not st.cov_models:
        fit_cov_models(st, cfg)
    results = []
    for i, ps in enumerate(st.series):
        k = ps.k
        ev = float(st.basis.eigenvalues[k - 1])
        if is_constant(ps.values):
            results.append(DirectionResult(k, ev, 0.0, 1.0, skipped="constant projected series"))
            continue
        zs = zc_statistic(ps)
        if method == "ZC-MC":
            model = st.cov_models[i]
            p = zc_mc_pvalue(zs.statistic, model.nu, cfg.n_sim, [cfg.seed, k], ps.n if n_scale else None)
            extra = {"nu": model.nu.tolist(), "n_scale": bool(n_scale)}
            L = model.L
        else:
            p = zc_bootstrap_pvalue(ps, zs, B, [cfg.seed, k], fast_bootstrap)
            extra = {"B": B}
            L = 0
        results.append(DirectionResult(k, ev, zs.statistic, p, L=L, extra=extra))
    bf = bonferroni([r.p_value for r in results], cfg.alpha)
    timings["total"] = time.perf_counter() - start
    return ProfitReport(
        method, cfg.to_dict(), st.basis.K, results, bf.adjusted, bf.global_p, bf.reject, cfg.alpha,
        basis_summary(st.basis), provenance(ds, cfg), timings, st,
    )
