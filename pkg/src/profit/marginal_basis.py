"""Mean surface, marginal covariance in s, its eigenbasis and quasi-projections."""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import smoothers as sm
from .data import BivariateSurface, LongitudinalFunctionalDataset
from .errors import DegenerateCovarianceError, ValidationError

DEFAULT_MEAN_T = sm.SplineConfig(n_basis=10)
DEFAULT_MEAN_S = sm.SplineConfig(n_basis=20)


# ---------------------------------------------------------------------------
# mean
# ---------------------------------------------------------------------------

@dataclass
class MeanFit:
    """Pooled smooth of mu(s, t), optionally with linear covariate effects alpha(s)."""

    fit: sm.SandwichFit
    grid_s: np.ndarray
    alpha: np.ndarray | None = None  # (q, R)
    covariate_names: tuple[str, ...] = ()
    covariate_center: np.ndarray | None = None
    converged: bool = True
    iterations: int = 0

    def surface(self, grid_t=None) -> BivariateSurface:
        gt = np.linspace(0, 1, 101) if grid_t is None else np.asarray(grid_t, dtype=float)
        return BivariateSurface(self.grid_s, gt, self.fit.at(gt, self.grid_s).T)

    def covariate_term(self, ds: LongitudinalFunctionalDataset) -> np.ndarray:
        if self.alpha is None:
            return np.zeros((ds.N, ds.R))
        z = ds.covariate_matrix(self.covariate_names) - self.covariate_center
        return z[ds.subject_index] @ self.alpha

    def fitted(self, ds: LongitudinalFunctionalDataset) -> np.ndarray:
        """N x R fitted mean (including covariate terms) at every visit."""
        return self.fit.at(ds.times, ds.grid_s) + self.covariate_term(ds)


def estimate_mean(
    ds: LongitudinalFunctionalDataset,
    cfg_t: sm.SplineConfig | None = None,
    cfg_s: sm.SplineConfig | None = None,
    covariates: Sequence[str] | None = None,
    tol: float = 1e-6,
    max_iter: int = 50,
) -> MeanFit:
    """Pooled penalized tensor-product smooth of all curves.

    With ``covariates`` the model is ``mu(s, t) + z_i^T alpha(s)``, fitted by
    backfitting: smooth ``Y - z alpha`` for mu, then regress ``Y - mu`` on the
    centered covariates at each grid point and smooth the coefficients in s.
    """
    cfg_t = cfg_t or DEFAULT_MEAN_T
    cfg_s = cfg_s or DEFAULT_MEAN_S
    Y = ds.curves
    t = ds.times
    s = ds.grid_s
    if not covariates:
        return MeanFit(sm.fit_sandwich(t, s, Y, cfg_t, cfg_s), s)

    names = tuple(covariates)
    zsub = ds.covariate_matrix(names)
    center = zsub.mean(0)
    z = (zsub - center)[ds.subject_index]
    if np.linalg.matrix_rank(z) < z.shape[1]:
        raise ValidationError(f"covariates {names} are constant or collinear across subjects")
    zpinv = np.linalg.pinv(z)
    alpha = np.zeros((len(names), ds.R))
    converged = False
    prev = None
    it = 0
    for it in range(1, max_iter + 1):
        fit = sm.fit_sandwich(t, s, Y - z @ alpha, cfg_t, cfg_s)
        mu = fit.at(t, s)
        raw_alpha = zpinv @ (Y - mu)
        alpha = np.vstack([sm.fit_pspline_1d(s, a, cfg=cfg_s)(s) for a in raw_alpha])
        cur = np.concatenate([fit.coef.ravel(), alpha.ravel()])
        if prev is not None:
            change = np.linalg.norm(cur - prev) / max(np.linalg.norm(prev), 1e-300)
            if change < tol:
                converged = True
                break
        prev = cur
    if not converged:
        warnings.warn(f"mean backfitting did not converge in {max_iter} iterations", RuntimeWarning, stacklevel=2)
    return MeanFit(fit, s, alpha, names, center, converged, it)


# ---------------------------------------------------------------------------
# marginal covariance
# ---------------------------------------------------------------------------

@dataclass
class MarginalCovariance:
    grid_s: np.ndarray
    raw: np.ndarray
    weights_used: np.ndarray  # per-subject v_i
    smoothed: np.ndarray | None = None
    bandwidth: float | None = None
    gcv: sm.GcvResult | None = None
    diagonal_flag: str = "contaminated by measurement-error variance; excluded from smoothing"


def subject_weights(m: np.ndarray, scheme: str = "pooled") -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if scheme == "pooled":
        return np.full(m.shape, 1.0 / m.sum())
    if scheme == "per_subject":
        return 1.0 / (m.size * m)
    raise ValidationError(f"unknown weight scheme {scheme!r}; use 'pooled' or 'per_subject'")


def raw_marginal_covariance(ds: LongitudinalFunctionalDataset, mean: MeanFit | np.ndarray, scheme: str = "pooled") -> MarginalCovariance:
    """Weighted cross-product of demeaned curves; ``mean`` may be a MeanFit or an N x R matrix."""
    fitted = mean.fitted(ds) if isinstance(mean, MeanFit) else np.asarray(mean, dtype=float)
    resid = ds.curves - fitted
    v = subject_weights(ds.m, scheme)
    rw = v[ds.subject_index]
    raw = resid.T @ (resid * rw[:, None])
    return MarginalCovariance(ds.grid_s.copy(), (raw + raw.T) / 2, v)


def _grid_kernel_rows(grid: np.ndarray, h: float, cfg: sm.KernelConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    u = (grid[None, :] - grid[:, None]) / h  # [eval, data]
    k = cfg.weights(u) / h
    return k, k * u, k * u * u


def _grid_local_plane(raw: np.ndarray, grid: np.ndarray, h: float, cfg: sm.KernelConfig):
    """Local-plane fit of off-diagonal raw entries evaluated on the grid x grid.

    All moments are separable sums over (r, r'), so the full double sum is a
    matrix product and the excluded diagonal is subtracted explicitly.
    """
    a0, a1, a2 = _grid_kernel_rows(grid, h, cfg)
    s0, s1, s2 = a0.sum(1), a1.sum(1), a2.sum(1)
    d = np.diag(raw)

    v00 = np.outer(s0, s0) - a0 @ a0.T
    v10 = np.outer(s1, s0) - a1 @ a0.T
    v01 = np.outer(s0, s1) - a0 @ a1.T
    v20 = np.outer(s2, s0) - a2 @ a0.T
    v02 = np.outer(s0, s2) - a0 @ a2.T
    v11 = np.outer(s1, s1) - a1 @ a1.T
    r00 = a0 @ raw @ a0.T - (a0 * d) @ a0.T
    r10 = a1 @ raw @ a0.T - (a1 * d) @ a0.T
    r01 = a0 @ raw @ a1.T - (a0 * d) @ a1.T
    mom = np.stack([v00, v10, v01, v20, v02, v11, r00, r10, r01], axis=-1).reshape(-1, 9)
    where = np.stack(np.meshgrid(grid, grid, indexing="ij"), axis=-1).reshape(-1, 2)
    est, inv00 = sm.local_plane_intercept(mom, where)
    n = grid.size
    return est.reshape(n, n), inv00.reshape(n, n)


def smooth_marginal_covariance(
    mc: MarginalCovariance, cfg: sm.KernelConfig | None = None, bandwidth: float | None = None
) -> MarginalCovariance:
    """Local-plane smooth of the off-diagonal raw entries, bandwidth by GCV unless given."""
    cfg = cfg or sm.KernelConfig()
    grid = mc.grid_s
    R = grid.size
    off = ~np.eye(R, dtype=bool)
    k0 = float(cfg.weights(0.0))
    n_obs = float(R * (R - 1))
    if bandwidth is not None:
        grid_h = [float(bandwidth)]
    else:
        spacing = float(np.mean(np.diff(grid)))
        grid_h = list(cfg.bandwidth_grid(spacing, float(grid[-1] - grid[0])))

    fits = {}

    def fam(h):
        try:
            est, inv00 = _grid_local_plane(mc.raw, grid, h, cfg)
        except Exception:
            if len(grid_h) == 1:
                raise
            return np.inf, np.inf, n_obs
        fits[h] = est
        rss = float(np.sum((mc.raw - est)[off] ** 2))
        tr = float(np.sum((k0 / h) ** 2 * inv00[off]))
        return rss, tr, n_obs

    res = sm.gcv_select(fam, grid_h)
    est = fits[res.value]
    return replace(mc, smoothed=(est + est.T) / 2, bandwidth=float(res.value), gcv=res)


def rate_bandwidth(n: int) -> float:
    """Asymptotic-order bandwidth (log n / n)^(1/4), offered as an override to GCV."""
    return float((np.log(n) / n) ** 0.25)


# ---------------------------------------------------------------------------
# eigenbasis
# ---------------------------------------------------------------------------

@dataclass
class MarginalBasis:
    grid_s: np.ndarray
    eigenvalues: np.ndarray  # retained, length K
    eigenfunctions: np.ndarray  # (K, R)
    pve_threshold: float
    pve_achieved: float
    total_trace: float
    spectrum: np.ndarray = field(default_factory=lambda: np.zeros(0))  # all floored eigenvalues

    @property
    def K(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def quadrature_weight(self) -> float:
        return 1.0 / self.grid_s.size

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.grid_s).tobytes())
        h.update(np.ascontiguousarray(self.eigenvalues).tobytes())
        h.update(np.ascontiguousarray(self.eigenfunctions).tobytes())
        return h.hexdigest()[:16]

    def truncate(self, k: int) -> "MarginalBasis":
        k = min(k, self.K)
        ev = self.eigenvalues[:k]
        return replace(
            self,
            eigenvalues=ev,
            eigenfunctions=self.eigenfunctions[:k],
            pve_achieved=float(ev.sum() / self.total_trace),
        )

    def flip(self, k: int) -> "MarginalBasis":
        """Copy with the sign of direction ``k`` (0-based) reversed."""
        ef = self.eigenfunctions.copy()
        ef[k] = -ef[k]
        return replace(self, eigenfunctions=ef)

    def to_json_dict(self) -> dict:
        return {
            "grid_s": self.grid_s.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenfunctions": self.eigenfunctions.tolist(),
            "pve_threshold": self.pve_threshold,
            "pve_achieved": self.pve_achieved,
            "total_trace": self.total_trace,
            "hash": self.hash(),
        }

    def save(self, path) -> None:
        """JSON when the suffix is ``.json``; otherwise a CSV with columns s, phi_1..phi_K."""
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_json_dict(), indent=2), encoding="utf-8")
            return
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["s"] + [f"phi_{k + 1}" for k in range(self.K)])
            w.writerow(["eigenvalue"] + [repr(float(v)) for v in self.eigenvalues])
            for r, s in enumerate(self.grid_s):
                w.writerow([repr(float(s))] + [repr(float(v)) for v in self.eigenfunctions[:, r]])


def _orient(phi: np.ndarray) -> np.ndarray:
    integral = phi.mean()
    if abs(integral) > 1e-8:
        return phi if integral > 0 else -phi
    nz = np.flatnonzero(np.abs(phi) > 1e-12)
    if nz.size and phi[nz[0]] < 0:
        return -phi
    return phi


def eigen_basis(mc: MarginalCovariance | np.ndarray, pve: float = 0.9, grid_s=None) -> MarginalBasis:
    """Eigenpairs of the smoothed covariance on the grid, truncated by proportion of variance.

    Eigenvalues are scaled by 1/R and eigenvectors by sqrt(R), so the discrete
    inner product (1/R) sum_r phi_k phi_l is the identity.
    """
    if not 0 < pve <= 1:
        raise ValidationError("pve must lie in (0, 1]")
    if isinstance(mc, MarginalCovariance):
        if mc.smoothed is None:
            raise ValidationError("covariance has not been smoothed")
        mat, grid = mc.smoothed, mc.grid_s
    else:
        mat = np.asarray(mc, dtype=float)
        grid = np.linspace(0, 1, mat.shape[0]) if grid_s is None else np.asarray(grid_s, dtype=float)
    R = mat.shape[0]
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order] / R, 0.0, None)
    vecs = vecs[:, order]
    total = float(vals.sum())
    if not total > 0 or vals[0] <= 1e-12 * max(np.abs(mat).max() / R, 1e-300):
        raise DegenerateCovarianceError("covariance estimate negative-definite; increase smoothing")
    ratio = np.cumsum(vals) / total
    K = int(np.searchsorted(ratio, pve - 1e-12) + 1)
    K = min(K, int(np.count_nonzero(vals > 0)))
    phis = np.array([_orient(np.sqrt(R) * vecs[:, k]) for k in range(K)])
    return MarginalBasis(
        grid.copy(), vals[:K].copy(), phis, float(pve), float(ratio[K - 1]), total, vals.copy()
    )


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

@dataclass
class ProjectedSeries:
    """Quasi-projections W_{k,ij} stacked subject-major with their visit times."""

    k: int
    times: np.ndarray
    values: np.ndarray
    bounds: np.ndarray
    ids: tuple[str, ...] = ()
    covariates: np.ndarray | None = None  # (n, q) subject-level
    basis_hash: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.bounds = np.asarray(self.bounds, dtype=np.int64)
        if self.times.shape != self.values.shape or self.bounds[-1] != self.times.size:
            raise ValidationError("projected series lengths disagree with subject bounds")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("projected values must be finite")

    @property
    def n(self) -> int:
        return self.bounds.size - 1

    @property
    def m(self) -> np.ndarray:
        return np.diff(self.bounds)

    @property
    def N(self) -> int:
        return int(self.times.size)

    @property
    def subject_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.m)

    def visit_covariates(self) -> np.ndarray | None:
        if self.covariates is None:
            return None
        return np.asarray(self.covariates, dtype=float)[self.subject_index]

    def with_values(self, values) -> "ProjectedSeries":
        return replace(self, values=np.asarray(values, dtype=float))

    def subset(self, subjects: Sequence[int]) -> "ProjectedSeries":
        """Series built from the listed subjects (repeats allowed), in the given order."""
        subjects = np.asarray(subjects, dtype=int)
        idx = np.concatenate([np.arange(self.bounds[i], self.bounds[i + 1]) for i in subjects])
        bounds = np.concatenate([[0], np.cumsum(self.m[subjects])])
        cov = None if self.covariates is None else np.asarray(self.covariates)[subjects]
        ids = tuple(self.ids[i] for i in subjects) if self.ids else ()
        return ProjectedSeries(self.k, self.times[idx], self.values[idx], bounds, ids, cov, self.basis_hash)


def quasi_project(
    ds: LongitudinalFunctionalDataset,
    basis: MarginalBasis,
    k: int,
    mean: MeanFit | np.ndarray | None = None,
    covariates: Sequence[str] | None = None,
) -> ProjectedSeries:
    """W_{k,ij} = (1/R) sum_r Y_ij(s_r) phi_k(s_r) for direction ``k`` (1-based).

    Raw curves are projected by default; pass ``mean`` to project residuals.
    """
    if not 1 <= k <= basis.K:
        raise ValidationError(f"direction k={k} outside 1..{basis.K}")
    if basis.grid_s.shape != ds.grid_s.shape or not np.allclose(basis.grid_s, ds.grid_s, rtol=0, atol=1e-12):
        raise ValidationError("basis grid does not match dataset grid")
    Y = ds.curves
    if mean is not None:
        Y = Y - (mean.fitted(ds) if isinstance(mean, MeanFit) else np.asarray(mean, dtype=float))
    w = Y @ basis.eigenfunctions[k - 1] / ds.R
    bounds = np.concatenate([[0], np.cumsum(ds.m)])
    cov = ds.covariate_matrix(list(covariates)) if covariates else None
    return ProjectedSeries(k, ds.times, w, bounds, tuple(s.id for s in ds.subjects), cov, basis.hash())
