"""Nonparametric smoothers: local-linear kernel fits and penalized B-splines.

Penalized fits are solved through a Demmler-Reinsch rotation of the normal
equations, so every candidate penalty weight on a GCV grid costs O(p) after a
single O(p^3) factorization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, linalg
from scipy.interpolate import BSpline

from . import _kernels
from .data import BivariateSurface
from .errors import SmoothingError, ValidationError

DEFAULT_LAMBDA_GRID = np.logspace(-4, 4, 13)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelConfig:
    """Kernel and bandwidth for local-linear smoothing.

    ``bandwidth`` may be a single positive value, a grid of candidates for GCV,
    or ``None`` for the default grid (10 log-spaced values from twice the
    design spacing to half the domain length).
    """

    kernel: str = "epanechnikov"
    bandwidth: float | Sequence[float] | None = None

    def __post_init__(self):
        code = _kernels.kernel_code(self.kernel)
        mass, _ = integrate.quad(lambda u: float(_kernels._kernel_np(np.array(u), code)), -1, 1)
        if abs(mass - 1.0) > 1e-6:
            raise ValidationError(f"kernel {self.kernel!r} integrates to {mass}, not 1")
        u = np.linspace(0, 1, 11)
        if not np.allclose(_kernels._kernel_np(u, code), _kernels._kernel_np(-u, code)):
            raise ValidationError(f"kernel {self.kernel!r} is not symmetric")
        if self.bandwidth is not None:
            h = np.atleast_1d(np.asarray(self.bandwidth, dtype=float))
            if h.size == 0 or np.any(~np.isfinite(h)) or np.any(h <= 0):
                raise ValidationError("bandwidths must be positive")

    @property
    def code(self) -> int:
        return _kernels.kernel_code(self.kernel)

    def bandwidth_grid(self, spacing: float, length: float = 1.0) -> np.ndarray:
        if self.bandwidth is not None:
            return np.sort(np.atleast_1d(np.asarray(self.bandwidth, dtype=float)))
        return np.geomspace(2.0 * spacing, 0.5 * length, 10)

    def weights(self, u) -> np.ndarray:
        return _kernels._kernel_np(np.asarray(u, dtype=float), self.code)


@dataclass(frozen=True)
class SplineConfig:
    """B-spline basis and difference penalty for one axis."""

    n_basis: int = 10
    degree: int = 3
    knots: Sequence[float] | None = None
    penalty_order: int = 2
    lam: float | Sequence[float] | None = None
    domain: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.degree < 0:
            raise ValidationError("spline degree must be nonnegative")
        lo, hi = self.domain
        if not hi > lo:
            raise ValidationError("spline domain must have positive length")
        if self.knots is not None:
            k = np.asarray(self.knots, dtype=float)
            if np.any(np.diff(k) <= 0):
                raise ValidationError("interior knots must be strictly increasing")
            if k.size and (k[0] <= lo or k[-1] >= hi):
                raise ValidationError("interior knots must lie strictly inside the domain")
        if self.basis_size < self.degree + 1:
            raise ValidationError(f"need at least degree+1={self.degree + 1} basis functions")
        if not 0 <= self.penalty_order < self.basis_size:
            raise ValidationError("penalty order must be below the basis size")
        if self.lam is not None:
            lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
            if lam.size == 0 or np.any(lam < 0) or np.any(~np.isfinite(lam)):
                raise ValidationError("penalty weights must be finite and >= 0")

    @property
    def basis_size(self) -> int:
        if self.knots is not None:
            return len(self.knots) + self.degree + 1
        return self.n_basis

    @property
    def interior_knots(self) -> np.ndarray:
        if self.knots is not None:
            return np.asarray(self.knots, dtype=float)
        lo, hi = self.domain
        n_int = self.n_basis - self.degree - 1
        return np.linspace(lo, hi, n_int + 2)[1:-1]

    @property
    def knot_vector(self) -> np.ndarray:
        lo, hi = self.domain
        d = self.degree
        if self.knots is None:
            # equally spaced knots extended past the domain: the difference
            # penalty then has the polynomials of degree < order in its null space
            step = (hi - lo) / (self.n_basis - d)
            return lo + step * np.arange(-d, self.n_basis + 1)
        return np.concatenate([np.full(d + 1, lo), self.interior_knots, np.full(d + 1, hi)])

    def lambda_grid(self) -> np.ndarray:
        if self.lam is None:
            return DEFAULT_LAMBDA_GRID
        return np.sort(np.atleast_1d(np.asarray(self.lam, dtype=float)))

    def basis(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), *self.domain)
        return BSpline.design_matrix(x.ravel(), self.knot_vector, self.degree).toarray()

    def penalty(self) -> np.ndarray:
        d = np.diff(np.eye(self.basis_size), n=self.penalty_order, axis=0)
        return d.T @ d


# ---------------------------------------------------------------------------
# generalized cross-validation
# ---------------------------------------------------------------------------

@dataclass
class GcvResult:
    value: object
    index: int
    scores: np.ndarray
    traces: np.ndarray
    grid: list = field(default_factory=list)


def gcv_scores(rss, trace, n) -> np.ndarray:
    rss = np.asarray(rss, dtype=float)
    trace = np.asarray(trace, dtype=float)
    denom = n - trace
    with np.errstate(divide="ignore", invalid="ignore"):
        score = n * rss / denom**2
    return np.where(denom > 0, score, np.inf)


def pick_gcv(scores, traces=None, grid=None) -> GcvResult:
    """Argmin of GCV scores; grid is ordered from least to most smoothing.

    Ties go to the smoothest candidate.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise SmoothingError("empty tuning grid")
    finite = np.isfinite(scores)
    if not finite.any():
        raise SmoothingError("grid entirely undersmoothed: tr(H) >= n for every candidate")
    best = scores[finite].min()
    tied = np.flatnonzero(finite & (scores <= best * (1 + 1e-12) + 1e-300))
    idx = int(tied[-1])
    grid = list(grid) if grid is not None else list(range(scores.size))
    return GcvResult(grid[idx], idx, scores, np.asarray(traces if traces is not None else np.full(scores.size, np.nan)), grid)


def gcv_select(fit_family: Callable[[object], tuple[float, float, float]], grid: Sequence) -> GcvResult:
    """Choose a tuning value by GCV.

    ``fit_family(value)`` returns ``(rss, trace_of_hat_matrix, n)``.  ``grid``
    must be ordered from least to most smoothing.
    """
    grid = list(grid)
    if not grid:
        raise SmoothingError("empty tuning grid")
    rss, tr, nn = zip(*(fit_family(v) for v in grid))
    scores = gcv_scores(rss, tr, np.asarray(nn, dtype=float))
    return pick_gcv(scores, tr, grid)


# ---------------------------------------------------------------------------
# penalized least squares on normal equations
# ---------------------------------------------------------------------------

class DemmlerReinsch:
    """Simultaneous diagonalization of a Gram matrix G and a penalty P.

    With ``A = G + s P`` (``s = tr G / tr P``) and ``M^T A M = I``,
    ``M^T G M = diag(kappa)``, the penalized solution for relative weight
    ``lam`` is ``M diag(1/(kappa + lam (1 - kappa))) M^T b``.  Working against
    ``A`` rather than ``G`` keeps the rotation stable when G is singular.
    """

    def __init__(self, gram: np.ndarray, penalty: np.ndarray, jitter: float = 1e-12):
        p = gram.shape[0]
        tp = np.trace(penalty)
        self.scale = (np.trace(gram) / tp) if tp > 0 else 1.0
        a = gram + self.scale * penalty
        try:
            chol = linalg.cholesky(a, lower=True)
        except linalg.LinAlgError:
            try:
                chol = linalg.cholesky(a + jitter * np.trace(a) / p * np.eye(p), lower=True)
            except linalg.LinAlgError:
                raise SmoothingError("Gram matrix not positive definite; design is degenerate") from None
        li = linalg.solve_triangular(chol, np.eye(p), lower=True)
        k = li @ gram @ li.T
        kappa, u = linalg.eigh((k + k.T) / 2)
        self.kappa = np.clip(kappa, 0.0, 1.0)
        self.M = li.T @ u

    def factors(self, lam) -> np.ndarray:
        """1/(kappa + lam (1 - kappa)) per grid value, zero where undefined."""
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        den = self.kappa[None, :] + lam[:, None] * (1.0 - self.kappa[None, :])
        with np.errstate(divide="ignore"):
            return np.where(den > 1e-14, 1.0 / den, 0.0)

    def path(self, cross: np.ndarray, yy: float, lam) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Coefficients, residual sums of squares and hat traces for each lambda."""
        f = self.M.T @ cross
        a = self.factors(lam)
        coefs = (a * f[None, :]) @ self.M.T
        rss = yy - 2 * (a * f**2).sum(1) + (self.kappa * a**2 * f**2).sum(1)
        return coefs, np.maximum(rss, 0.0), (self.kappa * a).sum(1)


@dataclass
class PSplineFit1D:
    cfg: SplineConfig
    coef: np.ndarray
    lam: float
    edf: float
    beta_extra: np.ndarray
    gcv: GcvResult | None = None

    def __call__(self, x, extra=None) -> np.ndarray:
        out = self.cfg.basis(x) @ self.coef
        if extra is not None and self.beta_extra.size:
            out = out + np.atleast_2d(np.asarray(extra, dtype=float)).reshape(len(out), -1) @ self.beta_extra
        return out


def fit_pspline_1d(x, y, w=None, cfg: SplineConfig | None = None, extra=None) -> PSplineFit1D:
    """Weighted penalized B-spline regression with GCV over the penalty grid.

    ``extra`` holds unpenalized covariate columns fitted alongside the curve.
    """
    cfg = cfg or SplineConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    if not (x.shape == y.shape == w.shape):
        raise ValidationError("x, y and w must share a shape")
    if np.any(~np.isfinite(x)) or np.any(~np.isfinite(y)):
        raise ValidationError("non-finite input to smoother")
    basis = cfg.basis(x)
    pen = cfg.penalty()
    q = 0
    if extra is not None:
        extra = np.asarray(extra, dtype=float).reshape(len(x), -1)
        q = extra.shape[1]
        basis = np.hstack([basis, extra])
        pen = linalg.block_diag(pen, np.zeros((q, q)))
    bw = basis * w[:, None]
    dr = DemmlerReinsch(basis.T @ bw, pen)
    grid = cfg.lambda_grid()
    coefs, rss, tr = dr.path(bw.T @ y, float(np.sum(w * y * y)), grid)
    res = pick_gcv(gcv_scores(rss, tr, float(np.count_nonzero(w))), tr, list(grid))
    c = coefs[res.index]
    nb = cfg.basis_size
    return PSplineFit1D(cfg, c[:nb], float(res.value), float(tr[res.index]), c[nb:nb + q], res)


@dataclass
class TensorSplineFit:
    cfg1: SplineConfig
    cfg2: SplineConfig
    coef: np.ndarray  # (nb1, nb2)
    lam: tuple[float, float]
    edf: float
    gcv: GcvResult | None = None

    def __call__(self, x1, x2) -> np.ndarray:
        x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        b1 = self.cfg1.basis(x1.ravel())
        b2 = self.cfg2.basis(x2.ravel())
        return np.einsum("pa,ab,pb->p", b1, self.coef, b2).reshape(x1.shape)

    def grid_values(self, g1, g2) -> np.ndarray:
        return self.cfg1.basis(g1) @ self.coef @ self.cfg2.basis(g2).T

    def surface(self, g1=None, g2=None) -> BivariateSurface:
        g1 = np.linspace(*self.cfg1.domain, 101) if g1 is None else np.asarray(g1, dtype=float)
        g2 = np.linspace(*self.cfg2.domain, 101) if g2 is None else np.asarray(g2, dtype=float)
        return BivariateSurface(g1, g2, self.grid_values(g1, g2))


def tensor_penalties(cfg1: SplineConfig, cfg2: SplineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row and column difference penalties on vec(coef) with coef shaped (nb1, nb2)."""
    p1 = np.kron(cfg1.penalty(), np.eye(cfg2.basis_size))
    p2 = np.kron(np.eye(cfg1.basis_size), cfg2.penalty())
    return p1, p2


def fit_tensor_normal(
    gram: np.ndarray,
    cross: np.ndarray,
    yy: float,
    n_obs: float,
    cfg1: SplineConfig,
    cfg2: SplineConfig,
    tie: bool = False,
) -> TensorSplineFit:
    """Tensor-product penalized fit from precomputed normal equations.

    With ``tie=True`` both axes share one penalty weight (grid from ``cfg1``);
    otherwise the Cartesian product of both grids is searched.
    """
    p1, p2 = tensor_penalties(cfg1, cfg2)
    nb1, nb2 = cfg1.basis_size, cfg2.basis_size
    if tie:
        dr = DemmlerReinsch(gram, p1 + p2)
        grid = cfg1.lambda_grid()
        coefs, rss, tr = dr.path(cross, yy, grid)
        res = pick_gcv(gcv_scores(rss, tr, n_obs), tr, list(grid))
        lam = (float(res.value),) * 2
        c = coefs[res.index]
        edf = float(tr[res.index])
    else:
        s1 = np.trace(gram) / max(np.trace(p1), 1e-300)
        s2 = np.trace(gram) / max(np.trace(p2), 1e-300)
        pairs = [(a, b) for a in cfg1.lambda_grid() for b in cfg2.lambda_grid()]
        # order from least to most total smoothing so ties break toward smoother fits
        pairs.sort(key=lambda ab: (ab[0] * ab[1], ab[0] + ab[1]))
        rss, tr, cs = [], [], []
        for a, b in pairs:
            lhs = gram + a * s1 * p1 + b * s2 * p2
            try:
                sol = linalg.solve(lhs, np.column_stack([cross, gram]), assume_a="pos")
            except linalg.LinAlgError:
                sol = np.linalg.lstsq(lhs, np.column_stack([cross, gram]), rcond=None)[0]
            c = sol[:, 0]
            cs.append(c)
            rss.append(max(yy - 2 * c @ cross + c @ gram @ c, 0.0))
            tr.append(np.trace(sol[:, 1:]))
        res = pick_gcv(gcv_scores(rss, tr, n_obs), tr, pairs)
        lam = tuple(float(v) for v in res.value)
        c = cs[res.index]
        edf = float(tr[res.index])
    return TensorSplineFit(cfg1, cfg2, c.reshape(nb1, nb2), lam, edf, res)


def row_kron(b1: np.ndarray, b2: np.ndarray) -> np.ndarray:
    return (b1[:, :, None] * b2[:, None, :]).reshape(b1.shape[0], -1)


def fit_pspline_2d(x1, x2, y, w=None, cfg1: SplineConfig | None = None, cfg2: SplineConfig | None = None, tie=False):
    cfg1 = cfg1 or SplineConfig()
    cfg2 = cfg2 or SplineConfig()
    x1, x2, y = (np.asarray(a, dtype=float).ravel() for a in (x1, x2, y))
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float).ravel()
    if not (x1.size == x2.size == y.size == w.size):
        raise ValidationError("points must have matching lengths")
    if np.any(~np.isfinite(np.concatenate([x1, x2, y, w]))):
        raise ValidationError("non-finite input to smoother")
    for x, name in ((x1, "x1"), (x2, "x2")):
        if np.ptp(x) == 0:
            raise SmoothingError(f"all {name} values identical; tensor design is rank deficient")
    design = row_kron(cfg1.basis(x1), cfg2.basis(x2))
    dw = design * w[:, None]
    gram = design.T @ dw
    if np.all(np.concatenate([cfg1.lambda_grid(), cfg2.lambda_grid()]) == 0):
        if np.linalg.matrix_rank(gram) < gram.shape[0]:
            raise SmoothingError("design is rank deficient with zero penalty; use a positive penalty weight")
    return fit_tensor_normal(gram, dw.T @ y, float(np.sum(w * y * y)), float(np.count_nonzero(w)), cfg1, cfg2, tie)


def pspline_2d(points, cfg1: SplineConfig | None = None, cfg2: SplineConfig | None = None, grid1=None, grid2=None, tie=False) -> BivariateSurface:
    """Penalized tensor-product spline surface through ``(x1, x2, value, weight)`` rows."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValidationError("points must be rows of (x1, x2, value[, weight])")
    w = pts[:, 3] if pts.shape[1] == 4 else None
    fit = fit_pspline_2d(pts[:, 0], pts[:, 1], pts[:, 2], w, cfg1, cfg2, tie)
    return fit.surface(grid1, grid2)


# ---------------------------------------------------------------------------
# sandwich smoother for gridded-in-s data
# ---------------------------------------------------------------------------

@dataclass
class SandwichFit:
    cfg_t: SplineConfig
    cfg_s: SplineConfig
    coef: np.ndarray  # (nb_t, nb_s)
    lam: tuple[float, float]
    edf: float
    gcv: GcvResult | None = None

    def __call__(self, s, t) -> np.ndarray:
        s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
        bs = self.cfg_s.basis(s.ravel())
        bt = self.cfg_t.basis(t.ravel())
        return np.einsum("pa,ab,pb->p", bt, self.coef, bs).reshape(s.shape)

    def at(self, t, grid_s) -> np.ndarray:
        """len(t) x len(grid_s) matrix of fitted values."""
        return self.cfg_t.basis(t) @ self.coef @ self.cfg_s.basis(grid_s).T


def fit_sandwich(t, grid_s, Y, cfg_t: SplineConfig, cfg_s: SplineConfig, row_weights=None) -> SandwichFit:
    """Penalized tensor fit of curves ``Y`` (rows at times ``t``, columns on ``grid_s``).

    The penalty is the product form ``(A_t + lt P_t) (x) (A_s + ls P_s) - A_t (x) A_s``
    whose smoother factorizes as ``S_t Y S_s^T``; GCV runs over both grids at once.
    """
    Y = np.asarray(Y, dtype=float)
    w = np.ones(Y.shape[0]) if row_weights is None else np.asarray(row_weights, dtype=float)
    bt = cfg_t.basis(t)
    bs = cfg_s.basis(grid_s)
    dr_t = DemmlerReinsch(bt.T @ (bt * w[:, None]), cfg_t.penalty())
    dr_s = DemmlerReinsch(bs.T @ bs, cfg_s.penalty())
    F = dr_t.M.T @ (bt * w[:, None]).T @ Y @ bs @ dr_s.M
    at = dr_t.factors(cfg_t.lambda_grid())  # (Gt, nt)
    as_ = dr_s.factors(cfg_s.lambda_grid())  # (Gs, ns)
    f2 = F**2
    cross = np.einsum("ia,ab,jb->ij", at, f2, as_)
    fit2 = np.einsum("ia,ab,jb->ij", dr_t.kappa * at**2, f2, dr_s.kappa * as_**2)
    yy = float(np.sum(w[:, None] * Y * Y))
    rss = np.maximum(yy - 2 * cross + fit2, 0.0)
    tr = (dr_t.kappa * at).sum(1)[:, None] * (dr_s.kappa * as_).sum(1)[None, :]
    lt, ls = cfg_t.lambda_grid(), cfg_s.lambda_grid()
    pairs = [(a, b) for a in lt for b in ls]
    order = sorted(range(len(pairs)), key=lambda k: (pairs[k][0] * pairs[k][1], pairs[k][0] + pairs[k][1]))
    n_obs = float(np.count_nonzero(w)) * Y.shape[1]
    scores = gcv_scores(rss.ravel()[order], tr.ravel()[order], n_obs)
    res = pick_gcv(scores, tr.ravel()[order], [pairs[k] for k in order])
    i, j = divmod(order[res.index], len(ls))
    coef = dr_t.M @ (at[i][:, None] * F * as_[j][None, :]) @ dr_s.M.T
    return SandwichFit(cfg_t, cfg_s, coef, (float(lt[i]), float(ls[j])), float(tr[i, j]), res)


# ---------------------------------------------------------------------------
# local-linear smoothing
# ---------------------------------------------------------------------------

def local_linear_1d(x, y, w, eval_points, cfg: KernelConfig, bandwidth: float | None = None) -> np.ndarray:
    """Local-linear fit at each evaluation point (intercept of a kernel-weighted line)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=float)
    e = np.atleast_1d(np.asarray(eval_points, dtype=float))
    if not (x.shape == y.shape == w.shape):
        raise ValidationError("x, y and w must share a shape")
    if np.any(~np.isfinite(x)) or np.any(~np.isfinite(y)):
        raise ValidationError("non-finite input to smoother")
    h = bandwidth if bandwidth is not None else float(np.atleast_1d(cfg.bandwidth)[0])
    u = (x[None, :] - e[:, None]) / h
    k = cfg.weights(u) * w[None, :]
    s0 = k.sum(1)
    s1 = (k * u).sum(1)
    s2 = (k * u * u).sum(1)
    t0 = k @ y
    t1 = (k * u) @ y
    empty = s0 <= 0
    if np.any(empty):
        raise SmoothingError(f"empty kernel window at eval point {e[np.argmax(empty)]!r}")
    det = s0 * s2 - s1**2
    degenerate = det <= 1e-12 * s0 * np.maximum(s2, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(degenerate, t0 / s0, (s2 * t0 - s1 * t1) / det)
    if np.any(degenerate):
        warnings.warn(
            f"local-linear design singular at {int(degenerate.sum())} eval point(s); used weighted mean",
            RuntimeWarning,
            stacklevel=2,
        )
    return out


def local_plane_intercept(mom: np.ndarray, where: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form local-plane intercept from scaled moments.

    ``mom`` columns are V00 V10 V01 V20 V02 V11 R00 R10 R01.  Returns the
    intercept and the (0, 0) entry of the inverse moment matrix.
    """
    v00, v10, v01, v20, v02, v11, r00, r10, r01 = mom.T
    c0 = v20 * v02 - v11**2
    c1 = v10 * v02 - v01 * v11
    c2 = v01 * v20 - v10 * v11
    den = c0 * v00 - c1 * v10 - c2 * v01
    num = c0 * r00 - c1 * r10 - c2 * r01
    bad = ~(np.abs(den) > 1e-12 * np.maximum(v00, 1e-300) ** 3)
    if np.any(bad):
        k = int(np.argmax(bad))
        loc = f" at {where[k].tolist()!r}" if where is not None else ""
        raise SmoothingError(f"degenerate local-plane window{loc}: fewer than 3 non-collinear points")
    return num / den, c0 / den


def _as_points(points) -> tuple[np.ndarray, ...]:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValidationError("points must be rows of (x1, x2, value[, weight])")
    if np.any(~np.isfinite(pts)):
        raise ValidationError("non-finite input to smoother")
    w = pts[:, 3] if pts.shape[1] == 4 else np.ones(pts.shape[0])
    return pts[:, 0].copy(), pts[:, 1].copy(), pts[:, 2].copy(), np.ascontiguousarray(w)


def local_linear_2d(points, eval_points, cfg: KernelConfig, bandwidth: float | None = None) -> np.ndarray:
    """Local-plane smoother with product kernel; returns the fitted intercepts."""
    x1, x2, y, w = _as_points(points)
    ev = np.atleast_2d(np.asarray(eval_points, dtype=float))
    h = bandwidth if bandwidth is not None else float(np.atleast_1d(cfg.bandwidth)[0])
    mom = _kernels.active.ll2_moments(x1, x2, y, w, ev[:, 0].copy(), ev[:, 1].copy(), h, h, cfg.code)
    est, _ = local_plane_intercept(mom, ev)
    return est


def local_linear_2d_gcv(points, cfg: KernelConfig, spacing: float, length: float = 1.0) -> GcvResult:
    """GCV bandwidth choice for :func:`local_linear_2d`, evaluated at the data points."""
    x1, x2, y, w = _as_points(points)
    ev1, ev2 = x1.copy(), x2.copy()
    k0 = float(cfg.weights(0.0))
    grid = cfg.bandwidth_grid(spacing, length)

    def fam(h):
        mom = _kernels.active.ll2_moments(x1, x2, y, w, ev1, ev2, h, h, cfg.code)
        try:
            fit, inv00 = local_plane_intercept(mom)
        except SmoothingError:
            return np.inf, np.inf, float(y.size)
        lev = w * k0 * k0 / (h * h) * inv00
        return float(np.sum(w * (y - fit) ** 2)), float(lev.sum()), float(y.size)

    return gcv_select(fam, list(grid))
