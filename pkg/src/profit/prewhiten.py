"""Covariance of a projected series and the per-subject whitening blocks."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels
from . import smoothers as sm
from .errors import ValidationError
from .marginal_basis import ProjectedSeries

T_GRID_SIZE = 101
NOISE_FLOOR_REL = 1e-6
EIG_FLOOR_REL = 1e-8
KERNEL_GCV_MAX_PAIRS = 5000


@dataclass
class ProjectedCovModel:
    t_grid: np.ndarray
    eta: np.ndarray  # mean on t_grid (covariates at their centre)
    gamma: np.ndarray  # smoothed covariance surface on t_grid x t_grid
    nu: np.ndarray  # retained eigenvalues, descending
    psi: np.ndarray  # (L, G) eigenfunctions on t_grid
    sigma2: float
    pve_t: float
    floor: float
    method: str = "pspline"
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta_fn: Callable | None = field(default=None, repr=False, compare=False)

    @property
    def L(self) -> int:
        return int(self.nu.size)

    def eta_at(self, t, covariates=None) -> np.ndarray:
        """Fitted mean at arbitrary times (and visit-level covariates when modelled)."""
        t = np.asarray(t, dtype=float)
        base = self.eta_fn(t) if self.eta_fn is not None else np.interp(t, self.t_grid, self.eta)
        if covariates is not None and self.alpha.size:
            base = base + np.asarray(covariates, dtype=float).reshape(t.size, -1) @ self.alpha
        return base

    def psi_at(self, t) -> np.ndarray:
        """(len(t), L) eigenfunctions interpolated linearly from the grid."""
        t = np.asarray(t, dtype=float)
        if self.L == 0:
            return np.zeros((t.size, 0))
        return np.column_stack([np.interp(t, self.t_grid, p) for p in self.psi])

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "t_grid": self.t_grid.tolist(),
            "eta": self.eta.tolist(),
            "alpha": self.alpha.tolist(),
            "gamma": self.gamma.tolist(),
            "nu": self.nu.tolist(),
            "psi": self.psi.tolist(),
            "sigma2": self.sigma2,
            "pve_t": self.pve_t,
            "noise_floor": self.floor,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()), encoding="utf-8")


# ---------------------------------------------------------------------------
# pair-product normal equations
# ---------------------------------------------------------------------------

def pair_normal_equations(resid: np.ndarray, basis: np.ndarray, bounds: np.ndarray):
    """Normal equations for regressing e_j e_j' (j != j', same subject) on b(t_j) (x) b(t_j').

    Built from per-subject sums so the sum m_i (m_i - 1) rows are never formed:
    sum_{j != j'} (b b^T) (x) (b' b'^T) = sum_i G_i (x) G_i - sum_j (b b^T) (x) (b b^T).
    """
    nb = basis.shape[1]
    starts = bounds[:-1]
    keep = np.diff(bounds) > 0
    outer = basis[:, :, None] * basis[:, None, :]
    G = np.add.reduceat(outer, starts[keep], axis=0)
    U = np.add.reduceat(resid[:, None] * basis, starts[keep], axis=0)
    kb = (basis[:, :, None] * basis[:, None, :]).reshape(-1, nb * nb)
    gram = np.einsum("iab,icd->acbd", G, G).reshape(nb * nb, nb * nb) - kb.T @ kb
    cross = np.einsum("ia,ic->ac", U, U).reshape(-1) - kb.T @ (resid**2)
    e2 = np.add.reduceat(resid**2, starts[keep])
    e4 = np.add.reduceat(resid**4, starts[keep])
    yy = float(np.sum(e2**2 - e4))
    m = np.diff(bounds)
    n_pairs = float(np.sum(m * (m - 1)))
    return gram, cross, yy, n_pairs


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _eigen_t(gamma: np.ndarray, pve_t: float, tol: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Leading eigenpairs reaching ``pve_t``; eigenvalues at or below ``tol`` count as zero."""
    G = gamma.shape[0]
    vals, vecs = np.linalg.eigh((gamma + gamma.T) / 2)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order] / G, 0.0, None)
    vals[vals <= tol] = 0.0
    vecs = vecs[:, order]
    total = vals.sum()
    if not total > 0 or vals[0] <= 1e-12 * max(np.abs(gamma).max() / G, 1e-300):
        return np.zeros(0), np.zeros((0, G))
    L = int(np.searchsorted(np.cumsum(vals) / total, pve_t - 1e-12) + 1)
    L = min(L, int(np.count_nonzero(vals > 0)))
    psi = np.sqrt(G) * vecs[:, :L].T
    for ell in range(L):
        if psi[ell].mean() < 0:
            psi[ell] = -psi[ell]
    return vals[:L].copy(), psi


def _ll1_gcv(x, y, cfg: sm.KernelConfig, spacing: float):
    """Bandwidth for a 1-D local-linear fit by GCV at the data points."""
    k0 = float(cfg.weights(0.0))

    def fam(h):
        u = (x[None, :] - x[:, None]) / h
        k = cfg.weights(u)
        s0, s1, s2 = k.sum(1), (k * u).sum(1), (k * u * u).sum(1)
        det = s0 * s2 - s1**2
        if np.any(det <= 1e-12 * s0 * np.maximum(s2, 1e-300)):
            return np.inf, np.inf, float(x.size)
        fit = (s2 * (k @ y) - s1 * ((k * u) @ y)) / det
        lev = k0 * s2 / det
        return float(np.sum((y - fit) ** 2)), float(lev.sum()), float(x.size)

    return sm.gcv_select(fam, list(cfg.bandwidth_grid(spacing, 1.0)))


def fit_projected_cov(
    ps: ProjectedSeries,
    pve_t: float = 0.9,
    method: str = "pspline",
    spline: sm.SplineConfig | None = None,
    kernel: sm.KernelConfig | None = None,
    use_covariates: bool = True,
) -> ProjectedCovModel:
    """Mean, smooth covariance, eigenpairs and noise variance of one projected series.

    ``method`` selects penalized splines (default) or local-linear kernels.
    Covariates stored on the series enter the mean as unpenalized linear terms.
    """
    if not 0 < pve_t <= 1:
        raise ValidationError("pve_t must lie in (0, 1]")
    t, w = ps.times, ps.values
    if np.unique(t).size < 3:
        raise ValidationError("insufficient longitudinal design: fewer than 3 distinct visit times")
    if np.count_nonzero(ps.m >= 2) < 2:
        raise ValidationError("insufficient longitudinal design: need 2 subjects with at least 2 visits")
    spline = spline or sm.SplineConfig(n_basis=10)
    tg = np.linspace(0.0, 1.0, T_GRID_SIZE)
    extra = ps.visit_covariates() if use_covariates else None
    if extra is not None:
        extra = extra - extra.mean(0)
    var_w = float(np.var(w))
    floor = NOISE_FLOOR_REL * var_w if var_w > 0 else 1e-12 * max(1.0, float(np.mean(w * w)))

    if method == "pspline":
        fit = sm.fit_pspline_1d(t, w, cfg=spline, extra=extra)
        resid = w - fit(t, extra)
        alpha = fit.beta_extra
        eta_fn = fit
        basis = spline.basis(t)
        gram, cross, yy, n_pairs = pair_normal_equations(resid, basis, ps.bounds)
        cov_fit = sm.fit_tensor_normal(gram, cross, yy, n_pairs, spline, spline, tie=True)
        bg = spline.basis(tg)
        coef = (cov_fit.coef + cov_fit.coef.T) / 2
        gamma = bg @ coef @ bg.T
        var_fit = sm.fit_pspline_1d(t, resid**2, cfg=spline)
        var_grid = var_fit(tg)
    elif method == "kernel":
        kernel = kernel or sm.KernelConfig()
        spacing = 1.0 / T_GRID_SIZE
        if extra is not None:
            # covariate effect by pooled least squares on the partial residuals of a first pass
            h0 = float(_ll1_gcv(t, w, kernel, spacing).value)
            first = sm.local_linear_1d(t, w, None, t, kernel, h0)
            alpha = np.linalg.lstsq(extra, w - first, rcond=None)[0]
        else:
            alpha = np.zeros(0)
        target = w - (extra @ alpha if alpha.size else 0.0)
        h_eta = float(_ll1_gcv(t, target, kernel, spacing).value) if kernel.bandwidth is None else float(np.atleast_1d(kernel.bandwidth)[0])
        resid = target - sm.local_linear_1d(t, target, None, t, kernel, h_eta)

        def eta_fn(x, _t=t, _y=target, _h=h_eta, _k=kernel):
            return sm.local_linear_1d(_t, _y, None, np.atleast_1d(x), _k, _h)

        t1, t2, prod = _kernels.active.pair_products(resid, t, ps.bounds)
        pts = np.column_stack([t1, t2, prod])
        if kernel.bandwidth is None:
            sub = pts[:: max(1, len(pts) // KERNEL_GCV_MAX_PAIRS)]
            h_gam = float(sm.local_linear_2d_gcv(sub, kernel, spacing).value)
        else:
            h_gam = float(np.atleast_1d(kernel.bandwidth)[0])
        ev = np.stack(np.meshgrid(tg, tg, indexing="ij"), axis=-1).reshape(-1, 2)
        gamma = sm.local_linear_2d(pts, ev, kernel, h_gam).reshape(tg.size, tg.size)
        gamma = (gamma + gamma.T) / 2
        var_grid = sm.local_linear_1d(t, resid**2, None, tg, kernel, h_eta)
    else:
        raise ValidationError(f"unknown covariance method {method!r}; use 'pspline' or 'kernel'")

    # components a million times below the noise floor are rounding residue
    nu, psi = _eigen_t(gamma, pve_t, 1e-6 * floor)
    avg = float(np.mean(var_grid - np.diag(gamma)))
    if avg < floor:
        if var_w > 0:
            warnings.warn(
                f"estimated noise variance {avg:.3g} below floor; using {floor:.3g}", RuntimeWarning, stacklevel=2
            )
        sigma2 = floor
    else:
        sigma2 = avg
    eta_grid = np.asarray(eta_fn(tg), dtype=float)
    return ProjectedCovModel(tg, eta_grid, gamma, nu, psi, float(sigma2), float(pve_t), float(floor), method,
                             np.asarray(alpha, dtype=float), eta_fn)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def inverse_sqrt(blocks: np.ndarray, rel_floor: float = EIG_FLOOR_REL) -> np.ndarray:
    """Symmetric inverse square roots of a stack of SPD matrices, eigenvalues floored."""
    vals, vecs = np.linalg.eigh(blocks)
    top = vals.max(axis=-1, keepdims=True)
    vals = np.maximum(vals, rel_floor * top)
    return (vecs / np.sqrt(vals)[..., None, :]) @ np.swapaxes(vecs, -1, -2)


@dataclass
class BlockCovariance:
    bounds: np.ndarray
    groups: dict  # m -> (subject indices, cov stack, inverse-sqrt stack)
    floor_rel: float = EIG_FLOOR_REL

    @property
    def n(self) -> int:
        return self.bounds.size - 1

    def block(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        m = int(self.bounds[i + 1] - self.bounds[i])
        idx, cov, isq = self.groups[m]
        pos = int(np.searchsorted(idx, i))
        return cov[pos], isq[pos]

    @property
    def blocks(self) -> list[np.ndarray]:
        return [self.block(i)[0] for i in range(self.n)]

    @property
    def inv_sqrt(self) -> list[np.ndarray]:
        return [self.block(i)[1] for i in range(self.n)]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Left-multiply stacked rows (N or N x c) by the block-diagonal inverse square root."""
        x = np.asarray(x, dtype=float)
        vec = x.ndim == 1
        xm = x[:, None] if vec else x
        if xm.shape[0] != self.bounds[-1]:
            raise ValidationError(f"whitening dimension mismatch: {xm.shape[0]} rows vs {self.bounds[-1]}")
        out = np.empty_like(xm)
        for m, (idx, _, isq) in self.groups.items():
            rows = self.bounds[idx][:, None] + np.arange(m)[None, :]
            out[rows] = isq @ xm[rows]
        return out[:, 0] if vec else out


def build_blocks(cov_blocks: list[np.ndarray], ids=None) -> BlockCovariance:
    """Group explicit per-subject covariance blocks by size and invert them."""
    m = np.array([b.shape[0] for b in cov_blocks], dtype=np.int64)
    bounds = np.concatenate([[0], np.cumsum(m)])
    groups = {}
    for size in np.unique(m):
        idx = np.flatnonzero(m == size)
        stack = np.stack([np.asarray(cov_blocks[i], dtype=float) for i in idx])
        bad = ~np.all(np.isfinite(stack), axis=(1, 2))
        if bad.any():
            who = ids[idx[np.argmax(bad)]] if ids else int(idx[np.argmax(bad)])
            raise ValidationError(f"non-finite covariance block for subject {who!r}")
        stack = (stack + np.swapaxes(stack, 1, 2)) / 2
        groups[int(size)] = (idx, stack, inverse_sqrt(stack))
    return BlockCovariance(bounds, groups)


def assemble_blocks(ps: ProjectedSeries, model: ProjectedCovModel) -> BlockCovariance:
    """Sigma_i = Psi_i diag(nu) Psi_i^T + sigma2 I for every subject, with inverse square roots."""
    psi = model.psi_at(ps.times)
    m = ps.m
    groups = {}
    for size in np.unique(m):
        idx = np.flatnonzero(m == size)
        rows = ps.bounds[idx][:, None] + np.arange(size)[None, :]
        P = psi[rows]  # (c, m, L)
        stack = np.einsum("cjl,l,ckl->cjk", P, model.nu, P) + model.sigma2 * np.eye(size)
        bad = ~np.all(np.isfinite(stack), axis=(1, 2))
        if bad.any():
            i = idx[np.argmax(bad)]
            who = ps.ids[i] if ps.ids else int(i)
            raise ValidationError(f"non-finite covariance block for subject {who!r}")
        groups[int(size)] = (idx, stack, inverse_sqrt(stack))
    return BlockCovariance(ps.bounds.copy(), groups)
