"""Pseudo-likelihood-ratio test for a polynomial-plus-spline trend in a whitened series.

The working model for a whitened response is ``W = X beta + Z b + e`` with
``b ~ N(0, lam I)``, ``e ~ N(0, I)``.  The null removes the slope terms and the
random spline part.  Everything is computed through the eigenvalues of
``Z^T Z`` and ``Z^T (I - P_X) Z``, which also parameterize the limiting null.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ValidationError
from .prewhiten import BlockCovariance

SIM_BLOCK = 1000
ZETA_DROP_REL = 1e-12
ZETA_ZERO_REL = 1e-10


def _kept(zeta, xi) -> np.ndarray:
    """Mask of projected eigenvalues that carry signal.

    Values below 1e-12 of the largest one are dropped; if even the largest is
    rounding residue relative to the unprojected spectrum, all are dropped.
    """
    top = zeta.max(initial=0.0)
    if top <= ZETA_ZERO_REL * max(np.max(xi, initial=0.0), 1e-300):
        return np.zeros(zeta.shape, dtype=bool)
    return zeta > ZETA_DROP_REL * top


# ---------------------------------------------------------------------------
# design
# ---------------------------------------------------------------------------

def knot_rule(times, p: int = 1) -> tuple[int, np.ndarray]:
    """Number of knots max(20, min(#unique/4, 40)) at equally spaced quantile levels."""
    uniq = np.unique(np.asarray(times, dtype=float))
    nu = uniq.size
    if nu < 2:
        raise ValidationError("need at least 2 distinct times to place knots")
    Q = int(np.floor(max(20.0, min(0.25 * nu, 40.0))))
    Q = max(1, min(Q, nu - p - 1))
    levels = np.arange(1, Q + 1) / (Q + 1)
    knots = np.quantile(np.asarray(times, dtype=float), levels)
    knots = np.unique(knots)
    knots = knots[(knots > uniq[0]) & (knots < uniq[-1])]
    if knots.size < Q:
        warnings.warn(f"knot collisions reduced Q from {Q} to {knots.size}", RuntimeWarning, stacklevel=2)
    return int(knots.size), knots


@dataclass
class MixedModelDesign:
    p: int
    knots: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    tested: tuple[int, ...]

    @property
    def untested(self) -> tuple[int, ...]:
        return tuple(j for j in range(self.X.shape[1]) if j not in self.tested)

    @property
    def Q(self) -> int:
        return int(self.Z.shape[1])


def build_design(times, p: int = 1, knots=None, covariates=None) -> MixedModelDesign:
    """Columns 1, t, ..., t^p, covariates for X; (t - knot)_+^p for Z."""
    t = np.asarray(times, dtype=float)
    if p < 1:
        raise ValidationError("polynomial order p must be >= 1")
    if knots is None:
        _, knots = knot_rule(t, p)
    knots = np.asarray(knots, dtype=float)
    cols = [t**d for d in range(p + 1)]
    X = np.column_stack(cols)
    if covariates is not None:
        X = np.hstack([X, np.asarray(covariates, dtype=float).reshape(t.size, -1)])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValidationError("fixed-effect design is rank deficient")
    Z = np.maximum(t[:, None] - knots[None, :], 0.0) ** p
    return MixedModelDesign(p, knots, X, Z, tuple(range(1, p + 1)))


@dataclass
class WhitenedModel:
    W: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    tested: tuple[int, ...]

    @property
    def untested(self) -> tuple[int, ...]:
        return tuple(j for j in range(self.X.shape[1]) if j not in self.tested)


def whiten(design: MixedModelDesign, values, blocks: BlockCovariance | None) -> WhitenedModel:
    """Apply the block-diagonal inverse square root to response and designs."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != design.X.shape[0]:
        raise ValidationError("response length does not match design")
    if blocks is None:
        return WhitenedModel(values.copy(), design.X.copy(), design.Z.copy(), design.tested)
    stacked = blocks.apply(np.column_stack([values, design.X, design.Z]))
    q = design.X.shape[1]
    return WhitenedModel(stacked[:, 0], stacked[:, 1:1 + q], stacked[:, 1 + q:], design.tested)


# ---------------------------------------------------------------------------
# spectrum and statistic
# ---------------------------------------------------------------------------

@dataclass
class NullSpectrum:
    xi: np.ndarray
    zeta: np.ndarray
    p_tested: int
    U: np.ndarray | None = field(default=None, repr=False)  # eigenvectors for zeta
    Zp: np.ndarray | None = field(default=None, repr=False)  # (I - P_X) Z

    def lambda_grid(self, n: int = 200, lo: float = 1e-5, hi: float = 1e8) -> np.ndarray:
        return default_lambda_grid(self.xi, n, lo, hi)


def default_lambda_grid(xi, n: int = 200, lo: float = 1e-5, hi: float = 1e8) -> np.ndarray:
    """{0} together with log-spaced ratios scaled by 1/mean(xi)."""
    xi = np.asarray(xi, dtype=float)
    scale = float(xi.mean()) if xi.size and xi.mean() > 0 else 1.0
    return np.concatenate([[0.0], np.geomspace(lo, hi, n) / scale])


def _orth(X: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(X)
    keep = np.abs(np.diag(r)) > 1e-10 * max(np.abs(np.diag(r)).max(), 1e-300)
    if not keep.all():
        raise ValidationError("whitened fixed-effect design is rank deficient")
    return q


def compute_spectrum(wm: WhitenedModel) -> NullSpectrum:
    Qx = _orth(wm.X)
    Z = wm.Z
    Zp = Z - Qx @ (Qx.T @ Z)
    xi = np.sort(np.linalg.eigvalsh(Z.T @ Z))[::-1] if Z.shape[1] else np.zeros(0)
    if Z.shape[1]:
        m = Zp.T @ Zp
        zeta, U = np.linalg.eigh((m + m.T) / 2)
        order = np.argsort(zeta)[::-1]
        zeta, U = zeta[order], U[:, order]
    else:
        zeta, U = np.zeros(0), np.zeros((0, 0))
    xi = np.clip(xi, 0.0, None)
    zeta = np.clip(zeta, 0.0, None)
    if np.any(zeta > xi * (1 + 1e-8) + 1e-10 * max(xi.max(initial=0.0), 1.0)):
        warnings.warn("projected spectrum exceeds unprojected spectrum; numerical trouble", RuntimeWarning, stacklevel=2)
    return NullSpectrum(xi, zeta, len(wm.tested), U, Zp)


@dataclass
class PlrtResult:
    statistic: float
    vc_part: float
    fe_part: float
    lam_hat: float
    w: np.ndarray
    spectrum: NullSpectrum
    p_value: float | None = None
    n_sim: int | None = None

    def summary(self) -> dict:
        return {
            "statistic": self.statistic,
            "vc_part": self.vc_part,
            "fe_part": self.fe_part,
            "lambda_hat": self.lam_hat,
            "p_value": self.p_value,
            "n_sim": self.n_sim,
            "Q": int(self.spectrum.xi.size),
            "xi": self.spectrum.xi.tolist(),
            "zeta": self.spectrum.zeta.tolist(),
        }


def profile_criterion(lam_grid, zeta, xi, w2) -> np.ndarray:
    """sum lam zeta w^2 / (1 + lam zeta) - sum log(1 + lam xi) for each grid lambda."""
    lam = np.asarray(lam_grid, dtype=float)[:, None]
    gain = (lam * zeta[None, :] * w2[None, :] / (1 + lam * zeta[None, :])).sum(1)
    return gain - np.log1p(lam * np.asarray(xi)[None, :]).sum(1)


def vc_from_spectrum(zeta, xi, w2, lam_grid) -> tuple[float, float]:
    crit = profile_criterion(lam_grid, zeta, xi, w2)
    i = int(np.argmax(crit))
    return max(float(crit[i]), 0.0), float(np.asarray(lam_grid)[i])


def plrt_statistic(wm: WhitenedModel, spectrum: NullSpectrum | None = None, lam_grid=None) -> PlrtResult:
    """Statistic = variance-component part (profiled over the grid) + fixed-effect part."""
    spectrum = spectrum or compute_spectrum(wm)
    lam_grid = spectrum.lambda_grid() if lam_grid is None else np.asarray(lam_grid, dtype=float)
    if lam_grid.size == 0 or lam_grid.min() != 0.0:
        raise ValidationError("lambda grid must include 0")
    zeta, xi = spectrum.zeta, spectrum.xi
    keep = _kept(zeta, xi)
    if not keep.any():
        if zeta.size:
            warnings.warn("all projected spectrum values are zero; testing fixed effects only", RuntimeWarning, stacklevel=2)
        w = np.zeros(0)
        vc, lam_hat = 0.0, 0.0
    else:
        c = spectrum.U[:, keep].T @ (spectrum.Zp.T @ wm.W)
        w = c / np.sqrt(zeta[keep])
        vc, lam_hat = vc_from_spectrum(zeta[keep], xi, w**2, lam_grid)
    # fixed-effect part: squared length of W along the tested directions orthogonal to the nuisance ones
    order = list(wm.untested) + list(wm.tested)
    Qx = _orth(wm.X[:, order])
    q_t = Qx[:, len(wm.untested):]
    fe = float(np.sum((q_t.T @ wm.W) ** 2))
    return PlrtResult(vc + fe, vc, fe, lam_hat, w, spectrum)


def dense_statistic(wm: WhitenedModel, lam_grid) -> float:
    """Brute-force sup of the Gaussian log likelihood ratio using N x N matrices.

    Reference implementation for tests; do not use on large data.
    """
    W, X, Z = wm.W, wm.X, wm.Z
    N = W.size
    best = -np.inf
    for lam in lam_grid:
        H = np.eye(N) + lam * Z @ Z.T
        Hi = np.linalg.inv(H)
        beta = np.linalg.solve(X.T @ Hi @ X, X.T @ Hi @ W)
        r = W - X @ beta
        ll = -np.linalg.slogdet(H)[1] - r @ Hi @ r
        best = max(best, ll)
    X1 = X[:, list(wm.untested)]
    beta0 = np.linalg.lstsq(X1, W, rcond=None)[0]
    r0 = W - X1 @ beta0
    return float(best + r0 @ r0)


# ---------------------------------------------------------------------------
# null distribution
# ---------------------------------------------------------------------------

def _seed_entropy(seed) -> list[int]:
    if isinstance(seed, np.random.SeedSequence):
        ent = seed.entropy
        return [int(ent)] + [int(x) for x in seed.spawn_key]
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def simulate_null(spectrum: NullSpectrum, n_sim: int = 10000, lam_grid=None, seed=0, impl=None) -> np.ndarray:
    """Draws of sup_lam {sum lam zeta t_q/(1+lam zeta) - sum log(1+lam xi)} + chi2_p.

    Draws are generated in fixed blocks, each from its own substream of
    ``seed``, so the sample does not depend on how blocks are scheduled.
    """
    if n_sim < 1:
        raise ValidationError("n_sim must be positive")
    impl = impl or _kernels.active
    lam_grid = spectrum.lambda_grid() if lam_grid is None else np.asarray(lam_grid, dtype=float)
    zeta = spectrum.zeta
    keep = _kept(zeta, spectrum.xi)
    z = zeta[keep]
    Q = z.size
    A = np.ascontiguousarray(lam_grid[:, None] * z[None, :] / (1 + lam_grid[:, None] * z[None, :]))
    logdet = np.ascontiguousarray(np.log1p(lam_grid[:, None] * spectrum.xi[None, :]).sum(1))
    base = _seed_entropy(seed)
    out = np.empty(n_sim)
    for b, start in enumerate(range(0, n_sim, SIM_BLOCK)):
        size = min(SIM_BLOCK, n_sim - start)
        rng = np.random.default_rng(np.random.SeedSequence(base + [b]))
        fe = rng.chisquare(spectrum.p_tested, size) if spectrum.p_tested > 0 else np.zeros(size)
        if Q:
            theta = np.ascontiguousarray(rng.standard_normal((size, Q)) ** 2)
            val = np.empty(size)
            idx = np.empty(size, dtype=np.int64)
            impl.profile_sup(theta, A, logdet, val, idx)
            vc = np.maximum(val, 0.0)
        else:
            vc = np.zeros(size)
        out[start:start + size] = vc + fe
    return out


def p_value(statistic: float, null_sample) -> float:
    """Share of null draws strictly above the statistic (no add-one correction)."""
    null_sample = np.asarray(null_sample, dtype=float)
    if null_sample.size == 0:
        raise ValidationError("empty null sample")
    if not statistic >= 0:
        raise ValidationError(f"statistic must be nonnegative, got {statistic!r}")
    return float(np.count_nonzero(null_sample > statistic)) / null_sample.size


def save_null_sample(path, sample) -> None:
    """``.npy`` binary or one-column CSV, by suffix."""
    path = Path(path)
    sample = np.asarray(sample, dtype=float)
    if path.suffix == ".npy":
        np.save(path, sample)
        return
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["draw"])
        for v in sample:
            w.writerow([repr(float(v))])


def run_series(
    values,
    times,
    blocks: BlockCovariance | None,
    p: int = 1,
    covariates=None,
    n_sim: int = 10000,
    seed=0,
    knots: Sequence[float] | None = None,
) -> PlrtResult:
    """Design, whitening, statistic, null simulation and p-value in one call."""
    design = build_design(times, p, knots, covariates)
    wm = whiten(design, values, blocks)
    spec = compute_spectrum(wm)
    grid = spec.lambda_grid()
    res = plrt_statistic(wm, spec, grid)
    null = simulate_null(spec, n_sim, grid, seed)
    res.p_value = p_value(res.statistic, null)
    res.n_sim = n_sim
    return res

