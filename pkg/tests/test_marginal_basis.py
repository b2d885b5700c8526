import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from profit import marginal_basis as mb
from profit import simstudy as ss
from profit import smoothers as sm
from profit.data import LongitudinalFunctionalDataset, SubjectRecord, from_arrays
from profit.errors import DegenerateCovarianceError, ValidationError

from conftest import make_dataset
from test_smoothers import cox_de_boor, diff_penalty, uniform_knots

SQ2 = np.sqrt(2.0)


# -- mean ----------------------------------------------------------------------

def test_mean_constant_exact():
    ds = make_dataset(lambda s, t: 2.0 + 0 * s * t)
    mf = mb.estimate_mean(ds)
    np.testing.assert_allclose(mf.surface().values, 2.0, atol=1e-6)


def test_mean_plane_exact():
    ds = make_dataset(lambda s, t: s + t)
    mf = mb.estimate_mean(ds)
    surf = mf.surface()
    np.testing.assert_allclose(surf.values, surf.grid_s[:, None] + surf.grid_t[None, :], atol=1e-5)


def _assembled_mean_oracle(ds, lam_t, lam_s, nt=10, ns=20):
    """Dense Kronecker normal equations of the product-penalty tensor fit."""
    Bt = cox_de_boor(ds.times, uniform_knots(nt), 3)
    Bs = cox_de_boor(ds.grid_s, uniform_knots(ns), 3)
    Gt, Gs = Bt.T @ Bt, Bs.T @ Bs
    Pt, Ps = diff_penalty(nt), diff_penalty(ns)
    At = Gt + lam_t * np.trace(Gt) / np.trace(Pt) * Pt
    As = Gs + lam_s * np.trace(Gs) / np.trace(Ps) * Ps
    rhs = (Bt.T @ ds.curves @ Bs).ravel()
    coef = np.linalg.solve(np.kron(At, As), rhs).reshape(nt, ns)
    return lambda t: cox_de_boor(t, uniform_knots(nt), 3) @ coef @ Bs.T


@pytest.mark.slow
def test_mean_on_generator_matches_assembled_oracle():
    ds = ss.generate(ss.SimConfig(n=200, m_range=(8, 12), seed=1))
    mf = mb.estimate_mean(ds)
    oracle = _assembled_mean_oracle(ds, *mf.fit.lam)
    tg = np.linspace(0, 1, 41)
    np.testing.assert_allclose(mf.fit.at(tg, ds.grid_s), oracle(tg), atol=1e-8)


@pytest.mark.slow
def test_mean_sup_error_with_independent_errors():
    # only white noise: the smoother's independence assumption holds
    ds = ss.generate(ss.SimConfig(n=200, m_range=(8, 12), seed=1, score_var=(0, 0, 0, 0), sigma2_e=(0, 0)))
    mf = mb.estimate_mean(ds)
    err = mf.fit.at(np.linspace(0, 1, 101), ds.grid_s) - np.cos(np.pi * ds.grid_s / 2)[None, :]
    assert np.abs(err).max() < 0.15


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="subject-level random functions do not average out at n=200; see decisions ledger")
def test_mean_sup_error_full_generator():
    ds = ss.generate(ss.SimConfig(n=200, m_range=(8, 12), seed=1))
    mf = mb.estimate_mean(ds)
    err = mf.fit.at(np.linspace(0, 1, 101), ds.grid_s) - np.cos(np.pi * ds.grid_s / 2)[None, :]
    assert np.abs(err).max() < 0.15


def test_mean_with_covariate_recovers_alpha():
    g = np.random.default_rng(4)
    age = g.uniform(20, 60, 40)
    s = np.linspace(0, 1, 21)
    times, curves = [], []
    for a in age:
        t = np.sort(g.uniform(size=4))
        times.append(t)
        curves.append(np.cos(np.pi * s / 2)[None, :] + t[:, None] + 0.05 * a * s[None, :] + 0.01 * g.standard_normal((4, 21)))
    ds = from_arrays(times, curves, s, covariates=[{"Age": a} for a in age])
    mf = mb.estimate_mean(ds, covariates=["Age"])
    assert mf.converged
    np.testing.assert_allclose(mf.alpha[0], 0.05 * s, atol=2e-3)
    np.testing.assert_allclose(mf.fitted(ds), ds.curves, atol=0.05)


def test_mean_backfitting_nonconvergence_warns():
    g = np.random.default_rng(5)
    s = np.linspace(0, 1, 11)
    covs = [{"x": float(v)} for v in g.standard_normal(12)]
    ds = from_arrays([np.sort(g.uniform(size=3)) for _ in range(12)], [g.standard_normal((3, 11)) for _ in range(12)], s,
                     covariates=covs)
    with pytest.warns(RuntimeWarning, match="did not converge"):
        mf = mb.estimate_mean(ds, covariates=["x"], max_iter=1)
    assert not mf.converged


# -- raw covariance ------------------------------------------------------------

def test_raw_zero_when_curves_equal_mean():
    ds = make_dataset(lambda s, t: np.sin(s + t))
    mc = mb.raw_marginal_covariance(ds, ds.curves)
    np.testing.assert_array_equal(mc.raw, 0.0)


def test_raw_hand_computation():
    subj = (SubjectRecord("a", [0.3], [[1.0, 2.0]]), SubjectRecord("b", [0.6], [[3.0, -1.0]]))
    ds = LongitudinalFunctionalDataset(np.array([0.0, 1.0]), subj)
    mc = mb.raw_marginal_covariance(ds, np.zeros((2, 2)), "pooled")
    np.testing.assert_allclose(mc.raw, [[5, -0.5], [-0.5, 2.5]], atol=1e-15)
    np.testing.assert_allclose(mc.weights_used, [0.5, 0.5])


def test_subject_weights_normalized():
    v = mb.subject_weights(np.array([2, 4]), "per_subject")
    np.testing.assert_allclose(v, [0.25, 0.125])
    assert np.dot([2, 4], v) == 1.0
    with pytest.raises(ValidationError):
        mb.subject_weights(np.array([2]), "bogus")


@given(st.lists(st.integers(1, 30), min_size=1, max_size=20), st.sampled_from(["pooled", "per_subject"]))
def test_weights_sum_to_one(m, scheme):
    m = np.array(m)
    assert abs(np.dot(m, mb.subject_weights(m, scheme)) - 1) < 1e-12


# -- smoothing -----------------------------------------------------------------

def _mc(raw):
    R = raw.shape[0]
    return mb.MarginalCovariance(np.linspace(0, 1, R), raw, np.ones(1))


def test_smooth_constant_offdiagonal():
    raw = np.full((21, 21), 1.7)
    raw[np.diag_indices(21)] = 50.0  # diagonal is ignored
    out = mb.smooth_marginal_covariance(_mc(raw))
    np.testing.assert_allclose(out.smoothed, 1.7, atol=1e-10)


def test_smooth_bilinear_exact():
    s = np.linspace(0, 1, 21)
    raw = 0.5 + 2 * s[:, None] - 1.0 * s[None, :]
    raw = (raw + raw.T) / 2
    out = mb.smooth_marginal_covariance(_mc(raw))
    np.testing.assert_allclose(out.smoothed, raw, atol=1e-8)


def test_grid_fast_path_matches_generic_smoother(rng):
    s = np.linspace(0, 1, 15)
    raw = rng.standard_normal((15, 15))
    raw = raw + raw.T
    out = mb.smooth_marginal_covariance(_mc(raw), bandwidth=0.3)
    r, c = np.nonzero(~np.eye(15, dtype=bool))
    pts = np.column_stack([s[r], s[c], raw[r, c]])
    ev = np.column_stack([np.repeat(s, 15), np.tile(s, 15)])
    generic = sm.local_linear_2d(pts, ev, sm.KernelConfig(), 0.3).reshape(15, 15)
    np.testing.assert_allclose(out.smoothed, (generic + generic.T) / 2, atol=1e-10)
    assert out.bandwidth == 0.3


@pytest.mark.slow
def test_smoothed_marginal_covariance_oracle(sim_dense):
    mean = mb.estimate_mean(sim_dense)
    mc = mb.smooth_marginal_covariance(mb.raw_marginal_covariance(sim_dense, mean))
    truth = ss.true_marginal_covariance(sim_dense.grid_s)
    assert np.abs(mc.smoothed - truth).max() <= 1.5
    np.testing.assert_array_equal(mc.smoothed, mc.smoothed.T)


def test_rate_bandwidth():
    assert mb.rate_bandwidth(100) == pytest.approx((np.log(100) / 100) ** 0.25)


# -- eigenbasis ----------------------------------------------------------------

def _phis(R=101):
    s = np.linspace(0, 1, R)
    return s, SQ2 * np.sin(2 * np.pi * s), SQ2 * np.cos(2 * np.pi * s)


def test_eigen_basis_analytic():
    s, p1, p2 = _phis()
    mat = 8 * np.outer(p1, p1) + 16 / 3 * np.outer(p2, p2)
    b = mb.eigen_basis(mat, 0.9, s)
    assert b.K == 2
    # 1/R Riemann convention on a grid with both endpoints: relative bias 1/R
    np.testing.assert_allclose(b.eigenvalues, [8, 16 / 3], rtol=1e-2)
    np.testing.assert_allclose(b.eigenvalues, [8 * np.mean(p1**2), 16 / 3 * np.mean(p2**2)], rtol=1e-10)
    gram = b.eigenfunctions @ b.eigenfunctions.T / 101
    np.testing.assert_allclose(gram, np.eye(2), atol=1e-6)


def test_eigen_basis_rank_one_and_sign():
    s = np.linspace(0, 1, 51)
    phi = -SQ2 * np.cos(np.pi * s / 2) * 1.0
    phi /= np.sqrt(np.mean(phi**2))
    for pve in (0.1, 0.5, 1.0):
        b = mb.eigen_basis(3.0 * np.outer(phi, phi), pve, s)
        assert b.K == 1
        np.testing.assert_allclose(b.eigenfunctions[0], -phi, atol=1e-8)  # nonnegative integral
        assert b.eigenfunctions[0].mean() > 0


def test_sign_rule_for_zero_integral():
    s, p1, _ = _phis(100)
    phi = -np.sin(2 * np.pi * (s + 0.5 / 100))  # odd around 1/2: integral ~ 0, first entry negative
    phi /= np.sqrt(np.mean(phi**2))
    b = mb.eigen_basis(np.outer(phi, phi), 0.9, s)
    first = b.eigenfunctions[0][np.flatnonzero(np.abs(b.eigenfunctions[0]) > 1e-12)[0]]
    assert first > 0


def test_pve_arithmetic():
    R = 30
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((R, 3)))
    mat = R * (q * [5, 4, 1]) @ q.T
    b = mb.eigen_basis(mat, 0.89)
    assert b.K == 2
    assert b.pve_achieved == pytest.approx(0.9)
    np.testing.assert_allclose(b.eigenvalues, [5, 4])


def test_negative_definite_error():
    with pytest.raises(DegenerateCovarianceError, match="negative-definite"):
        mb.eigen_basis(-np.eye(10))


def test_negative_eigenvalues_floored_and_reconstruction(rng):
    R = 40
    q, _ = np.linalg.qr(rng.standard_normal((R, 4)))
    mat = R * (q * [6, 3, -1, -0.5]) @ q.T
    b = mb.eigen_basis(mat, 1.0)
    assert b.K == 2 and b.total_trace == pytest.approx(9)
    recon = (b.eigenfunctions.T * b.eigenvalues) @ b.eigenfunctions
    floored = R * (q[:, 2:] * [-1, -0.5]) @ q[:, 2:].T
    np.testing.assert_allclose(mat - recon, floored, atol=1e-10)


def test_basis_exports(tmp_path):
    s, p1, p2 = _phis(21)
    b = mb.eigen_basis(8 * np.outer(p1, p1) + 2 * np.outer(p2, p2), 0.99, s)
    b.save(tmp_path / "b.json")
    doc = json.loads((tmp_path / "b.json").read_text())
    assert len(doc["eigenvalues"]) == b.K
    b.save(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0].startswith("s,phi_1") and len(lines) == 2 + 21
    assert b.hash() == mb.eigen_basis(8 * np.outer(p1, p1) + 2 * np.outer(p2, p2), 0.99, s).hash()
    assert b.flip(1).hash() != b.hash()


# -- projection ----------------------------------------------------------------

def _basis_phi1(R=101):
    s, p1, p2 = _phis(R)
    return ss.true_basis(s)


def _const_dataset(fn, R=101):
    s = np.linspace(0, 1, R)
    return from_arrays([np.array([0.2, 0.7])] * 3, [np.tile(fn(s), (2, 1))] * 3, s)


def test_project_zero():
    ps = mb.quasi_project(_const_dataset(lambda s: 0 * s), _basis_phi1(), 1)
    np.testing.assert_array_equal(ps.values, 0.0)


def test_project_identity_curve():
    want = integrate.quad(lambda x: x * SQ2 * np.sin(2 * np.pi * x), 0, 1)[0]
    assert want == pytest.approx(-SQ2 / (2 * np.pi), abs=1e-12)
    ps = mb.quasi_project(_const_dataset(lambda s: s), _basis_phi1(), 1)
    np.testing.assert_allclose(ps.values, want, atol=5e-3)


def test_project_cosine_curve():
    want = integrate.quad(lambda x: np.cos(np.pi * x / 2) * SQ2 * np.sin(2 * np.pi * x), 0, 1)[0]
    assert want == pytest.approx(8 * SQ2 / (15 * np.pi), abs=1e-12)
    ps = mb.quasi_project(_const_dataset(lambda s: np.cos(np.pi * s / 2)), _basis_phi1(), 1)
    np.testing.assert_allclose(ps.values, want, atol=5e-3)


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_projection_linear(a, b):
    g = np.random.default_rng(0)
    base = make_dataset(lambda s, t: 0 * s * t, n=5, R=101)
    y1, y2 = g.standard_normal(base.curves.shape), g.standard_normal(base.curves.shape)
    basis = _basis_phi1()
    w = lambda Y: mb.quasi_project(base.with_curves(Y), basis, 2).values
    np.testing.assert_allclose(w(a * y1 + b * y2), a * w(y1) + b * w(y2), rtol=1e-12, atol=1e-12)


def test_project_errors():
    ds = _const_dataset(lambda s: s, R=51)
    with pytest.raises(ValidationError, match="grid"):
        mb.quasi_project(ds, _basis_phi1(101), 1)
    with pytest.raises(ValidationError, match="outside"):
        mb.quasi_project(ds, _basis_phi1(51), 3)


def test_projected_series_subset_and_residual_projection():
    ds = make_dataset(lambda s, t: s * t, n=4, R=101, noise=0.1)
    ps = mb.quasi_project(ds, _basis_phi1(), 1, mean=np.zeros((ds.N, ds.R)))
    np.testing.assert_array_equal(ps.values, mb.quasi_project(ds, _basis_phi1(), 1).values)
    sub = ps.subset([2, 2, 0])
    assert sub.n == 3 and list(sub.m) == [ds.m[2], ds.m[2], ds.m[0]]
    np.testing.assert_array_equal(sub.values[: ds.m[2]], ps.values[ps.bounds[2]: ps.bounds[3]])
