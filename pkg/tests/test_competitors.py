import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from profit import competitors as zc
from profit import simstudy as ss
from profit.errors import ValidationError
from profit.marginal_basis import ProjectedSeries
from profit.pipeline import ProfitConfig, prepare


def _series(values_fn, n=100, m=(4, 8), seed=0, noise=0.1):
    g = np.random.default_rng(seed)
    ms = g.integers(m[0], m[1] + 1, n)
    t = np.concatenate([np.sort(g.uniform(size=k)) for k in ms])
    y = values_fn(t) + noise * g.standard_normal(t.size)
    return ProjectedSeries(1, t, y, np.concatenate([[0], np.cumsum(ms)]))


def test_constant_series_zero_statistic():
    zs = zc.zc_statistic(_series(lambda t: 0 * t + 2.5, noise=0.0))
    assert zs.statistic == pytest.approx(0.0, abs=1e-20)
    assert zs.center == pytest.approx(2.5)


def test_l2_distance_sin():
    assert zc.l2_distance(lambda t: np.sin(2 * np.pi * t), 0.0) == pytest.approx(0.5, abs=1e-6)


def test_l2_distance_linear():
    assert zc.l2_distance(lambda t: t, 0.5) == pytest.approx(1 / 12, abs=1e-8)


def test_statistic_uses_spline_and_grand_mean():
    ps = _series(lambda t: np.sin(2 * np.pi * t), n=200, noise=0.05)
    zs = zc.zc_statistic(ps)
    assert zs.center == pytest.approx(ps.values.mean())
    assert zs.statistic == pytest.approx(zc.l2_distance(zs.eta, zs.center), rel=1e-12)
    assert zs.statistic == pytest.approx(0.5, abs=0.03)


@given(st.floats(-1e3, 1e3), st.integers(0, 1000))
def test_shift_invariance(c, seed):
    ps = _series(lambda t: t**2, n=30, seed=seed, noise=0.3)
    a = zc.zc_statistic(ps).statistic
    b = zc.zc_statistic(ps.with_values(ps.values + c)).statistic
    assert b == pytest.approx(a, abs=1e-8)


def test_few_distinct_times_warns():
    t = np.repeat(np.linspace(0, 1, 6), 10)
    ps = ProjectedSeries(1, t, np.sin(3 * t), np.arange(0, 61, 6))
    with pytest.warns(RuntimeWarning, match="distinct times"):
        zc.zc_statistic(ps)


def test_mixture_chi2_one():
    draws = zc.mixture_draws([1.0], 10**5, 2)
    assert np.mean(draws > stats.chi2(1).ppf(0.95)) == pytest.approx(0.05, abs=0.01)
    assert zc.zc_mc_pvalue(3.841, [1.0], 10**5, 2) == pytest.approx(0.05, abs=0.01)


def test_mixture_degenerate_cases():
    with pytest.warns(RuntimeWarning):
        assert zc.zc_mc_pvalue(0.3, [0.0], 1000, 0) == 1.0
    with pytest.warns(RuntimeWarning):
        assert zc.zc_mc_pvalue(0.3, [], 1000, 0) == 1.0
    assert zc.zc_mc_pvalue(0.0, [2.0, 1.0], 1000, 0) == 1.0


def test_mixture_n_scale():
    a = zc.mixture_draws([2.0, 1.0], 500, 3)
    b = zc.mixture_draws([2.0, 1.0], 500, 3, scale=50.0)
    np.testing.assert_allclose(b, a / 50)
    assert zc.zc_mc_pvalue(0.1, [2.0, 1.0], 500, 3, n_scale=50) == np.mean(b > 0.1)


def test_bootstrap_constant():
    ps = _series(lambda t: 0 * t + 1.0, n=30, noise=0.0)
    assert zc.zc_bootstrap_pvalue(ps, B=100, seed=1) == 1.0


def test_bootstrap_strong_trend():
    ps = _series(lambda t: 5 * t, n=100, noise=0.05)
    assert zc.zc_bootstrap_pvalue(ps, B=200, seed=1) <= 1 / 200


def test_bootstrap_deterministic_and_B():
    ps = _series(lambda t: 0.2 * t, n=40, noise=1.0)
    assert zc.zc_bootstrap_pvalue(ps, B=100, seed=9) == zc.zc_bootstrap_pvalue(ps, B=100, seed=9)
    with pytest.raises(ValidationError):
        zc.zc_bootstrap_pvalue(ps, B=99)


def test_fast_bootstrap_matches_refit():
    ps = _series(lambda t: 0.3 * np.sin(4 * t), n=40, noise=1.0, seed=5)
    zs = zc.zc_statistic(ps)
    centred = ps.with_values(ps.values - zs.eta(ps.times) + zs.center)
    draws = np.random.default_rng(0).integers(0, ps.n, size=(30, ps.n))
    fast = zc._bootstrap_stats_sufficient(centred, draws)
    slow = zc._bootstrap_stats_refit(centred, draws)
    np.testing.assert_allclose(fast, slow, rtol=1e-7, atol=1e-12)
    assert zc.zc_bootstrap_pvalue(ps, zs, 100, 4, fast=True) == zc.zc_bootstrap_pvalue(ps, zs, 100, 4, fast=False)


def test_bootstrap_is_null_centred():
    # resamples of null-centred data carry no trend, so the observed strong trend is never matched
    ps = _series(lambda t: 2 * t, n=60, noise=0.5, seed=2)
    assert zc.zc_bootstrap_pvalue(ps, B=100, seed=0) == 0.0


def test_run_zc_shares_projections(sim_small):
    cfg = ProfitConfig(n_sim=2000, seed=1)
    state = prepare(sim_small, cfg)
    a = zc.run_zc(sim_small, cfg, "ZC-MC", state=state)
    b = zc.run_zc(sim_small, cfg, "ZC-BT", B=100, state=state)
    assert a.method == "ZC-MC" and b.method == "ZC-BT" and a.K == b.K == state.basis.K
    np.testing.assert_allclose([d.statistic for d in a.directions], [d.statistic for d in b.directions])
    for ps, d in zip(state.series, a.directions):
        assert d.statistic == pytest.approx(zc.zc_statistic(ps).statistic)
    with pytest.raises(ValidationError):
        zc.run_zc(sim_small, cfg, "ZC-XX")


@pytest.mark.slow
def test_bootstrap_size_conservative():
    rej = 0
    reps = 40
    for r in range(reps):
        ds = ss.generate(ss.SimConfig(n=100, m_range=(8, 12), seed=(900, r)))
        rep = zc.run_zc(ds, ProfitConfig(seed=r), "ZC-BT", B=200)
        rej += rep.reject
    assert rej / reps <= 0.15
