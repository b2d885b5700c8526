"""Synthetic generator with a known marginal covariance, and the size/power/timing drivers."""

from __future__ import annotations

import csv
import json
import os
import platform
import statistics
import time
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .competitors import run_zc
from .data import LongitudinalFunctionalDataset, from_arrays
from .errors import ValidationError
from .marginal_basis import MarginalBasis
from .pipeline import ProfitConfig, prepare, run_profit

ALL_METHODS = ("PROFIT", "ZC-MC", "ZC-BT")
SQRT2 = np.sqrt(2.0)

# Reference rejection rates published for this generator (10,000 replicates for
# PROFIT, 5,000 for the competitors), keyed by (method, n, m_lo, m_hi) -> {alpha: rate}.
REFERENCE_SIZE = {
    ("PROFIT", 100, 8, 12): {0.01: 0.013, 0.05: 0.057, 0.10: 0.110, 0.15: 0.157},
    ("PROFIT", 150, 8, 12): {0.01: 0.010, 0.05: 0.053, 0.10: 0.105, 0.15: 0.152},
    ("PROFIT", 200, 8, 12): {0.01: 0.010, 0.05: 0.046, 0.10: 0.095, 0.15: 0.145},
    ("PROFIT", 300, 8, 12): {0.01: 0.009, 0.05: 0.047, 0.10: 0.096, 0.15: 0.142},
    ("PROFIT", 400, 8, 12): {0.01: 0.009, 0.05: 0.048, 0.10: 0.095, 0.15: 0.142},
    ("PROFIT", 100, 15, 20): {0.01: 0.010, 0.05: 0.052, 0.10: 0.103, 0.15: 0.152},
    ("PROFIT", 150, 15, 20): {0.01: 0.008, 0.05: 0.049, 0.10: 0.101, 0.15: 0.146},
    ("PROFIT", 200, 15, 20): {0.01: 0.009, 0.05: 0.047, 0.10: 0.096, 0.15: 0.140},
    ("PROFIT", 300, 15, 20): {0.01: 0.009, 0.05: 0.048, 0.10: 0.097, 0.15: 0.143},
    ("PROFIT", 400, 15, 20): {0.01: 0.008, 0.05: 0.046, 0.10: 0.096, 0.15: 0.145},
    ("ZC-MC", 100, 8, 12): {0.01: 0.017, 0.05: 0.066, 0.10: 0.120, 0.15: 0.169},
    ("ZC-MC", 200, 8, 12): {0.01: 0.017, 0.05: 0.063, 0.10: 0.117, 0.15: 0.168},
    ("ZC-MC", 300, 8, 12): {0.01: 0.014, 0.05: 0.065, 0.10: 0.114, 0.15: 0.164},
    ("ZC-MC", 400, 8, 12): {0.01: 0.012, 0.05: 0.062, 0.10: 0.111, 0.15: 0.157},
    ("ZC-MC", 100, 15, 20): {0.01: 0.009, 0.05: 0.049, 0.10: 0.091, 0.15: 0.134},
    ("ZC-MC", 200, 15, 20): {0.01: 0.007, 0.05: 0.038, 0.10: 0.075, 0.15: 0.117},
    ("ZC-MC", 300, 15, 20): {0.01: 0.008, 0.05: 0.039, 0.10: 0.081, 0.15: 0.122},
    ("ZC-MC", 400, 15, 20): {0.01: 0.007, 0.05: 0.038, 0.10: 0.078, 0.15: 0.121},
    ("ZC-BT", 100, 8, 12): {0.01: 0.005, 0.05: 0.017, 0.10: 0.033, 0.15: 0.048},
    ("ZC-BT", 200, 8, 12): {0.01: 0.005, 0.05: 0.017, 0.10: 0.032, 0.15: 0.047},
    ("ZC-BT", 300, 8, 12): {0.01: 0.004, 0.05: 0.019, 0.10: 0.035, 0.15: 0.051},
    ("ZC-BT", 400, 8, 12): {0.01: 0.003, 0.05: 0.017, 0.10: 0.032, 0.15: 0.048},
    ("ZC-BT", 100, 15, 20): {0.01: 0.007, 0.05: 0.034, 0.10: 0.062, 0.15: 0.091},
    ("ZC-BT", 200, 15, 20): {0.01: 0.006, 0.05: 0.028, 0.10: 0.055, 0.15: 0.084},
    ("ZC-BT", 300, 15, 20): {0.01: 0.007, 0.05: 0.029, 0.10: 0.055, 0.15: 0.086},
    ("ZC-BT", 400, 15, 20): {0.01: 0.005, 0.05: 0.027, 0.10: 0.055, 0.15: 0.087},
}

# Published seconds per replicate at n = 200 (hardware dependent; ordering only).
REFERENCE_TIMING = {
    (8, 12): {"PROFIT": 7.546, "ZC-MC": 2.317, "ZC-BT": 24.412},
    (15, 20): {"PROFIT": 8.010, "ZC-MC": 2.376, "ZC-BT": 30.081},
}


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    n: int = 200
    m_range: tuple[int, int] = (8, 12)
    delta: float = 0.0
    R: int = 101
    score_var: tuple[float, float, float, float] = (4.0, 2.0, 3.0, 1.0)
    sigma2_e: tuple[float, float] = (2.0, 4.0 / 3.0)
    sigma2_wn: float = 10.0
    seed: int | tuple = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("n must be positive")
        lo, hi = self.m_range
        if not 1 <= lo <= hi:
            raise ValidationError("m_range must satisfy 1 <= lo <= hi")
        if self.R < 4:
            raise ValidationError("R must be >= 4")
        if self.delta < 0:
            raise ValidationError("delta must be >= 0")
        if min(self.score_var) < 0 or min(self.sigma2_e) < 0 or self.sigma2_wn < 0:
            raise ValidationError("variances must be nonnegative")
        object.__setattr__(self, "m_range", (int(lo), int(hi)))


def phi1(s):
    return SQRT2 * np.sin(2 * np.pi * np.asarray(s, dtype=float))


def phi2(s):
    return SQRT2 * np.cos(2 * np.pi * np.asarray(s, dtype=float))


def mean_function(s, t, delta: float):
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    return np.cos(np.pi * s / 2) + 5 * delta * (t / 4 - s) ** 3


def true_eigenvalues(cfg: SimConfig | None = None) -> np.ndarray:
    """Marginal eigenvalues: time-averaged score variances plus visit-level variances."""
    cfg = cfg or SimConfig()
    a, b, c, d = cfg.score_var
    return np.array([a + b + cfg.sigma2_e[0], c + d + cfg.sigma2_e[1]])


def true_marginal_covariance(grid_s, cfg: SimConfig | None = None) -> np.ndarray:
    lam = true_eigenvalues(cfg)
    p1, p2 = phi1(grid_s), phi2(grid_s)
    return lam[0] * np.outer(p1, p1) + lam[1] * np.outer(p2, p2)


def true_basis(grid_s, cfg: SimConfig | None = None) -> MarginalBasis:
    lam = true_eigenvalues(cfg)
    grid_s = np.asarray(grid_s, dtype=float)
    return MarginalBasis(grid_s, lam, np.vstack([phi1(grid_s), phi2(grid_s)]), 0.9, 1.0, float(lam.sum()), lam)


def true_projected_cov(t1, t2, k: int = 1, cfg: SimConfig | None = None) -> np.ndarray:
    """Covariance of the smooth random part along direction k (without visit-level noise)."""
    cfg = cfg or SimConfig()
    va, vb = cfg.score_var[2 * (k - 1)], cfg.score_var[2 * (k - 1) + 1]
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    return va * 2 * np.sin(2 * np.pi * t1) * np.sin(2 * np.pi * t2) + vb * 2 * np.cos(2 * np.pi * t1) * np.cos(2 * np.pi * t2)


def _entropy(seed) -> list[int]:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def generate(cfg: SimConfig) -> LongitudinalFunctionalDataset:
    """Draw one dataset; identical configs (including seed) give identical data."""
    rng = np.random.default_rng(np.random.SeedSequence(_entropy(cfg.seed)))
    s = np.linspace(0.0, 1.0, cfg.R)
    p1, p2 = phi1(s), phi2(s)
    lo, hi = cfg.m_range
    sd = np.sqrt(np.asarray(cfg.score_var, dtype=float))
    times, curves = [], []
    for _ in range(cfg.n):
        m = int(rng.integers(lo, hi + 1))
        t = np.sort(rng.uniform(0.0, 1.0, m))
        z = rng.standard_normal(4) * sd
        st, ct = SQRT2 * np.sin(2 * np.pi * t), SQRT2 * np.cos(2 * np.pi * t)
        e1 = z[0] * st + z[1] * ct + rng.standard_normal(m) * np.sqrt(cfg.sigma2_e[0])
        e2 = z[2] * st + z[3] * ct + rng.standard_normal(m) * np.sqrt(cfg.sigma2_e[1])
        wn = rng.standard_normal((m, cfg.R)) * np.sqrt(cfg.sigma2_wn)
        y = mean_function(s[None, :], t[:, None], cfg.delta) + e1[:, None] * p1 + e2[:, None] * p2 + wn
        times.append(t)
        curves.append(y)
    meta = {"generator": "sim", "config": _config_dict(cfg)}
    return from_arrays(times, curves, s, metadata=meta)


def _config_dict(cfg: SimConfig) -> dict:
    d = asdict(cfg)
    d["m_range"] = list(cfg.m_range)
    d["seed"] = list(cfg.seed) if isinstance(cfg.seed, tuple) else cfg.seed
    return d


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def replicate_seed(seed: int, rep: int) -> tuple[int, int]:
    """Data seed of one replicate; depends on (seed, rep) only, so cells share draws."""
    return (int(seed), int(rep))


def method_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(rep), 7]).generate_state(1)[0])


def rejects(global_p: float, alpha: float) -> bool:
    """Bonferroni decision from the global p = min(K min_k p_k, 1); level 1 always rejects."""
    return alpha >= 1.0 or global_p < alpha


def _raw_global_p(report) -> float:
    return float(report.K * min(report.p_values))


@dataclass
class ReplicateOutcome:
    rep: int
    global_p: dict  # method -> K * min p (unclipped)
    seconds: dict
    error: str | None = None


def run_replicate(
    sim: SimConfig,
    methods: Sequence[str],
    rep: int,
    seed: int,
    profit_cfg: ProfitConfig | None = None,
    B: int = 1000,
    use_true_basis: bool = False,
    zc_n_scale: bool = False,
) -> ReplicateOutcome:
    """One dataset, every requested method on shared projections."""
    try:
        ds = generate(replace(sim, seed=replicate_seed(seed, rep)))
        cfg = replace(profit_cfg or ProfitConfig(), seed=method_seed(seed, rep))
        basis = true_basis(ds.grid_s, sim) if use_true_basis else None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            clock = time.perf_counter()
            st = prepare(ds, cfg, basis)
            shared = time.perf_counter() - clock
            out, secs = {}, {}
            for m in methods:
                clock = time.perf_counter()
                if m == "PROFIT":
                    rep_ = run_profit(ds, cfg, state=st)
                else:
                    rep_ = run_zc(ds, cfg, m, B, state=st, n_scale=zc_n_scale)
                out[m] = _raw_global_p(rep_)
                secs[m] = shared + time.perf_counter() - clock
        return ReplicateOutcome(rep, out, secs)
    except Exception as exc:  # noqa: BLE001 - failures are counted, never fatal
        return ReplicateOutcome(rep, {}, {}, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}")


def _run_many(jobs: list[tuple], threads: int) -> list[ReplicateOutcome]:
    if threads <= 1:
        return [run_replicate(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(_star_replicate, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def _star_replicate(job):
    return run_replicate(*job)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("PROFIT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ExperimentResult:
    rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def rate(self, method: str, n: int, m_range, delta: float, alpha: float) -> dict:
        for r in self.rows:
            if (r["method"], r["n"], (r["m_lo"], r["m_hi"]), r["delta"], r["alpha"]) == (
                method, n, tuple(m_range), delta, alpha
            ):
                return r
        raise KeyError((method, n, m_range, delta, alpha))

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "failures": self.failures, "meta": self.meta}, indent=2, sort_keys=True)

    def save(self, path) -> None:
        """JSON when the suffix is ``.json``, otherwise CSV of the rows."""
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(self.to_json(), encoding="utf-8")
            return
        cols = ["method", "n", "m_lo", "m_hi", "delta", "alpha", "reps", "rejections", "rate", "se", "failures",
                "reference", "median_seconds"]
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def plot_data(self, alpha: float = 0.05) -> dict:
        """{method: {"n=..,m=lo:hi": [[delta, rate, se], ...]}} for power-curve plots."""
        out: dict = {}
        for r in self.rows:
            if r["alpha"] != alpha:
                continue
            key = f"n={r['n']},m={r['m_lo']}:{r['m_hi']}"
            out.setdefault(r["method"], {}).setdefault(key, []).append([r["delta"], r["rate"], r["se"]])
        for curves in out.values():
            for v in curves.values():
                v.sort()
        return out


def _tabulate(cells, methods, alphas, outcomes_per_cell, reps) -> tuple[list[dict], list[dict]]:
    rows, failures = [], []
    for sim, outcomes in zip(cells, outcomes_per_cell):
        lo, hi = sim.m_range
        for o in outcomes:
            if o.error:
                failures.append({"n": sim.n, "m_lo": lo, "m_hi": hi, "delta": sim.delta, "rep": o.rep, "error": o.error})
        for m in methods:
            ok = [o for o in outcomes if m in o.global_p]
            secs = [o.seconds[m] for o in ok]
            for a in alphas:
                rej = sum(rejects(o.global_p[m], a) for o in ok)
                cnt = len(ok)
                rate = rej / cnt if cnt else float("nan")
                se = float(np.sqrt(rate * (1 - rate) / cnt)) if cnt else float("nan")
                ref = REFERENCE_SIZE.get((m, sim.n, lo, hi), {}).get(a) if sim.delta == 0 else None
                rows.append({
                    "method": m, "n": sim.n, "m_lo": lo, "m_hi": hi, "delta": sim.delta, "alpha": a,
                    "reps": cnt, "rejections": rej, "rate": rate, "se": se, "failures": reps - cnt,
                    "reference": ref, "median_seconds": statistics.median(secs) if secs else None,
                })
    return rows, failures


def run_cells(
    cells: Sequence[SimConfig],
    methods: Sequence[str] = ("PROFIT",),
    reps: int = 400,
    seed: int = 0,
    alphas: Sequence[float] = (0.01, 0.05, 0.10, 0.15),
    profit_cfg: ProfitConfig | None = None,
    B: int = 1000,
    threads: int | None = None,
    use_true_basis: bool = False,
    zc_n_scale: bool = False,
    progress=None,
) -> ExperimentResult:
    for m in methods:
        if m not in ALL_METHODS:
            raise ValidationError(f"unknown method {m!r}; choose from {ALL_METHODS}")
    threads = default_threads() if threads is None else max(1, int(threads))
    outcomes_per_cell = []
    for sim in cells:
        jobs = [(sim, tuple(methods), r, seed, profit_cfg, B, use_true_basis, zc_n_scale) for r in range(reps)]
        outs = _run_many(jobs, threads)
        outcomes_per_cell.append(outs)
        if progress:
            progress(sim, outs)
    rows, failures = _tabulate(cells, methods, alphas, outcomes_per_cell, reps)
    meta = {
        "reps": reps, "seed": seed, "methods": list(methods), "alphas": list(alphas), "B": B,
        "use_true_basis": use_true_basis, "zc_n_scale": zc_n_scale,
        "profit_config": (profit_cfg or ProfitConfig()).to_dict(), "kernels": _kernels.active.name,
    }
    return ExperimentResult(rows, failures, meta)


def run_size_experiment(
    grid: Sequence[tuple[int, tuple[int, int]]],
    methods: Sequence[str] = ("PROFIT",),
    reps: int = 400,
    seed: int = 0,
    alphas: Sequence[float] = (0.01, 0.05, 0.10, 0.15),
    **kwargs,
) -> ExperimentResult:
    """Rejection rates under the null for each (n, m_range) cell; published values attached."""
    if reps < 100:
        raise ValidationError("size experiments need reps >= 100")
    cells = [SimConfig(n=n, m_range=tuple(m), delta=0.0) for n, m in grid]
    return run_cells(cells, methods, reps, seed, alphas, **kwargs)


def run_power_experiment(
    deltas: Sequence[float],
    grid: Sequence[tuple[int, tuple[int, int]]],
    methods: Sequence[str] = ALL_METHODS,
    reps: int = 300,
    seed: int = 0,
    alphas: Sequence[float] = (0.05,),
    **kwargs,
) -> ExperimentResult:
    """Power curves over ``deltas`` (which must include 0) for each (n, m_range) cell."""
    if 0 not in [float(d) for d in deltas]:
        raise ValidationError("delta grid must include 0")
    cells = [SimConfig(n=n, m_range=tuple(m), delta=float(d)) for n, m in grid for d in deltas]
    res = run_cells(cells, methods, reps, seed, alphas, **kwargs)
    res.meta["monotone"] = monotonicity(res)
    return res


def monotonicity(res: ExperimentResult, n_se: float = 2.0) -> dict:
    """Per method and cell: is power non-decreasing in delta up to ``n_se`` standard errors?"""
    out = {}
    for method, curves in res.plot_data(res.meta.get("alphas", [0.05])[0] if res.meta.get("alphas") else 0.05).items():
        for key, pts in curves.items():
            ok = True
            for (d0, r0, s0), (d1, r1, s1) in zip(pts, pts[1:]):
                if r1 < r0 - n_se * np.sqrt(s0**2 + s1**2):
                    ok = False
            out[f"{method}|{key}"] = ok
    return out


def hardware() -> dict:
    return {
        "platform": platform.platform(),
        "processor": platform.processor(),
        "python": platform.python_version(),
        "cpu_count": os.cpu_count(),
        "kernels": _kernels.active.name,
    }


def run_timing(
    sim: SimConfig | None = None,
    methods: Sequence[str] = ALL_METHODS,
    reps: int = 5,
    seed: int = 0,
    profit_cfg: ProfitConfig | None = None,
    B: int = 1000,
) -> dict:
    """Median wall-clock seconds per replicate, each method run from raw data."""
    if not methods:
        return {}
    if reps < 5:
        raise ValidationError("timing needs reps >= 5")
    sim = sim or SimConfig(n=200, m_range=(8, 12))
    # warm-up so compilation and caches are not charged to the first method
    warm = generate(replace(sim, n=20, seed=(seed, 10**6)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for m in methods:
            _time_method(m, warm, replace(profit_cfg or ProfitConfig(), n_sim=1000), 100)
    samples = {m: [] for m in methods}
    for r in range(reps):
        ds = generate(replace(sim, seed=replicate_seed(seed, r)))
        cfg = replace(profit_cfg or ProfitConfig(), seed=method_seed(seed, r))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for m in methods:
                samples[m].append(_time_method(m, ds, cfg, B))
    lo, hi = sim.m_range
    return {
        "median_seconds": {m: statistics.median(v) for m, v in samples.items()},
        "samples": samples,
        "reps": reps,
        "n": sim.n,
        "m_range": [lo, hi],
        "reference_seconds": REFERENCE_TIMING.get((lo, hi)) if sim.n == 200 else None,
        "hardware": hardware(),
    }


def _time_method(method: str, ds, cfg: ProfitConfig, B: int) -> float:
    clock = time.perf_counter()
    if method == "PROFIT":
        run_profit(ds, cfg)
    elif method in ("ZC-MC", "ZC-BT"):
        run_zc(ds, cfg, method, B)
    else:
        raise ValidationError(f"unknown method {method!r}")
    return time.perf_counter() - clock
