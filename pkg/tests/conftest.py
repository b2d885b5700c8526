import os

import numpy as np
import pytest

from profit import simstudy as ss
from profit.data import from_arrays

# keep hypothesis quick and reproducible in CI
try:
    from hypothesis import HealthCheck, settings

    settings.register_profile("ci", max_examples=40, deadline=None, derandomize=True,
                              suppress_health_check=[HealthCheck.too_slow])
    settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))
except ImportError:  # pragma: no cover
    pass


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def sim_small():
    """Null generator draw, n=60, m 8..12."""
    return ss.generate(ss.SimConfig(n=60, m_range=(8, 12), seed=11))


@pytest.fixture(scope="session")
def sim_dense():
    """Null generator draw, n=300, m 15..20 (used by oracle checks on the covariance)."""
    return ss.generate(ss.SimConfig(n=300, m_range=(15, 20), seed=5))


def make_dataset(mean_fn, n=20, m=(3, 6), R=21, seed=0, noise=0.0, covariates=None):
    """Small dataset with curves mean_fn(s, t) plus optional white noise."""
    g = np.random.default_rng(seed)
    s = np.linspace(0, 1, R)
    times, curves = [], []
    for _ in range(n):
        k = int(g.integers(m[0], m[1] + 1))
        t = np.sort(g.uniform(0, 1, k))
        y = mean_fn(s[None, :], t[:, None]) + noise * g.standard_normal((k, R))
        times.append(t)
        curves.append(y)
    return from_arrays(times, curves, s, covariates=covariates)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
