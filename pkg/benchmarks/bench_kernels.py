"""Compare the numba and pure-numpy kernel paths on realistic problem sizes.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is run once to trigger compilation, then timed ``repeat`` times;
the best time is reported together with the max abs difference between paths.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from profit import _kernels


def _cases(rng):
    # null simulation: 1000 draws, Q=25 knots, 201 lambda values
    Q, G = 25, 201
    z = np.sort(rng.gamma(2.0, size=Q))[::-1]
    lam = np.concatenate([[0.0], np.geomspace(1e-5, 1e8, G - 1) / z.mean()])
    a_mat = np.ascontiguousarray(lam[:, None] * z / (1 + lam[:, None] * z))
    logdet = np.log1p(lam[:, None] * z).sum(1)
    theta = rng.standard_normal((1000, Q)) ** 2

    def profile_sup(impl):
        val = np.empty(theta.shape[0])
        idx = np.empty(theta.shape[0], dtype=np.int64)
        impl.profile_sup(theta, a_mat, logdet, val, idx)
        return val

    # local-plane moments: 2000 pair products evaluated on a 31x31 grid
    x1, x2, y = rng.uniform(size=2000), rng.uniform(size=2000), rng.standard_normal(2000)
    w = np.ones(2000)
    g = np.linspace(0, 1, 31)
    e1, e2 = (a.ravel() for a in np.meshgrid(g, g, indexing="ij"))

    def ll2_moments(impl):
        return impl.ll2_moments(x1, x2, y, w, e1, e2, 0.15, 0.15, 0)

    # within-subject pair products: 200 subjects with 8..12 visits
    m = rng.integers(8, 13, size=200)
    bounds = np.concatenate([[0], np.cumsum(m)]).astype(np.int64)
    resid = rng.standard_normal(bounds[-1])
    times = rng.uniform(size=bounds[-1])

    def pair_products(impl):
        return np.concatenate(impl.pair_products(resid, times, bounds))

    # bootstrap sufficient statistics: 1000 resamples of 200 subjects, 10 basis functions
    nb = 10
    sub_gram = rng.standard_normal((200, nb, nb))
    sub_cross, sub_yy = rng.standard_normal((200, nb)), rng.standard_normal(200)
    sub_sum, sub_count = rng.standard_normal(200), m.astype(float)
    draws = rng.integers(0, 200, size=(1000, 200))

    def bootstrap_gram(impl):
        out = impl.bootstrap_gram(sub_gram, sub_cross, sub_yy, sub_sum, sub_count, draws)
        return np.concatenate([np.ravel(o) for o in out])

    return {"profile_sup": profile_sup, "ll2_moments": ll2_moments,
            "pair_products": pair_products, "bootstrap_gram": bootstrap_gram}


def _best(fn, impl, repeat):
    fn(impl)  # warm-up / compilation
    best = np.inf
    for _ in range(repeat):
        clock = time.perf_counter()
        fn(impl)
        best = min(best, time.perf_counter() - clock)
    return best


def run(repeat: int = 5, seed: int = 0) -> list[dict]:
    if _kernels.numba_impl is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rows = []
    for name, fn in _cases(np.random.default_rng(seed)).items():
        t_np = _best(fn, _kernels.numpy_impl, repeat)
        t_nb = _best(fn, _kernels.numba_impl, repeat)
        diff = float(np.max(np.abs(fn(_kernels.numpy_impl) - fn(_kernels.numba_impl))))
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb, "max_abs_diff": diff})
    return rows


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the rows here")
    args = ap.parse_args(argv)
    rows = run(args.repeat, args.seed)
    print(f"{'kernel':<16}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}{'max diff':>12}")
    for r in rows:
        print(f"{r['kernel']:<16}{r['numpy_s']:>12.5f}{r['numba_s']:>12.5f}{r['speedup']:>10.1f}{r['max_abs_diff']:>12.2e}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
