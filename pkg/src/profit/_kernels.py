"""Hot inner loops, each with a numba version and a pure-numpy twin.

The numba path is used when numba imports and ``PROFIT_USE_NUMBA`` is not set
to ``0``/``false``/``no``.  Both twins are importable directly
(``numpy_impl`` / ``numba_impl``) so tests and benchmarks can compare them.
"""

from __future__ import annotations

import os
import types

import numpy as np

KERNEL_CODES = {"epanechnikov": 0, "biweight": 1, "triweight": 2, "uniform": 3, "triangular": 4}


def _flag_enabled() -> bool:
    return os.environ.get("PROFIT_USE_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# numpy twins
# ---------------------------------------------------------------------------

def _kernel_np(u: np.ndarray, code: int) -> np.ndarray:
    a = np.abs(u)
    inside = a <= 1.0
    if code == 0:
        k = 0.75 * (1.0 - u * u)
    elif code == 1:
        k = (15.0 / 16.0) * (1.0 - u * u) ** 2
    elif code == 2:
        k = (35.0 / 32.0) * (1.0 - u * u) ** 3
    elif code == 3:
        k = np.full_like(u, 0.5)
    elif code == 4:
        k = 1.0 - a
    else:
        raise ValueError(f"unknown kernel code {code}")
    return np.where(inside, k, 0.0)


def _profile_sup_np(theta, a_mat, logdet, out_val, out_idx):
    # theta: (n_draws, Q), a_mat: (G, Q), logdet: (G,)
    chunk = 8192
    for start in range(0, theta.shape[0], chunk):
        crit = theta[start:start + chunk] @ a_mat.T - logdet
        idx = np.argmax(crit, axis=1)
        out_idx[start:start + chunk] = idx
        out_val[start:start + chunk] = crit[np.arange(idx.size), idx]


def _ll2_moments_np(x1, x2, y, w, e1, e2, h1, h2, code):
    """Scaled local-plane moments at each evaluation point.

    Returns (E, 9) columns V00 V10 V01 V20 V02 V11 R00 R10 R01.
    """
    out = np.empty((e1.size, 9))
    chunk = max(1, 2_000_000 // max(x1.size, 1))
    for start in range(0, e1.size, chunk):
        u = (x1[None, :] - e1[start:start + chunk, None]) / h1
        v = (x2[None, :] - e2[start:start + chunk, None]) / h2
        k = _kernel_np(u, code) * _kernel_np(v, code) * w[None, :] / (h1 * h2)
        ku, kv = k * u, k * v
        out[start:start + chunk] = np.column_stack(
            [
                k.sum(1), ku.sum(1), kv.sum(1),
                (ku * u).sum(1), (kv * v).sum(1), (ku * v).sum(1),
                k @ y, ku @ y, kv @ y,
            ]
        )
    return out


def _pair_products_np(resid, times, bounds):
    counts = np.diff(bounds)
    n_pairs = int(np.sum(counts * (counts - 1)))
    t1 = np.empty(n_pairs)
    t2 = np.empty(n_pairs)
    prod = np.empty(n_pairs)
    pos = 0
    for i in range(counts.size):
        m = counts[i]
        if m < 2:
            continue
        e = resid[bounds[i]: bounds[i + 1]]
        t = times[bounds[i]: bounds[i + 1]]
        jj, kk = np.nonzero(~np.eye(m, dtype=bool))
        c = jj.size
        t1[pos:pos + c] = t[jj]
        t2[pos:pos + c] = t[kk]
        prod[pos:pos + c] = e[jj] * e[kk]
        pos += c
    return t1, t2, prod


def _bootstrap_gram_np(sub_gram, sub_cross, sub_yy, sub_sum, sub_count, draws):
    # draws: (B, n) subject indices; returns per-bootstrap sums of sufficient statistics.
    B, nb = draws.shape[0], sub_gram.shape[1]
    gram = np.empty((B, nb, nb))
    cross = np.empty((B, nb))
    yy = np.empty(B)
    tot = np.empty(B)
    cnt = np.empty(B)
    n = sub_gram.shape[0]
    for b in range(B):
        c = np.bincount(draws[b], minlength=n).astype(float)
        gram[b] = np.tensordot(c, sub_gram, axes=1)
        cross[b] = c @ sub_cross
        yy[b] = c @ sub_yy
        tot[b] = c @ sub_sum
        cnt[b] = c @ sub_count
    return gram, cross, yy, tot, cnt


numpy_impl = types.SimpleNamespace(
    profile_sup=_profile_sup_np,
    ll2_moments=_ll2_moments_np,
    pair_products=_pair_products_np,
    bootstrap_gram=_bootstrap_gram_np,
    name="numpy",
)


# ---------------------------------------------------------------------------
# numba versions
# ---------------------------------------------------------------------------

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def kern(u, code):
        a = abs(u)
        if a > 1.0:
            return 0.0
        if code == 0:
            return 0.75 * (1.0 - u * u)
        if code == 1:
            return (15.0 / 16.0) * (1.0 - u * u) ** 2
        if code == 2:
            return (35.0 / 32.0) * (1.0 - u * u) ** 3
        if code == 3:
            return 0.5
        return 1.0 - a

    @njit(cache=True)
    def profile_sup(theta, a_mat, logdet, out_val, out_idx):
        n, q = theta.shape
        g = a_mat.shape[0]
        for d in range(n):
            best = -np.inf
            bi = 0
            for l in range(g):
                acc = -logdet[l]
                for j in range(q):
                    acc += theta[d, j] * a_mat[l, j]
                if acc > best:
                    best = acc
                    bi = l
            out_val[d] = best
            out_idx[d] = bi

    @njit(cache=True)
    def ll2_moments(x1, x2, y, w, e1, e2, h1, h2, code):
        out = np.zeros((e1.size, 9))
        for e in range(e1.size):
            for p in range(x1.size):
                u = (x1[p] - e1[e]) / h1
                if u > 1.0 or u < -1.0:
                    continue
                v = (x2[p] - e2[e]) / h2
                if v > 1.0 or v < -1.0:
                    continue
                k = kern(u, code) * kern(v, code) * w[p] / (h1 * h2)
                if k == 0.0:
                    continue
                ku = k * u
                kv = k * v
                out[e, 0] += k
                out[e, 1] += ku
                out[e, 2] += kv
                out[e, 3] += ku * u
                out[e, 4] += kv * v
                out[e, 5] += ku * v
                out[e, 6] += k * y[p]
                out[e, 7] += ku * y[p]
                out[e, 8] += kv * y[p]
        return out

    @njit(cache=True)
    def pair_products(resid, times, bounds):
        n_sub = bounds.size - 1
        total = 0
        for i in range(n_sub):
            m = bounds[i + 1] - bounds[i]
            total += m * (m - 1)
        t1 = np.empty(total)
        t2 = np.empty(total)
        prod = np.empty(total)
        pos = 0
        for i in range(n_sub):
            lo = bounds[i]
            hi = bounds[i + 1]
            for j in range(lo, hi):
                for k in range(lo, hi):
                    if j == k:
                        continue
                    t1[pos] = times[j]
                    t2[pos] = times[k]
                    prod[pos] = resid[j] * resid[k]
                    pos += 1
        return t1, t2, prod

    @njit(cache=True)
    def bootstrap_gram(sub_gram, sub_cross, sub_yy, sub_sum, sub_count, draws):
        B, n = draws.shape
        nb = sub_gram.shape[1]
        gram = np.zeros((B, nb, nb))
        cross = np.zeros((B, nb))
        yy = np.zeros(B)
        tot = np.zeros(B)
        cnt = np.zeros(B)
        for b in range(B):
            for r in range(n):
                i = draws[b, r]
                for a in range(nb):
                    cross[b, a] += sub_cross[i, a]
                    for c in range(nb):
                        gram[b, a, c] += sub_gram[i, a, c]
                yy[b] += sub_yy[i]
                tot[b] += sub_sum[i]
                cnt[b] += sub_count[i]
        return gram, cross, yy, tot, cnt

    return types.SimpleNamespace(
        profile_sup=profile_sup,
        ll2_moments=ll2_moments,
        pair_products=pair_products,
        bootstrap_gram=bootstrap_gram,
        name="numba",
    )


try:
    numba_impl = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

active = numba_impl if (numba_impl is not None and _flag_enabled()) else numpy_impl


def kernel_code(name: str) -> int:
    try:
        return KERNEL_CODES[name]
    except KeyError:
        raise ValueError(f"unknown kernel {name!r}; choose from {sorted(KERNEL_CODES)}") from None


def kernel_values(u, name: str = "epanechnikov") -> np.ndarray:
    return _kernel_np(np.asarray(u, dtype=float), kernel_code(name))
