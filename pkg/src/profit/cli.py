"""Command-line front end.

Exit codes: 0 null retained, 3 null rejected, 10 unreadable input,
11 invalid input or configuration, 12 pipeline stage failure, 13 other errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import data as lfd
from . import plrt
from . import simstudy as ss
from . import smoothers as sm
from ._kernels import KERNEL_CODES
from .competitors import run_zc
from .errors import ProfitError, StageError, ValidationError
from .marginal_basis import eigen_basis, estimate_mean, raw_marginal_covariance, smooth_marginal_covariance
from .pipeline import ProfitConfig, run_profit

EXIT_RETAIN = 0
EXIT_REJECT = 3
EXIT_UNREADABLE = 10
EXIT_INVALID = 11
EXIT_STAGE = 12
EXIT_OTHER = 13

log = logging.getLogger("profit")
_DEF = ProfitConfig()
_SIM = ss.SimConfig()


def _m_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None
    if not 1 <= lo <= hi:
        raise argparse.ArgumentTypeError("need 1 <= lo <= hi")
    return lo, hi


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_profit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=_DEF.alpha, help="familywise level")
    p.add_argument("--pve", type=float, default=_DEF.pve_s, help="PVE threshold for the marginal basis")
    p.add_argument("--pve-t", type=float, default=_DEF.pve_t, help="PVE threshold for the projected covariance")
    p.add_argument("--nsim", type=int, default=_DEF.n_sim, help="null draws per direction")
    p.add_argument("--p", type=int, default=_DEF.p, help="polynomial degree of the trend model")
    p.add_argument("--weight-scheme", choices=("pooled", "per_subject"), default=_DEF.weight_scheme)
    p.add_argument("--covariate", action="append", default=[], help="covariate column to adjust for (repeatable)")
    p.add_argument("--k-max", type=int, default=_DEF.k_max, help="cap on the number of directions")
    p.add_argument("--mean-basis-t", type=int, default=_DEF.mean_basis_t)
    p.add_argument("--mean-basis-s", type=int, default=_DEF.mean_basis_s)
    p.add_argument("--bandwidth", type=float, default=_DEF.cov_bandwidth, help="covariance bandwidth (GCV when unset)")
    p.add_argument("--kernel", default=_DEF.kernel, choices=sorted(KERNEL_CODES))
    p.add_argument("--projected-cov-method", choices=("pspline", "kernel"), default=_DEF.projected_cov_method)


def _profit_config(args, seed: int) -> ProfitConfig:
    return ProfitConfig(
        pve_s=args.pve, pve_t=args.pve_t, alpha=args.alpha, p=args.p, n_sim=args.nsim, seed=seed,
        weight_scheme=args.weight_scheme, covariates=tuple(args.covariate), k_max=args.k_max,
        mean_basis_t=args.mean_basis_t, mean_basis_s=args.mean_basis_s, cov_bandwidth=args.bandwidth,
        kernel=args.kernel, projected_cov_method=args.projected_cov_method,
    )


def _load(args):
    opts = lfd.IngestOptions(covariates=list(args.covariate), rescale=not args.no_rescale)
    return lfd.load(args.input, opts)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text + "\n")


def _sim_grid(args) -> list[tuple[int, tuple[int, int]]]:
    return [(n, m) for m in args.m for n in args.n]


def cmd_test(args) -> int:
    ds = _load(args)
    cfg = _profit_config(args, args.seed)
    if args.method == "profit":
        report = run_profit(ds, cfg)
    else:
        report = run_zc(ds, cfg, args.method.upper(), args.B, n_scale=args.zc_n_scale)
    _emit(report.to_json(include_timings=args.timings), args.out)
    log.info("%s: K=%d global p=%.4g -> %s", report.method, report.K, report.global_p, report.decision)
    return EXIT_REJECT if report.reject else EXIT_RETAIN


def cmd_simulate(args) -> int:
    cfg = ss.SimConfig(n=args.n, m_range=args.m, delta=args.delta, R=args.R, seed=args.seed)
    ds = ss.generate(cfg)
    if args.out:
        if str(args.out).endswith(".json"):
            lfd.save_json(ds, args.out)
        else:
            lfd.save_csv(ds, args.out)
    else:
        sys.stdout.write(json.dumps(lfd.to_json_dict(ds)) + "\n")
    return EXIT_RETAIN


def _experiment_kwargs(args) -> dict:
    pcfg = replace(ProfitConfig(), n_sim=args.nsim)
    return {
        "profit_cfg": pcfg, "B": args.B, "threads": args.threads,
        "use_true_basis": args.use_true_basis, "zc_n_scale": args.zc_n_scale,
    }


def _report_experiment(res: ss.ExperimentResult, out) -> None:
    if out:
        res.save(out)
    cols = ("method", "n", "m_lo", "m_hi", "delta", "alpha", "reps", "rate", "se", "reference", "failures")
    lines = ["\t".join(cols)]
    for r in res.rows:
        lines.append("\t".join(_fmt(r[c]) for c in cols))
    sys.stdout.write("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


def cmd_size(args) -> int:
    res = ss.run_size_experiment(_sim_grid(args), args.methods, args.reps, args.seed, args.alpha, **_experiment_kwargs(args))
    _report_experiment(res, args.out)
    return EXIT_RETAIN


def cmd_power(args) -> int:
    res = ss.run_power_experiment(
        args.delta, _sim_grid(args), args.methods, args.reps, args.seed, args.alpha, **_experiment_kwargs(args)
    )
    _report_experiment(res, args.out)
    if args.plot_data:
        Path(args.plot_data).write_text(json.dumps(res.plot_data(args.alpha[0]), indent=2, sort_keys=True), encoding="utf-8")
    return EXIT_RETAIN


def cmd_timing(args) -> int:
    sim = ss.SimConfig(n=args.n, m_range=args.m)
    res = ss.run_timing(sim, args.methods, args.reps, args.seed, replace(ProfitConfig(), n_sim=args.nsim), args.B)
    _emit(json.dumps(res, indent=2, sort_keys=True), args.out)
    return EXIT_RETAIN


def cmd_null_dist(args) -> int:
    zeta = np.asarray(args.zeta, dtype=float)
    xi = np.asarray(args.xi if args.xi is not None else args.zeta, dtype=float)
    if zeta.size != xi.size:
        raise ValidationError("--zeta and --xi need the same length")
    if np.any(zeta < 0) or np.any(xi < 0):
        raise ValidationError("spectra must be nonnegative")
    spec = plrt.NullSpectrum(xi, zeta, args.p)
    sample = plrt.simulate_null(spec, args.nsim, seed=args.seed)
    if args.out:
        plrt.save_null_sample(args.out, sample)
    summary = {
        "n_sim": int(sample.size),
        "zero_mass": float(np.mean(sample <= 0)),
        "mean": float(sample.mean()),
        "quantiles": {str(q): float(np.quantile(sample, q)) for q in (0.5, 0.9, 0.95, 0.99)},
        "seed": args.seed,
    }
    sys.stdout.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_RETAIN


def cmd_basis(args) -> int:
    ds = _load(args)
    cov = list(args.covariate) or None
    mean = estimate_mean(ds, sm.SplineConfig(args.mean_basis_t), sm.SplineConfig(args.mean_basis_s), cov)
    raw = raw_marginal_covariance(ds, mean, args.weight_scheme)
    smoothed = smooth_marginal_covariance(raw, sm.KernelConfig(args.kernel), args.bandwidth)
    basis = eigen_basis(smoothed, args.pve)
    if args.out:
        basis.save(args.out)
    else:
        sys.stdout.write(json.dumps(basis.to_json_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_RETAIN


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="profit", description="Projection-based test for time-varying mean of longitudinal functional data.", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more detail")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("test", help="run the test on a dataset", formatter_class=fmt)
    p.add_argument("--input", required=True, help="long-format CSV or JSON dataset")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--seed", type=int, default=_DEF.seed)
    p.add_argument("--method", choices=("profit", "zc-mc", "zc-bt"), default="profit")
    p.add_argument("--B", type=int, default=1000, help="bootstrap resamples for zc-bt")
    p.add_argument("--zc-n-scale", action="store_true", help="divide the zc-mc mixture by n")
    p.add_argument("--timings", action="store_true", help="include stage timings in the report")
    p.add_argument("--no-rescale", action="store_true", help="keep t and s on their original scales")
    _add_profit_flags(p)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("simulate", help="draw one synthetic dataset", formatter_class=fmt)
    p.add_argument("--n", type=int, default=_SIM.n)
    p.add_argument("--m", type=_m_range, default=_SIM.m_range, help="visit count range lo:hi")
    p.add_argument("--delta", type=float, default=_SIM.delta)
    p.add_argument("--R", type=int, default=_SIM.R)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="CSV (or .json) path; JSON on stdout when unset")
    p.set_defaults(func=cmd_simulate)

    for name, func, alphas in (("size", cmd_size, "0.01,0.05,0.1,0.15"), ("power", cmd_power, "0.05")):
        p = sub.add_parser(name, help=f"{name} experiment on the synthetic generator", formatter_class=fmt)
        p.add_argument("--n", type=int, nargs="+", default=[200])
        p.add_argument("--m", type=_m_range, nargs="+", default=[(8, 12)])
        p.add_argument("--alpha", type=_floats, default=alphas, help="comma-separated levels")
        p.add_argument("--reps", type=int, default=400 if name == "size" else 300)
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--methods", nargs="+", choices=ss.ALL_METHODS, default=["PROFIT"] if name == "size" else list(ss.ALL_METHODS))
        p.add_argument("--nsim", type=int, default=_DEF.n_sim)
        p.add_argument("--B", type=int, default=1000)
        p.add_argument("--threads", type=int, default=None, help="worker processes (PROFIT_THREADS when unset)")
        p.add_argument("--use-true-basis", action="store_true", help="project on the known eigenfunctions")
        p.add_argument("--zc-n-scale", action="store_true")
        p.add_argument("--out", help="CSV or .json results")
        if name == "power":
            p.add_argument("--delta", type=_floats, default="0,0.5,1,1.5", help="comma-separated effect sizes")
            p.add_argument("--plot-data", help="write delta-vs-power curves as JSON")
        p.set_defaults(func=func)

    p = sub.add_parser("timing", help="median seconds per replicate", formatter_class=fmt)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--m", type=_m_range, default=(8, 12))
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--methods", nargs="*", choices=ss.ALL_METHODS, default=list(ss.ALL_METHODS))
    p.add_argument("--nsim", type=int, default=_DEF.n_sim)
    p.add_argument("--B", type=int, default=1000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("null-dist", help="simulate the pLRT null distribution", formatter_class=fmt)
    p.add_argument("--zeta", type=_floats, required=True, help="comma-separated zeta spectrum")
    p.add_argument("--xi", type=_floats, default=None, help="comma-separated xi spectrum (defaults to zeta)")
    p.add_argument("--p", type=int, default=1, help="number of tested fixed effects")
    p.add_argument("--nsim", type=int, default=_DEF.n_sim)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help=".npy or CSV sample")
    p.set_defaults(func=cmd_null_dist)

    p = sub.add_parser("basis", help="estimate and dump the marginal eigenbasis", formatter_class=fmt)
    p.add_argument("--input", required=True)
    p.add_argument("--out", help=".json or CSV; JSON on stdout when unset")
    p.add_argument("--pve", type=float, default=_DEF.pve_s)
    p.add_argument("--covariate", action="append", default=[])
    p.add_argument("--weight-scheme", choices=("pooled", "per_subject"), default=_DEF.weight_scheme)
    p.add_argument("--mean-basis-t", type=int, default=_DEF.mean_basis_t)
    p.add_argument("--mean-basis-s", type=int, default=_DEF.mean_basis_s)
    p.add_argument("--bandwidth", type=float, default=_DEF.cov_bandwidth)
    p.add_argument("--kernel", default=_DEF.kernel, choices=sorted(KERNEL_CODES))
    p.add_argument("--no-rescale", action="store_true")
    p.set_defaults(func=cmd_basis)
    for sp in [parser, *sub.choices.values()]:
        _fill_help(sp)
    return parser


def _fill_help(parser: argparse.ArgumentParser) -> None:
    # the defaults formatter only prints "(default: ...)" for flags that carry help text
    for action in parser._actions:
        if action.help is None:
            action.help = action.dest.replace("_", " ")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)], format="%(levelname)s %(message)s")
    if args.verbose == 0:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        msg = str(exc)
        print(msg if msg.startswith("cannot read") else f"cannot read: {msg}", file=sys.stderr)
        return EXIT_UNREADABLE
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except (ValidationError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ProfitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
