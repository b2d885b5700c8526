"""Data model for longitudinal functional data: containers, validation and file I/O.

A dataset holds, for every subject, a handful of visit times and one curve per
visit, all curves sampled on one shared, equally spaced grid.  Both the curve
argument ``s`` and the visit time ``t`` live on ``[0, 1]`` internally; the
affine maps back to the original units are kept in ``metadata``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import StructuralError, ValidationError

SPACING_RTOL = 1e-8
DATASET_FORMAT = "profit-dataset/1"


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    times: np.ndarray
    curves: np.ndarray
    covariates: dict[str, float] | None = None

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        curves = np.atleast_2d(np.asarray(self.curves, dtype=float))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "curves", curves)
        if self.covariates is not None:
            object.__setattr__(
                self, "covariates", {str(k): float(v) for k, v in self.covariates.items()}
            )

    @property
    def m(self) -> int:
        return int(self.times.shape[0])


@dataclass(frozen=True)
class Violation:
    invariant: str
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.invariant} at {self.location}: {self.message}"


@dataclass(frozen=True)
class LongitudinalFunctionalDataset:
    """Subjects x visits x curves on a shared grid.

    Construction does not raise on bad content so that :func:`validate` can
    report every problem at once; call :meth:`check` to fail fast instead.
    """

    grid_s: np.ndarray
    subjects: tuple[SubjectRecord, ...]
    domain_t: tuple[float, float] = (0.0, 1.0)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "grid_s", np.asarray(self.grid_s, dtype=float))
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "domain_t", (float(self.domain_t[0]), float(self.domain_t[1])))

    # -- shape helpers -------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def R(self) -> int:
        return int(self.grid_s.shape[0])

    @property
    def m(self) -> np.ndarray:
        return np.array([s.m for s in self.subjects], dtype=int)

    @property
    def N(self) -> int:
        return int(self.m.sum())

    @property
    def times(self) -> np.ndarray:
        """All visit times stacked subject-major, visit-minor."""
        return np.concatenate([s.times for s in self.subjects])

    @property
    def curves(self) -> np.ndarray:
        """N x R matrix of curves stacked like :attr:`times`."""
        return np.vstack([s.curves for s in self.subjects])

    @property
    def subject_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.m)

    @property
    def covariate_names(self) -> list[str]:
        first = self.subjects[0].covariates if self.subjects else None
        return sorted(first) if first else []

    def covariate_matrix(self, names: Sequence[str]) -> np.ndarray:
        """n x len(names) matrix of subject-level covariates."""
        out = np.empty((self.n, len(names)))
        for i, subj in enumerate(self.subjects):
            for c, name in enumerate(names):
                if not subj.covariates or name not in subj.covariates:
                    raise ValidationError(f"subject {subj.id!r} lacks covariate {name!r}")
                out[i, c] = subj.covariates[name]
        return out

    def with_curves(self, curves: np.ndarray) -> "LongitudinalFunctionalDataset":
        """Copy of the dataset with the stacked N x R curve matrix replaced."""
        curves = np.asarray(curves, dtype=float)
        bounds = np.concatenate([[0], np.cumsum(self.m)])
        subjects = tuple(
            SubjectRecord(s.id, s.times, curves[bounds[i]: bounds[i + 1]], s.covariates)
            for i, s in enumerate(self.subjects)
        )
        return LongitudinalFunctionalDataset(self.grid_s, subjects, self.domain_t, dict(self.metadata))

    def check(self) -> "LongitudinalFunctionalDataset":
        problems = validate(self)
        if problems:
            head = "; ".join(str(p) for p in problems[:5])
            more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
            raise ValidationError(f"invalid dataset: {head}{more}")
        return self


def validate(ds: LongitudinalFunctionalDataset) -> list[Violation]:
    """Return every violated dataset invariant; an empty list means valid."""
    out: list[Violation] = []
    g = ds.grid_s
    if g.ndim != 1 or g.shape[0] < 4:
        out.append(Violation("grid_size", "grid_s", f"need R >= 4 grid points, got {g.size}"))
    elif not np.all(np.isfinite(g)):
        out.append(Violation("grid_finite", "grid_s", "grid contains non-finite values"))
    else:
        d = np.diff(g)
        if np.any(d <= 0):
            r = int(np.argmax(d <= 0))
            out.append(Violation("grid_increasing", f"grid_s[{r + 1}]", "grid not strictly increasing"))
        else:
            dev = np.abs(d - d.mean()).max()
            if dev > SPACING_RTOL * d.mean():
                out.append(
                    Violation(
                        "grid_equal_spacing",
                        "grid_s",
                        f"grid spacing varies by {dev:.3g}; interpolate curves to an equally spaced grid first",
                    )
                )
    lo, hi = ds.domain_t
    cov_names = None
    for i, subj in enumerate(ds.subjects):
        loc = f"subject {subj.id!r} (index {i})"
        if subj.m < 1:
            out.append(Violation("visits", loc, "subject has no visits"))
            continue
        if subj.times.ndim != 1:
            out.append(Violation("times_shape", loc, "times must be a vector"))
            continue
        if np.any(np.diff(subj.times) < 0):
            out.append(Violation("times_sorted", loc, "visit times not ascending"))
        if not np.all(np.isfinite(subj.times)):
            out.append(Violation("times_finite", loc, "non-finite visit time"))
        elif np.any(subj.times < lo) or np.any(subj.times > hi):
            out.append(Violation("times_domain", loc, f"visit time outside [{lo}, {hi}]"))
        if subj.curves.shape != (subj.m, g.shape[0]):
            out.append(
                Violation("curve_shape", loc, f"curves shape {subj.curves.shape} != ({subj.m}, {g.shape[0]})")
            )
        else:
            bad = np.argwhere(~np.isfinite(subj.curves))
            for j, r in bad[:10]:
                out.append(Violation("curve_finite", f"{loc}, visit {j + 1}, grid {r + 1}", "non-finite value"))
        names = frozenset(subj.covariates) if subj.covariates else frozenset()
        if cov_names is None:
            cov_names = names
        elif names != cov_names:
            out.append(Violation("covariate_names", loc, "covariate names differ across subjects"))
    if sum(s.m for s in ds.subjects) < 2:
        out.append(Violation("total_visits", "dataset", "need N = sum m_i >= 2 curves"))
    return out


# -- bivariate surfaces --------------------------------------------------

def _bracket(grid: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower index and interpolation fraction of clamped ``x`` within ``grid``."""
    if grid.size == 1:
        return np.zeros(x.shape, dtype=int), np.zeros(x.shape)
    x = np.clip(x, grid[0], grid[-1])
    idx = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, grid.size - 2)
    frac = (x - grid[idx]) / (grid[idx + 1] - grid[idx])
    return idx, frac


@dataclass(frozen=True)
class BivariateSurface:
    """Function of (s, t) sampled on a grid; evaluated bilinearly, clamped at the edges."""

    grid_s: np.ndarray
    grid_t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        gs = np.atleast_1d(np.asarray(self.grid_s, dtype=float))
        gt = np.atleast_1d(np.asarray(self.grid_t, dtype=float))
        v = np.asarray(self.values, dtype=float).reshape(gs.size, gt.size)
        for g, name in ((gs, "grid_s"), (gt, "grid_t")):
            if g.size > 1 and np.any(np.diff(g) <= 0):
                raise ValidationError(f"{name} must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValidationError("surface values must be finite")
        object.__setattr__(self, "grid_s", gs)
        object.__setattr__(self, "grid_t", gt)
        object.__setattr__(self, "values", v)

    def __call__(self, s, t) -> np.ndarray:
        s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
        i, a = _bracket(self.grid_s, s)
        j, b = _bracket(self.grid_t, t)
        v = self.values
        i1 = np.minimum(i + 1, self.grid_s.size - 1)
        j1 = np.minimum(j + 1, self.grid_t.size - 1)
        return (
            (1 - a) * (1 - b) * v[i, j]
            + a * (1 - b) * v[i1, j]
            + (1 - a) * b * v[i, j1]
            + a * b * v[i1, j1]
        )


# -- CSV / JSON ----------------------------------------------------------

REQUIRED_COLUMNS = ("subject_id", "t", "s", "y")


@dataclass
class IngestOptions:
    covariates: Sequence[str] | None = None  # None keeps every extra column
    rescale: bool = True


def _affine(values: np.ndarray) -> tuple[float, float]:
    lo, hi = float(values.min()), float(values.max())
    scale = hi - lo
    return lo, (scale if scale > 0 else 1.0)


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_csv(path, config: IngestOptions | None = None) -> LongitudinalFunctionalDataset:
    """Read long-format CSV (``subject_id,t,s,y`` plus optional covariates)."""
    config = config or IngestOptions()
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise StructuralError(f"{path} is empty") from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise StructuralError(f"{path} lacks required columns {missing}")
        col = {name: header.index(name) for name in header}
        extra = [h for h in header if h not in REQUIRED_COLUMNS]
        cov_cols = list(extra if config.covariates is None else config.covariates)
        for c in cov_cols:
            if c not in col:
                raise StructuralError(f"covariate column {c!r} not in {path}")
        rows: dict[str, dict[float, dict[float, float]]] = {}
        covs: dict[str, dict[str, float]] = {}
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            sid = row[col["subject_id"]].strip()
            try:
                t = float(row[col["t"]])
                s = float(row[col["s"]])
                y = float(row[col["y"]])
            except (ValueError, IndexError) as exc:
                raise ValidationError(f"row {rowno}: cannot parse numeric fields ({exc})") from None
            if not (math.isfinite(t) and math.isfinite(s)):
                raise ValidationError(f"row {rowno}: non-finite t or s")
            if not math.isfinite(y):
                raise ValidationError(f"row {rowno}: non-finite y value")
            per_t = rows.setdefault(sid, {}).setdefault(t, {})
            if s in per_t:
                raise ValidationError(f"row {rowno}: duplicate (subject={sid}, t={t!r}, s={s!r})")
            per_t[s] = y
            if cov_cols:
                vals = {c: float(row[col[c]]) for c in cov_cols}
                prev = covs.setdefault(sid, vals)
                if prev != vals:
                    raise ValidationError(f"row {rowno}: covariates vary within subject {sid!r}")
    if not rows:
        raise StructuralError(f"{path} contains no data rows")

    grid = None
    ref = None
    for sid, visits in rows.items():
        for t, curve in visits.items():
            svals = sorted(curve)
            if grid is None:
                grid, ref = svals, (sid, t)
            elif svals != grid:
                raise StructuralError(
                    f"ragged grid: subject {sid!r} at t={t!r} has a different s-grid than subject "
                    f"{ref[0]!r} at t={ref[1]!r}"
                )
    grid_raw = np.array(grid)
    all_t = np.array([t for v in rows.values() for t in v])
    meta: dict[str, Any] = {"source": str(path), "source_sha256": _file_hash(path)}
    if config.rescale:
        s0, s_scale = _affine(grid_raw)
        t0, t_scale = _affine(all_t)
    else:
        s0, s_scale, t0, t_scale = 0.0, 1.0, 0.0, 1.0
    meta["rescale"] = {"s_offset": s0, "s_scale": s_scale, "t_offset": t0, "t_scale": t_scale}
    subjects = []
    for sid, visits in rows.items():
        ts = sorted(visits)
        curves = np.array([[visits[t][s] for s in grid] for t in ts])
        times = (np.array(ts) - t0) / t_scale
        subjects.append(SubjectRecord(sid, times, curves, covs.get(sid) if cov_cols else None))
    domain = (0.0, 1.0) if config.rescale else (float(all_t.min()), float(all_t.max()))
    ds = LongitudinalFunctionalDataset((grid_raw - s0) / s_scale, tuple(subjects), domain, meta)
    return ds.check()


def save_csv(ds: LongitudinalFunctionalDataset, path) -> None:
    """Write long-format CSV with round-trip float formatting."""
    names = ds.covariate_names
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(REQUIRED_COLUMNS) + names)
        for subj in ds.subjects:
            extra = [repr(subj.covariates[c]) for c in names]
            for j, t in enumerate(subj.times):
                for r, s in enumerate(ds.grid_s):
                    w.writerow([subj.id, repr(float(t)), repr(float(s)), repr(float(subj.curves[j, r]))] + extra)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def to_json_dict(ds: LongitudinalFunctionalDataset) -> dict:
    return {
        "format": DATASET_FORMAT,
        "grid_s": ds.grid_s.tolist(),
        "domain_t": list(ds.domain_t),
        "metadata": _jsonable(ds.metadata),
        "subjects": [
            {
                "id": s.id,
                "times": s.times.tolist(),
                "curves": s.curves.tolist(),
                "covariates": s.covariates,
            }
            for s in ds.subjects
        ],
    }


def from_json_dict(doc: dict) -> LongitudinalFunctionalDataset:
    if doc.get("format") != DATASET_FORMAT:
        raise StructuralError(f"unsupported dataset format {doc.get('format')!r}")
    subjects = tuple(
        SubjectRecord(s["id"], np.array(s["times"], dtype=float), np.array(s["curves"], dtype=float), s.get("covariates"))
        for s in doc["subjects"]
    )
    return LongitudinalFunctionalDataset(
        np.array(doc["grid_s"], dtype=float), subjects, tuple(doc["domain_t"]), doc.get("metadata", {})
    )


def save_json(ds: LongitudinalFunctionalDataset, path) -> None:
    Path(path).write_text(json.dumps(to_json_dict(ds)), encoding="utf-8")


def load_json(path) -> LongitudinalFunctionalDataset:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc}") from exc
    return from_json_dict(doc).check()


def load(path, config: IngestOptions | None = None) -> LongitudinalFunctionalDataset:
    """Dispatch on suffix: ``.json`` containers or long-format CSV."""
    if str(path).endswith(".json"):
        return load_json(path)
    return load_csv(path, config)


def from_arrays(
    times: Iterable[np.ndarray],
    curves: Iterable[np.ndarray],
    grid_s: np.ndarray,
    ids: Sequence[str] | None = None,
    covariates: Sequence[dict[str, float]] | None = None,
    metadata: dict | None = None,
) -> LongitudinalFunctionalDataset:
    """Build a dataset from per-subject arrays, sorting visits by time."""
    subjects = []
    for i, (t, y) in enumerate(zip(times, curves)):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        order = np.argsort(t, kind="stable")
        sid = ids[i] if ids is not None else f"S{i + 1:04d}"
        cov = covariates[i] if covariates is not None else None
        subjects.append(SubjectRecord(sid, t[order], y[order], cov))
    return LongitudinalFunctionalDataset(grid_s, tuple(subjects), (0.0, 1.0), dict(metadata or {}))
