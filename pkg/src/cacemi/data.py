"""Two-arm trial data with one-way noncompliance.

A :class:`Dataset` is column-oriented: one numpy array per variable, with
missing outcomes as ``NaN`` and latent compliance classes as ``NaN`` in
``c``. Arrays are made read-only on construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError

CONTINUOUS = "continuous"
BINARY = "binary"
OUTCOME_KINDS = (CONTINUOUS, BINARY)
COMPLIER = 1
NEVER_TAKER = 0
NA_TOKENS = ("", "NA")


@dataclass(frozen=True)
class TrialRecord:
    """One participant. ``y`` and ``c`` are ``None`` when missing/latent."""

    id: int
    z: int
    d: int
    y: float | None
    x: dict[str, float] = field(default_factory=dict)
    c: int | None = None


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    ids: np.ndarray
    z: np.ndarray
    d: np.ndarray
    y: np.ndarray
    x: np.ndarray
    covariate_names: tuple[str, ...]
    outcome_kind: str
    c: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.z)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(n, -1) if n else x.reshape(0, len(self.covariate_names))
        c = np.full(n, np.nan) if self.c is None else self.c
        object.__setattr__(self, "ids", _readonly(self.ids, np.int64))
        object.__setattr__(self, "z", _readonly(self.z, np.int8))
        object.__setattr__(self, "d", _readonly(self.d, np.int8))
        object.__setattr__(self, "y", _readonly(self.y, float))
        object.__setattr__(self, "x", _readonly(x, float))
        object.__setattr__(self, "c", _readonly(c, float))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        self._validate()

    def _validate(self):
        n = len(self.z)
        if self.outcome_kind not in OUTCOME_KINDS:
            raise DataError(f"unknown outcome kind {self.outcome_kind!r}")
        for name in ("ids", "d", "y", "c"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if self.x.shape != (n, len(self.covariate_names)):
            raise DataError("covariate matrix does not match covariate names")
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise DataError("duplicate covariate names")
        if not np.isin(self.z, (0, 1)).all():
            raise DataError("z must be 0/1")
        if not np.isin(self.d, (0, 1)).all():
            raise DataError("d must be 0/1")
        if np.any((self.z == 0) & (self.d == 1)):
            raise DataError("one-way noncompliance violated: a z=0 record has d=1")
        if self.outcome_kind == BINARY:
            yo = self.y[~np.isnan(self.y)]
            if not np.isin(yo, (0.0, 1.0)).all():
                raise DataError("binary outcome has values outside {0,1}")
        elif np.isinf(self.y).any():
            raise DataError("outcome has infinite values")
        c = self.c
        known = ~np.isnan(c)
        if not np.isin(c[known], (0.0, 1.0)).all():
            raise DataError("compliance class must be 0/1 or missing")
        z1 = known & (self.z == 1)
        if np.any(c[z1] != self.d[z1]):
            raise DataError("compliance class contradicts treatment received in the z=1 arm")
        if n > 0 and (np.sum(self.z == 1) == 0 or np.sum(self.z == 0) == 0):
            raise DataError("both arms must be nonempty")

    @property
    def n(self) -> int:
        return len(self.z)

    @property
    def missing_y(self) -> np.ndarray:
        return np.isnan(self.y)

    @property
    def latent(self) -> np.ndarray:
        return np.isnan(self.c)

    @property
    def binary(self) -> bool:
        return self.outcome_kind == BINARY

    def covariates(self, names: Sequence[str]) -> np.ndarray:
        """Columns of ``x`` for ``names`` as an (n, len(names)) array."""
        idx = []
        for nm in names:
            if nm not in self.covariate_names:
                raise DataError(f"unknown covariate {nm!r}")
            idx.append(self.covariate_names.index(nm))
        return self.x[:, idx]

    def replace(self, **changes) -> "Dataset":
        fields = dict(ids=self.ids, z=self.z, d=self.d, y=self.y, x=self.x,
                      covariate_names=self.covariate_names,
                      outcome_kind=self.outcome_kind, c=self.c)
        fields.update(changes)
        return Dataset(**fields)

    def subset(self, mask) -> "Dataset":
        return Dataset(ids=self.ids[mask], z=self.z[mask], d=self.d[mask], y=self.y[mask],
                       x=self.x[mask], covariate_names=self.covariate_names,
                       outcome_kind=self.outcome_kind, c=self.c[mask])

    def records(self) -> Iterator[TrialRecord]:
        for i in range(self.n):
            y = None if math.isnan(self.y[i]) else float(self.y[i])
            c = None if math.isnan(self.c[i]) else int(self.c[i])
            x = {nm: float(self.x[i, j]) for j, nm in enumerate(self.covariate_names)}
            yield TrialRecord(int(self.ids[i]), int(self.z[i]), int(self.d[i]), y, x, c)

    @classmethod
    def from_records(cls, records: Sequence[TrialRecord], outcome_kind: str,
                     covariate_names: Sequence[str] = ()) -> "Dataset":
        names = tuple(covariate_names)
        return cls(
            ids=[r.id for r in records],
            z=[r.z for r in records],
            d=[r.d for r in records],
            y=[np.nan if r.y is None else r.y for r in records],
            x=np.array([[r.x[nm] for nm in names] for r in records], dtype=float).reshape(len(records), len(names)),
            covariate_names=names,
            outcome_kind=outcome_kind,
            c=[np.nan if r.c is None else r.c for r in records],
        )


def derive_compliance(ds: Dataset) -> Dataset:
    """Set ``c`` from ``d`` in the active arm; leave the control arm latent."""
    c = np.where(ds.z == 1, ds.d.astype(float), np.nan)
    return ds.replace(c=c)


def ensure_compliance(ds: Dataset) -> Dataset:
    """Fill any missing active-arm classes from ``d``; other classes are kept."""
    fill = (ds.z == 1) & np.isnan(ds.c)
    if not fill.any():
        return ds
    return ds.replace(c=np.where(fill, ds.d.astype(float), ds.c))


def _parse_float(tok: str, col: str, row: int) -> float:
    tok = tok.strip()
    if tok in NA_TOKENS:
        return np.nan
    try:
        return float(tok)
    except ValueError:
        raise DataError(f"row {row}: column {col!r} has non-numeric value {tok!r}") from None


def _parse_binary(tok: str, col: str, row: int) -> int:
    tok = tok.strip()
    if tok in NA_TOKENS:
        raise DataError(f"row {row}: column {col!r} is missing; z and d may not be missing")
    try:
        v = float(tok)
    except ValueError:
        raise DataError(f"row {row}: column {col!r} has non-numeric value {tok!r}") from None
    if v not in (0.0, 1.0):
        raise DataError(f"row {row}: column {col!r} must be 0/1, got {tok!r}")
    return int(v)


def load_csv(path, outcome_kind: str, column_map: Mapping[str, str] | None = None,
             covariates: Sequence[str] | None = None) -> Dataset:
    """Read a trial CSV.

    ``column_map`` maps the canonical names ``id``, ``z``, ``d``, ``y`` (and
    optionally ``c``) to header names in the file. ``covariates`` defaults to
    every unmapped column. Empty cells and ``NA`` are read as missing; lines
    starting with ``#`` are skipped.
    """
    cmap = {"id": "id", "z": "z", "d": "d", "y": "y"}
    cmap.update(column_map or {})
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    for key in ("z", "d", "y"):
        if cmap[key] not in header:
            raise DataError(f"{path}: missing column {cmap[key]!r}")
    has_id = cmap["id"] in header
    has_c = "c" in (column_map or {}) and cmap["c"] in header
    mapped = {cmap[k] for k in cmap if k in ("id", "z", "d", "y", "c")}
    if covariates is None:
        covariates = [h for h in header if h not in mapped]
    for nm in covariates:
        if nm not in header:
            raise DataError(f"{path}: missing covariate column {nm!r}")
    pos = {h: i for i, h in enumerate(header)}
    n = len(rows)
    ids = np.empty(n, dtype=np.int64)
    z = np.empty(n, dtype=np.int8)
    d = np.empty(n, dtype=np.int8)
    y = np.empty(n)
    c = np.full(n, np.nan)
    x = np.empty((n, len(covariates)))
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} fields, header has {len(header)}")
        k = i - 2
        ids[k] = int(_parse_float(row[pos[cmap["id"]]], "id", i)) if has_id else k + 1
        z[k] = _parse_binary(row[pos[cmap["z"]]], cmap["z"], i)
        d[k] = _parse_binary(row[pos[cmap["d"]]], cmap["d"], i)
        y[k] = _parse_float(row[pos[cmap["y"]]], cmap["y"], i)
        if has_c:
            c[k] = _parse_float(row[pos[cmap["c"]]], cmap["c"], i)
        for j, nm in enumerate(covariates):
            x[k, j] = _parse_float(row[pos[nm]], nm, i)
    if n == 0:
        raise DataError(f"{path}: no data rows")
    return Dataset(ids=ids, z=z, d=d, y=y, x=x, covariate_names=tuple(covariates),
                   outcome_kind=outcome_kind, c=c)


def format_value(v: float) -> str:
    """Shortest text that parses back to exactly ``v``; empty for NaN."""
    if math.isnan(v):
        return ""
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_csv(ds: Dataset, path, include_class: bool = False, comment: str | None = None) -> None:
    """Write ``ds`` in the layout read by :func:`load_csv`.

    ``comment`` is written first as a ``#`` line.
    """
    header = ["id", "z", "d", "y", *ds.covariate_names]
    if include_class:
        header.append("c")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [str(int(ds.ids[i])), str(int(ds.z[i])), str(int(ds.d[i])), format_value(ds.y[i])]
            row += [format_value(v) for v in ds.x[i]]
            if include_class:
                row.append(format_value(ds.c[i]))
            w.writerow(row)


def _mean_sd(v):
    v = v[~np.isnan(v)]
    if len(v) == 0:
        return None, None
    sd = float(np.std(v, ddof=1)) if len(v) > 1 else None
    return float(np.mean(v)), sd


def observed_summary(ds: Dataset) -> dict:
    """Per-arm descriptives: N, % noncompliant, missingness and mean (SD).

    Returns ``{"control": {...}, "active": {...}}``; each arm holds ``n``,
    ``pct_of_total``, ``n_noncompliant``, ``pct_noncompliant`` and a
    ``variables`` mapping with ``n_missing``, ``pct_missing``, ``mean``, ``sd``.
    """
    out = {}
    for arm, label in ((0, "control"), (1, "active")):
        m = ds.z == arm
        n = int(m.sum())
        if arm == 1:
            noncomp = int(np.sum(ds.d[m] == 0))
        else:
            noncomp = int(np.sum(ds.d[m] == 1))
        cols = {"y": ds.y[m]}
        for j, nm in enumerate(ds.covariate_names):
            cols[nm] = ds.x[m, j]
        variables = {}
        for nm, v in cols.items():
            miss = int(np.isnan(v).sum())
            mean, sd = _mean_sd(v)
            variables[nm] = {
                "n_missing": miss,
                "pct_missing": 100.0 * miss / n if n else 0.0,
                "mean": mean,
                "sd": sd,
            }
        out[label] = {
            "n": n,
            "pct_of_total": 100.0 * n / ds.n if ds.n else 0.0,
            "n_noncompliant": noncomp,
            "pct_noncompliant": 100.0 * noncomp / n if n else 0.0,
            "variables": variables,
        }
    return out
