"""Observation data, instrument coding and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ColumnNotFound, DegenerateInstrument, ParseError

RAW_MULTIVALUED = "raw_multivalued"
ORTHOGONAL_INDICATORS = "orthogonal_indicators"


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Complete-case observations with a K-level instrument.

    ``z`` holds level indices 0..K-1; ``levels`` holds the raw instrument value
    for each index in ascending order.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    levels: tuple = ()
    dropped: int = 0
    source: Optional[str] = None
    columns: tuple = ()

    def __post_init__(self):
        y = _frozen(self.y)
        x = _frozen(self.x)
        z = _frozen(self.z, dtype=np.int64)
        if not (y.ndim == x.ndim == z.ndim == 1 and y.size == x.size == z.size):
            raise ValueError("y, x and z must be one-dimensional with equal length")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("y and x must be finite")
        levels = tuple(self.levels) if self.levels else tuple(range(int(z.max()) + 1 if z.size else 0))
        if z.size and (z.min() < 0 or z.max() >= len(levels)):
            raise ValueError("instrument indices must lie in 0..K-1")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "levels", levels)

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def indicator_columns(self) -> np.ndarray:
        """(n, K-1) matrix of I(Z = k) for k = 1..K-1."""
        return (self.z[:, None] == np.arange(1, self.n_levels)[None, :]).astype(float)

    @property
    def level_counts(self) -> np.ndarray:
        return np.bincount(self.z, minlength=self.n_levels)

    def is_binary(self, column: str) -> bool:
        v = getattr(self, column)
        return bool(np.all((v == 0.0) | (v == 1.0)))

    def subset(self, mask) -> "Dataset":
        return Dataset(self.y[mask], self.x[mask], self.z[mask], self.levels,
                       self.dropped, self.source, self.columns)


@dataclass(frozen=True)
class InstrumentSpec:
    mode: str = ORTHOGONAL_INDICATORS
    reference_level: int = 0
    levels: tuple = field(default=())

    def __post_init__(self):
        if self.mode not in (RAW_MULTIVALUED, ORTHOGONAL_INDICATORS):
            raise ValueError(f"unknown instrument mode {self.mode!r}")

    @classmethod
    def for_dataset(cls, ds: Dataset, mode: str = ORTHOGONAL_INDICATORS, reference_level: int = 0):
        return cls(mode=mode, reference_level=reference_level, levels=tuple(ds.levels))


def encode_indicators(ds: Dataset, spec: Optional[InstrumentSpec] = None) -> np.ndarray:
    """Instrument matrix S with a leading constant column.

    ``orthogonal_indicators`` gives (1, I(Z=k) for every k except the
    reference level); ``raw_multivalued`` gives (1, Z) using the raw values.
    """
    if spec is None:
        spec = InstrumentSpec.for_dataset(ds)
    if spec.levels and tuple(spec.levels) != tuple(ds.levels):
        raise ValueError("instrument spec levels do not match the dataset")
    ones = np.ones((ds.n, 1))
    if spec.mode == RAW_MULTIVALUED:
        raw = np.asarray(ds.levels, dtype=float)[ds.z]
        return np.hstack([ones, raw[:, None]])
    if not 0 <= spec.reference_level < ds.n_levels:
        raise ValueError("reference level out of range")
    keep = [k for k in range(ds.n_levels) if k != spec.reference_level]
    ind = (ds.z[:, None] == np.asarray(keep)[None, :]).astype(float)
    return np.hstack([ones, ind])


def saturated_regressors(x, z, n_levels, reference_level=0):
    """Association-model regressors {1, X} + {Z_k} + {X Z_k}."""
    x = np.asarray(x, dtype=float)
    keep = [k for k in range(n_levels) if k != reference_level]
    ind = (np.asarray(z)[:, None] == np.asarray(keep)[None, :]).astype(float)
    return np.hstack([np.ones((x.size, 1)), x[:, None], ind, ind * x[:, None]])


def make_dataset(y, x, z, **kwargs) -> Dataset:
    """Dataset from raw arrays; instrument values are relabelled to 0..K-1."""
    z = np.asarray(z)
    raw_levels, idx = np.unique(z, return_inverse=True)
    levels = tuple(_as_number(v) for v in raw_levels)
    return Dataset(np.asarray(y, float), np.asarray(x, float), idx.reshape(-1), levels, **kwargs)


def _as_number(v):
    f = float(v)
    return int(f) if f.is_integer() else f


def _parse_float(text, row, column):
    try:
        val = float(text)
    except ValueError:
        raise ParseError(f"row {row}: column {column!r} is not numeric: {text!r}", row=row) from None
    if not math.isfinite(val):
        raise ParseError(f"row {row}: column {column!r} is not finite: {text!r}", row=row)
    return val


def ingest_csv(path, outcome: str, exposure: str, instrument: str) -> Dataset:
    """Read a headed CSV file into a :class:`Dataset`.

    Rows with an empty cell in any of the three columns are dropped and
    counted in ``Dataset.dropped``. Instrument values must be integers; they
    are relabelled to 0..K-1 in ascending numeric order.
    """
    ys, xs, zs = [], [], []
    dropped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (outcome, exposure, instrument):
            if col not in header:
                raise ColumnNotFound(f"column {col!r} not found in {path}")
        for row_no, row in enumerate(reader, start=1):
            cells = [(row.get(c) or "").strip() for c in (outcome, exposure, instrument)]
            if any(c == "" for c in cells):
                dropped += 1
                continue
            y = _parse_float(cells[0], row_no, outcome)
            x = _parse_float(cells[1], row_no, exposure)
            z = _parse_float(cells[2], row_no, instrument)
            if not z.is_integer():
                raise ParseError(f"row {row_no}: instrument value {cells[2]!r} is not an integer", row=row_no)
            ys.append(y)
            xs.append(x)
            zs.append(int(z))
    if len(set(zs)) < 2:
        raise DegenerateInstrument(f"instrument {instrument!r} has fewer than 2 distinct levels")
    return make_dataset(ys, xs, zs, dropped=dropped, source=str(path),
                        columns=(outcome, exposure, instrument))


def write_csv(ds: Dataset, path, names: Sequence[str] = ("y", "x", "z")) -> None:
    """Write y, x and the raw instrument value; floats use ``repr`` so a
    re-ingest reproduces the data bit for bit."""
    raw = [ds.levels[k] for k in ds.z]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(names))
        for y, x, z in zip(ds.y.tolist(), ds.x.tolist(), raw):
            w.writerow([repr(y), repr(x), z])


@dataclass(frozen=True)
class MergeReport:
    mapping: dict
    level_means: tuple
    n_levels_before: int
    n_levels_after: int


def collapse_equivalent_levels(ds: Dataset, predicted, tol: float = 1e-9):
    """Merge instrument levels with (numerically) equal predicted values.

    ``predicted`` must be constant within each level. Levels whose means
    differ by at most ``tol`` (relative to max(1, |mean|)) are merged; the
    merged groups are numbered by their smallest original level index.

    Returns
    -------
    (Dataset, MergeReport)
    """
    pred = np.asarray(predicted, dtype=float)
    if pred.shape != (ds.n,):
        raise ValueError("predicted must have one value per observation")
    means = np.array([pred[ds.z == k].mean() if np.any(ds.z == k) else np.nan
                      for k in range(ds.n_levels)])
    for k in range(ds.n_levels):
        vals = pred[ds.z == k]
        if vals.size and np.max(np.abs(vals - means[k])) > tol * max(1.0, abs(means[k])):
            raise ValueError(f"predicted values vary within instrument level {ds.levels[k]!r}")

    def close(a, b):
        return abs(a - b) <= tol * max(1.0, abs(a), abs(b))

    order = np.argsort(means, kind="stable")
    groups = []
    for k in order:
        if groups and close(means[groups[-1][-1]], means[k]):
            groups[-1].append(int(k))
        else:
            groups.append([int(k)])
    groups.sort(key=min)
    old_to_new = np.empty(ds.n_levels, dtype=np.int64)
    for new, members in enumerate(groups):
        old_to_new[members] = new
    report = MergeReport(
        mapping={ds.levels[k]: int(old_to_new[k]) for k in range(ds.n_levels)},
        level_means=tuple(float(m) for m in means),
        n_levels_before=ds.n_levels,
        n_levels_after=len(groups),
    )
    if len(groups) == ds.n_levels:
        return ds, report
    new = Dataset(ds.y, ds.x, old_to_new[ds.z], tuple(range(len(groups))), ds.dropped,
                  ds.source, ds.columns)
    return new, report
