"""Clustered binary datasets, model specifications and design matrices.

Two-level data are stored as three-level data with a single synthetic
level-3 cluster, so every downstream routine handles one nesting layout.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (BrokenNesting, DataError, MissingValue, NonBinaryOutcome,
                     SpecError, TooFewClusters, UnknownColumn)

COVARIANCE_STRUCTURES = ("independent", "unstructured")
SYNTHETIC_LEVEL3 = "__all__"


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _dense_codes(labels):
    """Renumber labels to 0..m-1 in order of first appearance."""
    codes = np.empty(len(labels), dtype=np.intp)
    seen = {}
    for i, lab in enumerate(labels):
        c = seen.get(lab)
        if c is None:
            c = seen[lab] = len(seen)
        codes[i] = c
    return codes, tuple(seen)


@dataclass(frozen=True)
class ClusteredDataset:
    """Binary outcomes nested in subjects (level 2) within families (level 3).

    Attributes
    ----------
    y : ndarray of float, shape (N,)
        Outcomes, each exactly 0 or 1.
    level2, level3 : ndarray of int, shape (N,)
        Dense cluster codes in order of first appearance.
    covariates : dict of str -> ndarray
        Real-valued covariate columns, in file order.
    level2_labels, level3_labels : tuple
        Original labels, indexed by the dense codes.
    has_level3 : bool
        False when the input had no level-3 identifier.
    """

    y: np.ndarray
    level2: np.ndarray
    level3: np.ndarray
    covariates: Mapping[str, np.ndarray]
    level2_labels: tuple
    level3_labels: tuple
    has_level3: bool = True

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def n_level2(self) -> int:
        return len(self.level2_labels)

    @property
    def n_level3(self) -> int:
        return len(self.level3_labels)

    @property
    def columns(self) -> tuple:
        return tuple(self.covariates)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[name]
        except KeyError:
            raise UnknownColumn(f"unknown column {name!r}") from None

    def with_columns(self, new: Mapping[str, Sequence[float]]) -> "ClusteredDataset":
        """Return a copy with extra covariate columns appended."""
        cov = dict(self.covariates)
        for name, values in new.items():
            v = np.asarray(values, dtype=float)
            if v.shape != (self.n_obs,):
                raise DataError(f"column {name!r} has shape {v.shape}, "
                                f"expected ({self.n_obs},)")
            cov[name] = _readonly(v)
        return ClusteredDataset(self.y, self.level2, self.level3, cov,
                                self.level2_labels, self.level3_labels,
                                self.has_level3)

    def to_rows(self) -> list[dict]:
        """Records in the CSV schema (`y`, `id3`, `id2`, covariates)."""
        rows = []
        for i in range(self.n_obs):
            r = {"y": int(self.y[i])}
            if self.has_level3:
                r["id3"] = self.level3_labels[self.level3[i]]
            r["id2"] = self.level2_labels[self.level2[i]]
            for name, col in self.covariates.items():
                r[name] = float(col[i])
            rows.append(r)
        return rows


def from_arrays(y, level2, level3=None, covariates=None) -> ClusteredDataset:
    """Build a validated dataset from column arrays."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    if np.isnan(y).any():
        raise MissingValue("outcome has missing values")
    bad = ~((y == 0) | (y == 1))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonBinaryOutcome(f"row {i}: outcome {y[i]!r} is not 0 or 1")
    l2 = list(level2)
    if len(l2) != n:
        raise DataError("level-2 id column length differs from outcome")
    has3 = level3 is not None
    l3 = list(level3) if has3 else [SYNTHETIC_LEVEL3] * n
    if len(l3) != n:
        raise DataError("level-3 id column length differs from outcome")
    for name, ids in (("id2", l2), ("id3", l3)):
        for i, v in enumerate(ids):
            if v is None or (isinstance(v, float) and math.isnan(v)) or v == "":
                raise MissingValue(f"row {i}: missing {name}")
    codes2, labels2 = _dense_codes(l2)
    codes3, labels3 = _dense_codes(l3)
    parent = np.full(len(labels2), -1, dtype=np.intp)
    for i in range(n):
        c2, c3 = codes2[i], codes3[i]
        if parent[c2] < 0:
            parent[c2] = c3
        elif parent[c2] != c3:
            raise BrokenNesting(
                f"level-2 id {labels2[c2]!r} appears under level-3 ids "
                f"{labels3[parent[c2]]!r} and {labels3[c3]!r}")
    if len(labels2) < 2:
        raise TooFewClusters(f"need at least 2 level-2 clusters, got {len(labels2)}")
    cov = {}
    for name, values in (covariates or {}).items():
        v = np.asarray(values, dtype=float)
        if v.shape != (n,):
            raise DataError(f"column {name!r} has {v.size} values, expected {n}")
        if np.isnan(v).any():
            i = int(np.flatnonzero(np.isnan(v))[0])
            raise MissingValue(f"row {i}: missing value in column {name!r}")
        cov[name] = _readonly(v)
    return ClusteredDataset(_readonly(y), _readonly(codes2), _readonly(codes3),
                            cov, labels2, labels3, has3)


def _is_missing(v) -> bool:
    if v is None:
        return True
    if isinstance(v, str):
        return v.strip() == "" or v.strip().lower() in ("na", "nan", ".")
    return isinstance(v, float) and math.isnan(v)


def validate_dataset(raw_rows: Iterable[Mapping], outcome: str = "y",
                     id2: str = "id2", id3: str = "id3") -> ClusteredDataset:
    """Validate parsed records and return a :class:`ClusteredDataset`.

    Every key other than the outcome and id columns is a covariate. The
    level-3 column is optional; without it the data are two-level.
    """
    rows = list(raw_rows)
    if not rows:
        raise TooFewClusters("no rows")
    names = []
    for r in rows:
        for k in r:
            if k not in names:
                names.append(k)
    for req in (outcome, id2):
        if req not in names:
            raise UnknownColumn(f"required column {req!r} not found")
    has3 = id3 in names
    covnames = [k for k in names if k not in (outcome, id2, id3)]

    y = np.empty(len(rows))
    cols = {k: np.empty(len(rows)) for k in covnames}
    l2, l3 = [], []
    for i, r in enumerate(rows):
        v = r.get(outcome)
        if _is_missing(v):
            raise MissingValue(f"row {i}: missing outcome")
        try:
            y[i] = float(v)
        except (TypeError, ValueError):
            raise NonBinaryOutcome(f"row {i}: outcome {v!r} is not 0 or 1") from None
        for k in covnames:
            v = r.get(k)
            if _is_missing(v):
                raise MissingValue(f"row {i}: missing value in column {k!r}")
            try:
                cols[k][i] = float(v)
            except (TypeError, ValueError):
                raise DataError(f"row {i}: column {k!r} value {v!r} is not numeric") from None
        for key, store in ((id2, l2), (id3, l3)):
            if key == id3 and not has3:
                continue
            v = r.get(key)
            if _is_missing(v):
                raise MissingValue(f"row {i}: missing {key}")
            store.append(v)
    return from_arrays(y, l2, l3 if has3 else None, cols)


def read_csv(path, outcome: str = "y", id2: str = "id2", id3: str = "id3") -> ClusteredDataset:
    """Read a comma-separated UTF-8 file with a header row."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return validate_dataset(rows, outcome=outcome, id2=id2, id3=id3)


def write_csv(ds: ClusteredDataset, path) -> None:
    rows = ds.to_rows()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cluster_sizes(ds: ClusteredDataset, level: str = "level2") -> dict:
    """Observation count per cluster label, in order of first appearance."""
    if level == "level2":
        codes, labels = ds.level2, ds.level2_labels
    elif level == "level3":
        codes, labels = ds.level3, ds.level3_labels
    else:
        raise ValueError(f"level must be 'level2' or 'level3', got {level!r}")
    counts = np.bincount(codes, minlength=len(labels))
    return {lab: int(c) for lab, c in zip(labels, counts)}


# -- model specification ---------------------------------------------------

@dataclass(frozen=True)
class LevelEffects:
    """Random effects at one level: optional intercept plus slopes."""

    intercept: bool = True
    slopes: tuple = ()
    covariance: str = "independent"

    def __post_init__(self):
        object.__setattr__(self, "slopes", tuple(self.slopes))
        if self.covariance not in COVARIANCE_STRUCTURES:
            raise SpecError(f"unknown covariance structure {self.covariance!r}")
        if len(set(self.slopes)) != len(self.slopes):
            raise SpecError("duplicate random slope column")

    @property
    def dim(self) -> int:
        return int(self.intercept) + len(self.slopes)

    @property
    def names(self) -> tuple:
        return (("_cons",) if self.intercept else ()) + self.slopes


@dataclass(frozen=True)
class RandomEffectsSpec:
    level2: LevelEffects | None = None
    level3: LevelEffects | None = None

    @property
    def dim(self) -> int:
        return sum(lv.dim for lv in (self.level2, self.level3) if lv is not None)


@dataclass(frozen=True)
class ModelSpec:
    """Fixed-effect columns (intercept implicit) and random-effects layout."""

    fixed: tuple = ()
    random: RandomEffectsSpec = field(default_factory=RandomEffectsSpec)
    extra_fixed: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "extra_fixed", tuple(self.extra_fixed))
        allnames = self.fixed + self.extra_fixed
        if len(set(allnames)) != len(allnames):
            raise SpecError("duplicate fixed-effect column names")
        if "_cons" in allnames:
            raise SpecError("'_cons' is reserved for the intercept")

    @property
    def fixed_names(self) -> tuple:
        return ("_cons",) + self.fixed + self.extra_fixed

    def with_extras(self, names: Sequence[str]) -> "ModelSpec":
        return ModelSpec(self.fixed, self.random, tuple(names))


@dataclass(frozen=True)
class DesignMatrices:
    """Row-aligned fixed and random-effects designs.

    ``Z2[i]`` is row ``i`` of the random-effects design of level-2 cluster
    ``level2[i]``; rows keep dataset order. ``Z3`` has zero columns when the
    level-3 spec is absent or the data carry a single level-3 cluster.
    """

    X: np.ndarray
    Z2: np.ndarray
    Z3: np.ndarray
    level2: np.ndarray
    level3: np.ndarray
    x_names: tuple
    z2_names: tuple
    z3_names: tuple
    n_level2: int
    n_level3: int

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    def cluster_rows(self, level: str, code: int) -> np.ndarray:
        idx = self.level2 if level == "level2" else self.level3
        return np.flatnonzero(idx == code)


def _z_block(ds, lv):
    if lv is None or lv.dim == 0:
        return np.zeros((ds.n_obs, 0)), ()
    cols = []
    if lv.intercept:
        cols.append(np.ones(ds.n_obs))
    cols += [ds.column(s) for s in lv.slopes]
    return np.column_stack(cols), lv.names


def build_design(ds: ClusteredDataset, spec: ModelSpec) -> DesignMatrices:
    """Assemble X = [1, fixed..., extras...] and per-level Z designs."""
    xcols = [np.ones(ds.n_obs)] + [ds.column(c) for c in spec.fixed + spec.extra_fixed]
    X = np.column_stack(xcols)
    Z2, n2 = _z_block(ds, spec.random.level2)
    lv3 = spec.random.level3 if ds.n_level3 > 1 else None
    Z3, n3 = _z_block(ds, lv3)
    return DesignMatrices(_readonly(X), _readonly(Z2), _readonly(Z3),
                          ds.level2, ds.level3, spec.fixed_names, n2, n3,
                          ds.n_level2, ds.n_level3)
