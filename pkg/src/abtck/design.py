"""Domains, multifidelity datasets and the nested augmentation.

The augmentation is built once for the whole domain: the complete design of
level ``t`` is the union of the observed designs of levels ``t..S``.  Because
restricting a union to a leaf region commutes with taking the union, the
per-leaf complete sets are plain index views of the global ones, and the
imputed values stay attached to their input points whatever the tree does.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .errors import ConfigError, DomainError


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box ``prod_j [l_j, u_j]``."""

    bounds: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] < 1:
            raise DomainError(f"bounds must have shape (m, 2), got {b.shape}")
        if not np.all(np.isfinite(b)) or not np.all(b[:, 0] < b[:, 1]):
            raise DomainError(f"every interval needs finite l < u, got {b.tolist()}")
        object.__setattr__(self, "bounds", b)

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]

    @property
    def lower(self) -> np.ndarray:
        return self.bounds[:, 0]

    @property
    def upper(self) -> np.ndarray:
        return self.bounds[:, 1]

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.all((X >= self.lower) & (X <= self.upper), axis=1)

    def check(self, X, what="points"):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise DomainError(f"{what} have {X.shape[1]} columns, domain has {self.dim}")
        bad = ~self.contains(X)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise DomainError(f"{what}: row {i} = {X[i].tolist()} lies outside {self.bounds.tolist()}")

    def to_unit(self, X) -> np.ndarray:
        """Map into ``[-1, 1]^m``."""
        X = np.asarray(X, dtype=float)
        return 2.0 * (X - self.lower) / (self.upper - self.lower) - 1.0

    def from_unit(self, U) -> np.ndarray:
        U = np.asarray(U, dtype=float)
        return self.lower + (U + 1.0) * 0.5 * (self.upper - self.lower)

    @classmethod
    def unit(cls, m: int) -> "Domain":
        return cls(np.tile([-1.0, 1.0], (m, 1)))

    def to_list(self):
        return self.bounds.tolist()


@dataclass
class FidelityLevel:
    X: np.ndarray
    y: np.ndarray


@dataclass
class FidelityDataset:
    """Observed designs and outputs, levels ordered by ascending fidelity."""

    levels: list
    domain: Domain

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ConfigError("need at least one fidelity level")
        fixed = []
        for t, lev in enumerate(self.levels):
            X = np.atleast_2d(np.asarray(lev.X, dtype=float))
            y = np.asarray(lev.y, dtype=float).ravel()
            if X.size == 0:
                X = X.reshape(0, self.domain.dim)
            if X.shape[0] != y.shape[0]:
                raise ConfigError(f"level {t + 1}: {X.shape[0]} inputs but {y.shape[0]} outputs")
            if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
                raise ConfigError(f"level {t + 1}: non-finite values")
            self.domain.check(X, what=f"level {t + 1} design")
            if len(np.unique(X, axis=0)) != len(X):
                raise ConfigError(f"level {t + 1}: duplicated input point")
            fixed.append(FidelityLevel(X, y))
        self.levels = fixed

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def dim(self) -> int:
        return self.domain.dim

    def is_nested(self) -> bool:
        """True when every level's design is contained in the one below."""
        for t in range(self.n_levels - 1):
            lower = {tuple(r) for r in self.levels[t].X}
            if any(tuple(r) not in lower for r in self.levels[t + 1].X):
                return False
        return True

    def rescaled(self) -> "FidelityDataset":
        """Copy with inputs mapped to ``[-1, 1]^m``."""
        levels = [FidelityLevel(self.domain.to_unit(l.X), l.y.copy()) for l in self.levels]
        return FidelityDataset(levels, Domain.unit(self.dim))

    @classmethod
    def from_csv(cls, paths, domain: Domain, dedup_tol: float | None = None):
        levels = []
        for p in paths:
            X, y = read_level_csv(p, domain.dim)
            if dedup_tol is not None:
                X, y = dedup_points(X, y, dedup_tol)
            levels.append(FidelityLevel(X, y))
        return cls(levels, domain)

    def to_dict(self):
        return {
            "domain": self.domain.to_list(),
            "levels": [{"X": l.X.tolist(), "y": l.y.tolist()} for l in self.levels],
        }

    @classmethod
    def from_dict(cls, d):
        dom = Domain(np.asarray(d["domain"], dtype=float))
        levels = [
            FidelityLevel(np.asarray(l["X"], dtype=float).reshape(-1, dom.dim), np.asarray(l["y"], dtype=float))
            for l in d["levels"]
        ]
        return cls(levels, dom)


def read_level_csv(path, m: int | None = None):
    """Read one level file with header ``x1,...,xm,y``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[-1] != "y" or any(h != f"x{j + 1}" for j, h in enumerate(header[:-1])):
        raise ConfigError(f"{path}: header must be x1,...,xm,y, got {header}")
    if m is not None and len(header) - 1 != m:
        raise ConfigError(f"{path}: expected {m} inputs, found {len(header) - 1}")
    body = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    try:
        data = np.array([[float(c) for c in r] for r in body], dtype=float).reshape(len(body), len(header))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(data), axis=1))[0])
        raise ConfigError(f"{path}: non-finite value on data row {bad + 1}")
    return data[:, :-1], data[:, -1]


def write_level_csv(path, X, y):
    X = np.atleast_2d(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(X.shape[1])] + ["y"])
        for row, v in zip(X, y):
            w.writerow([repr(float(a)) for a in row] + [repr(float(v))])


def dedup_points(X, y, tol=1e-12):
    """Drop rows within ``tol`` (max-norm) of an earlier row."""
    keep = []
    for i in range(len(X)):
        if all(np.max(np.abs(X[i] - X[j])) > tol for j in keep):
            keep.append(i)
    keep = np.asarray(keep, dtype=int)
    return X[keep], y[keep]


def lhs_sample(n: int, domain: Domain, seed=None) -> np.ndarray:
    """Latin hypercube of ``n`` points, one per equal-width stratum per axis."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    U = qmc.LatinHypercube(d=domain.dim, seed=seed).random(n)
    return domain.lower + U * (domain.upper - domain.lower)


@dataclass
class AugmentedDesign:
    """Union of all design points with per-level observed/complete masks.

    ``values[t, i]`` is the observed output of point ``i`` at level ``t`` when
    ``observed[t, i]``, its current imputation when the point is missing at
    that level, and NaN when the point is not in the complete design of ``t``.
    """

    points: np.ndarray
    observed: np.ndarray
    complete: np.ndarray
    values: np.ndarray
    leaf_of: np.ndarray = None
    _index_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.leaf_of is None:
            self.leaf_of = np.zeros(len(self.points), dtype=int)

    @property
    def n_levels(self) -> int:
        return self.observed.shape[0]

    @property
    def missing(self) -> np.ndarray:
        return self.complete & ~self.observed

    @property
    def leaf_ids(self):
        return sorted(set(self.leaf_of.tolist()))

    def idx(self, leaf: int, level: int, kind: str = "complete") -> np.ndarray:
        key = (leaf, level, kind)
        hit = self._index_cache.get(key)
        if hit is None:
            mask = {"complete": self.complete, "observed": self.observed, "missing": self.missing}[kind][level]
            hit = np.flatnonzero(mask & (self.leaf_of == leaf))
            self._index_cache[key] = hit
        return hit

    def set_leaves(self, leaf_of):
        self.leaf_of = np.asarray(leaf_of, dtype=int)
        self._index_cache = {}

    def copy(self) -> "AugmentedDesign":
        return AugmentedDesign(
            self.points, self.observed, self.complete, self.values.copy(), self.leaf_of.copy()
        )

    def missing_values(self, level: int) -> np.ndarray:
        return self.values[level, self.missing[level]]


def build_augmentation(data: FidelityDataset, partition=None) -> AugmentedDesign:
    """Smallest nested completion of the observed designs.

    Points are matched across levels by exact coordinate equality.  Missing
    outputs start at the observed output of the nearest same-level point, or
    at the upper level's value at the same point when level ``t`` has no data.
    """
    S = data.n_levels
    index = {}
    rows = []
    for lev in data.levels:
        for x in lev.X:
            key = tuple(x.tolist())
            if key not in index:
                index[key] = len(rows)
                rows.append(x)
    points = np.asarray(rows, dtype=float).reshape(len(rows), data.dim)
    N = len(points)
    observed = np.zeros((S, N), dtype=bool)
    values = np.full((S, N), np.nan)
    for t, lev in enumerate(data.levels):
        ii = np.array([index[tuple(x.tolist())] for x in lev.X], dtype=int)
        observed[t, ii] = True
        values[t, ii] = lev.y
    complete = np.zeros_like(observed)
    complete[S - 1] = observed[S - 1]
    for t in range(S - 2, -1, -1):
        complete[t] = observed[t] | complete[t + 1]
    for t in range(S - 2, -1, -1):
        miss = np.flatnonzero(complete[t] & ~observed[t])
        if miss.size == 0:
            continue
        obs = np.flatnonzero(observed[t])
        if obs.size:
            _, nn = cKDTree(points[obs]).query(points[miss])
            values[t, miss] = values[t, obs[np.atleast_1d(nn)]]
        else:
            values[t, miss] = values[t + 1, miss]
    aug = AugmentedDesign(points, observed, complete, values)
    if partition is not None:
        aug.set_leaves(partition.locate(points))
    return aug


def assign_to_leaves(points, partition) -> dict:
    """Indices of ``points`` falling in each leaf, keyed by leaf id."""
    leaf = partition.locate(points)
    return {k: np.flatnonzero(leaf == k) for k in partition.leaf_ids}
