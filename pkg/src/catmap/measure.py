"""Discrete probability measures and couplings.

A :class:`DiscreteMeasure` is a weighted point cloud ``sum_i a_i delta_{x_i}``;
it carries both the source and the target of every transport problem in the
package.  A :class:`Coupling` is a nonnegative ``n x m`` matrix whose row and
column sums are the weights of two such measures.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TOL


class MeasureError(ValueError):
    """Raised when a measure or coupling violates its invariants."""


class MapEvaluationError(RuntimeError):
    """Raised when a map cannot be evaluated on one atom of a measure."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"map evaluation failed at atom {index}: {cause!r}")
        self.index = index


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted point cloud with weights normalised to sum to one.

    Weights whose total is within ``1e-6`` of one are renormalised; anything
    further off is rejected.  Duplicate atoms are allowed.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise MeasureError(f"points must be a nonempty (n, d) array, got shape {pts.shape}")
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.shape[0] != pts.shape[0]:
            raise MeasureError(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise MeasureError("points and weights must be finite")
        if np.any(w < 0):
            raise MeasureError("negative weight")
        total = w.sum()
        if abs(total - 1.0) > TOL.weight_renormalise:
            raise MeasureError(f"weights sum to {total!r}, expected 1")
        if abs(total - 1.0) > 1e-12:  # leave already-normalised weights bit-identical
            w = w / total
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @classmethod
    def dirac(cls, point) -> "DiscreteMeasure":
        return cls(np.atleast_2d(np.asarray(point, dtype=np.float64)), [1.0])

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.size

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def restrict(self, mask) -> "DiscreteMeasure":
        """Sub-measure on the selected atoms, renormalised."""
        mask = np.asarray(mask)
        w = self.weights[mask]
        return DiscreteMeasure(self.points[mask], w / w.sum())

    # -- serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "points": self.points.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "DiscreteMeasure":
        try:
            pts = np.asarray(record["points"], dtype=np.float64)
            w = record["weights"]
        except KeyError as e:
            raise MeasureError(f"measure record missing field {e}") from None
        if pts.ndim == 1:
            pts = pts[:, None]
        dim = record.get("dim", pts.shape[1])
        if pts.shape[1] != dim:
            raise MeasureError(f"declared dim {dim} but points have length {pts.shape[1]}")
        return cls(pts, w)

    def to_csv_rows(self) -> list[list[float]]:
        return [list(p) + [w] for p, w in zip(self.points.tolist(), self.weights.tolist())]

    @classmethod
    def from_csv_rows(cls, rows) -> "DiscreteMeasure":
        arr = np.asarray([[float(v) for v in r] for r in rows if r], dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 2:
            raise MeasureError("CSV measure needs at least one coordinate column and a weight column")
        return cls(arr[:, :-1], arr[:, -1])


def load_measure(path) -> DiscreteMeasure:
    """Read a measure from ``.json`` (record form) or ``.csv`` (weight last)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with path.open(newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        # tolerate a header row
        try:
            float(rows[0][0])
        except (ValueError, IndexError):
            rows = rows[1:]
        return DiscreteMeasure.from_csv_rows(rows)
    with path.open() as fh:
        return DiscreteMeasure.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class Coupling:
    """Transport plan with validated marginals."""

    matrix: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.matrix, dtype=np.float64)
        a = np.asarray(self.row_marginal, dtype=np.float64).ravel()
        b = np.asarray(self.col_marginal, dtype=np.float64).ravel()
        if P.shape != (a.size, b.size):
            raise MeasureError(f"plan shape {P.shape} does not match marginals ({a.size}, {b.size})")
        if not np.all(np.isfinite(P)):
            raise MeasureError("plan entries must be finite")
        if np.any(P < 0):
            raise MeasureError("plan has negative entries")
        if np.max(np.abs(P.sum(axis=1) - a), initial=0.0) > TOL.marginal:
            raise MeasureError("plan row sums do not match the row marginal")
        if np.max(np.abs(P.sum(axis=0) - b), initial=0.0) > TOL.marginal:
            raise MeasureError("plan column sums do not match the column marginal")
        object.__setattr__(self, "matrix", _frozen(P))
        object.__setattr__(self, "row_marginal", _frozen(a))
        object.__setattr__(self, "col_marginal", _frozen(b))

    @classmethod
    def product(cls, a, b) -> "Coupling":
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        return cls(np.outer(a, b), a, b)

    @classmethod
    def from_matrix(cls, matrix) -> "Coupling":
        P = np.asarray(matrix, dtype=np.float64)
        return cls(P, P.sum(axis=1), P.sum(axis=0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def cost(self, M) -> float:
        return float(np.sum(self.matrix * np.asarray(M)))

    def support_size(self) -> int:
        return int(np.count_nonzero(self.matrix))

    def to_triplets(self) -> dict:
        ii, jj = np.nonzero(self.matrix)
        return {
            "shape": list(self.shape),
            "triplets": [
                {"i": int(i), "j": int(j), "mass": float(self.matrix[i, j])}
                for i, j in zip(ii, jj)
            ],
        }

    @classmethod
    def from_triplets(cls, record: dict) -> "Coupling":
        n, m = record["shape"]
        P = np.zeros((n, m))
        for t in record["triplets"]:
            P[int(t["i"]), int(t["j"])] += float(t["mass"])
        return cls.from_matrix(P)


def load_coupling(path) -> Coupling:
    with Path(path).open() as fh:
        return Coupling.from_triplets(json.load(fh))


def pushforward(mu: DiscreteMeasure, g: Callable, vectorized: bool = False) -> DiscreteMeasure:
    """Image measure ``g # mu``: atoms ``g(x_i)`` with unchanged weights.

    ``g`` maps one point (a length-``d`` array) to a vector, or, with
    ``vectorized=True``, an ``(n, d)`` array to an ``(n, d')`` array.
    """
    if vectorized:
        out = np.asarray(g(mu.points), dtype=np.float64)
        if out.ndim == 1:
            out = out[:, None]
        if out.shape[0] != mu.size:
            raise MeasureError(f"vectorised map returned {out.shape[0]} rows for {mu.size} atoms")
    else:
        rows = []
        for i, x in enumerate(mu.points):
            try:
                rows.append(np.atleast_1d(np.asarray(g(x), dtype=np.float64)))
            except Exception as e:  # noqa: BLE001 - re-raised with the atom index
                raise MapEvaluationError(i, e) from e
        out = np.vstack(rows)
    bad = np.flatnonzero(~np.all(np.isfinite(out), axis=1))
    if bad.size:
        raise MapEvaluationError(int(bad[0]), ValueError("non-finite image"))
    return DiscreteMeasure(out, mu.weights)


def second_moment(rho: DiscreteMeasure) -> float:
    return float(rho.weights @ np.einsum("ij,ij->i", rho.points, rho.points))


def merge_duplicates(mu: DiscreteMeasure, tol: float = 0.0) -> DiscreteMeasure:
    """Coalesce atoms closer than ``tol`` into their weighted centroid.

    Clusters are the connected components of the graph linking atoms at
    Euclidean distance ``<= tol``.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    pts, w = mu.points, mu.weights
    n = mu.size
    if tol == 0.0:
        _, labels = np.unique(pts, axis=0, return_inverse=True)
        labels = labels.ravel()
    else:
        parent = np.arange(n)

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        block = 512
        for s in range(0, n, block):
            d2 = np.sum((pts[s : s + block, None, :] - pts[None, :, :]) ** 2, axis=-1)
            for a, b in zip(*np.nonzero(d2 <= tol * tol)):
                ra, rb = find(s + a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
        roots = np.array([find(i) for i in range(n)])
        _, labels = np.unique(roots, return_inverse=True)
    k = labels.max() + 1
    if k == n:
        return mu
    mass = np.bincount(labels, weights=w, minlength=k)
    centroids = np.zeros((k, mu.dim))
    np.add.at(centroids, labels, w[:, None] * pts)
    # zero-mass clusters keep their first atom
    pos = mass > 0
    centroids[pos] /= mass[pos, None]
    if not np.all(pos):
        first = np.full(k, -1)
        for i in range(n - 1, -1, -1):
            first[labels[i]] = i
        centroids[~pos] = pts[first[~pos]]
    return DiscreteMeasure(centroids, mass)
