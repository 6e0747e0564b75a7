"""Barycentric projection of a coupling and the L2 decomposition of the
fixed-plan map objective.

For a plan ``pi`` with first marginal ``a`` and any ``f`` defined on the
source atoms,

    sum_ij pi_ij |f_i - y_j|^2 = sum_i a_i |f_i - bar_i|^2 + sum_ij pi_ij |y_j - bar_i|^2,

and the last term equals ``m2(nu) - m2(bar # mu)``.  Minimising the left side
over a class of maps is therefore a weighted projection of ``bar``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import TOL
from .measure import Coupling


class BarycentricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BarycentricMap:
    """Values of the barycentric projection on the atoms with positive mass.

    ``indices`` are the source-atom indices kept (rows of the plan with
    positive mass); ``dropped`` lists the zero-mass rows.
    """

    indices: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    dropped: tuple = ()
    source_atoms: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise BarycentricError("barycentric values must be finite")
        if self.values.shape[0] != self.indices.size:
            raise BarycentricError("one value per kept atom is required")

    def __getitem__(self, i: int) -> np.ndarray:
        if i in self.dropped:
            raise BarycentricError(f"source atom {i} has zero mass; its barycentre is undefined")
        k = np.searchsorted(self.indices, i)
        if k >= self.indices.size or self.indices[k] != i:
            raise IndexError(i)
        return self.values[k]

    def mean(self) -> np.ndarray:
        return self.weights @ self.values / self.weights.sum()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        d = self.values.shape[1]
        w.writerow(["atom"] + [f"v{k}" for k in range(d)])
        for i, v in zip(self.indices.tolist(), self.values.tolist()):
            w.writerow([i] + v)
        return buf.getvalue()


def barycentric_projection(pi: Coupling, nu_points, source_atoms=None) -> BarycentricMap:
    """``bar(x_i) = sum_j pi_ij y_j / a_i`` for every row with ``a_i > 0``."""
    Y = np.asarray(nu_points, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    P = pi.matrix
    if Y.shape[0] != P.shape[1]:
        raise BarycentricError(f"{Y.shape[0]} target points for a plan with {P.shape[1]} columns")
    a = P.sum(axis=1)
    keep = np.flatnonzero(a > 0)
    dropped = tuple(int(i) for i in np.flatnonzero(a <= 0))
    vals = (P[keep] @ Y) / a[keep, None]
    src = None if source_atoms is None else np.asarray(source_atoms, dtype=np.float64)[keep]
    return BarycentricMap(keep, vals, pi.row_marginal[keep], dropped, src)


@dataclass
class Decomposition:
    lhs: float
    projection_term: float
    residual_term: float
    moment_gap: float


def l2_decomposition_check(pi: Coupling, nu_points, f) -> Decomposition:
    """Evaluate both sides of the decomposition for values ``f`` at the
    source atoms and assert that they agree."""
    Y = np.asarray(nu_points, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    F = np.asarray(f, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    P = pi.matrix
    if F.shape[0] != P.shape[0]:
        raise BarycentricError(f"{F.shape[0]} values for {P.shape[0]} source atoms")
    bar = barycentric_projection(pi, Y)
    D = F[:, None, :] - Y[None, :, :]
    lhs = float(np.sum(P * np.einsum("ijk,ijk->ij", D, D)))
    Fk = F[bar.indices]
    proj = float(bar.weights @ np.sum((Fk - bar.values) ** 2, axis=1))
    R = Y[None, :, :] - bar.values[:, None, :]
    resid = float(np.sum(P[bar.indices] * np.einsum("ijk,ijk->ij", R, R)))
    b = pi.col_marginal
    gap = float(b @ np.sum(Y * Y, axis=1) - bar.weights @ np.sum(bar.values**2, axis=1))

    def agree(u, v):
        return abs(u - v) <= TOL.value_abs + TOL.value_rel * max(abs(u), abs(v))

    if not agree(lhs, proj + resid):
        raise AssertionError(f"decomposition fails: {lhs!r} != {proj!r} + {resid!r}")
    if not agree(resid, gap):
        raise AssertionError(f"residual term {resid!r} differs from the moment gap {gap!r}")
    return Decomposition(lhs, proj, resid, gap)


def constrained_barycentric_fit(pi: Coupling, nu_points, projector: Callable[[np.ndarray, np.ndarray], np.ndarray]
                                ) -> BarycentricMap:
    """Minimise the fixed-plan objective over a class of maps.

    ``projector(values, weights)`` must return the weighted L2 projection of
    ``values`` (one row per kept atom) onto the class restricted to the
    atoms.
    """
    bar = barycentric_projection(pi, nu_points)
    out = np.asarray(projector(bar.values, bar.weights), dtype=np.float64)
    if out.ndim == 1:
        out = out[:, None]
    if out.shape != bar.values.shape:
        raise BarycentricError(f"projector returned shape {out.shape}, expected {bar.values.shape}")
    return BarycentricMap(bar.indices, out, bar.weights, bar.dropped, bar.source_atoms)
