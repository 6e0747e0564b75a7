"""Approximating a coupling by a deterministic one, ``(I, g) # mu``.

For a product-space cost of the separable form
``C((x1, x2), (y1, y2)) = h(c1(x1, y1), c2(x2, y2))`` with ``c1(x, x) = 0``,
``h(u, v) >= v`` and ``h(0, v) = v``, the distance of ``(I, g) # mu`` to a
coupling ``gamma`` of ``mu`` and ``nu`` lies between ``T_c2(g # mu, nu)`` and
the cost of ``gamma`` itself under ``c2(g(x), y)``, so it equals
``T_c2(g # mu, nu)`` when ``gamma`` is optimal for that cost.  This module
lifts such costs, computes the product-space distance exactly and compares
the two formulations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .config import TOL
from .measure import Coupling, DiscreteMeasure
from .otcore import CostFunction, solve_kantorovich


class PlanApproxError(ValueError):
    pass


@dataclass(frozen=True)
class LpPowerCost:
    """``|x - y|_p^s`` for any ``p >= 1`` (including ``inf``) and ``s > 0``."""

    p: float = 2.0
    s: float = 2.0

    def __post_init__(self):
        if not (self.p >= 1 and self.s > 0):
            raise PlanApproxError(f"need p >= 1 and s > 0, got p={self.p!r}, s={self.s!r}")

    def matrix(self, X, Y) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        D = np.abs(X[:, None, :] - Y[None, :, :])
        if np.isinf(self.p):
            r = D.max(axis=-1)
        else:
            r = np.sum(D**self.p, axis=-1) ** (1.0 / self.p)
        return r**self.s


def _combine(kind: str, q: float, u, v):
    if kind == "sum":
        return u + v
    if kind == "max":
        return np.maximum(u, v)
    # (u^(1/q) + v^(1/q))^q
    return (u ** (1.0 / q) + v ** (1.0 / q)) ** q


PairCost = Union[CostFunction, LpPowerCost]


@dataclass(frozen=True)
class SeparableProductCost:
    """``C((x1, x2), (y1, y2)) = h(c1(x1, y1), c2(x2, y2))`` with ``x1`` in
    ``R^k``.

    ``combiner`` is ``"sum"``, ``"max"``, ``"power"`` (uses ``q``) or a
    vectorised callable ``h(u, v)``.
    """

    c1: PairCost
    c2: PairCost
    k: int
    combiner: Union[str, Callable] = "sum"
    q: float = 1.0

    def __post_init__(self):
        if isinstance(self.combiner, str) and self.combiner not in ("sum", "max", "power"):
            raise PlanApproxError(f"unknown combiner {self.combiner!r}")
        if self.k < 1:
            raise PlanApproxError("source dimension must be positive")
        if self.combiner == "power" and not self.q > 0:
            raise PlanApproxError("q must be positive")

    def h(self, u, v):
        if callable(self.combiner):
            return np.asarray(self.combiner(u, v), dtype=np.float64)
        return _combine(self.combiner, self.q, u, v)

    def validate(self, d: int, n_grid: int = 41, n_points: int = 32, seed: int = 0):
        """Check ``h(u, v) >= v``, ``h(0, v) = v`` on a grid and
        ``c1(x, x) = 0`` on random points; raises on failure."""
        t = np.concatenate([[0.0], np.geomspace(1e-6, 1e6, n_grid - 1)])
        U, V = np.meshgrid(t, t, indexing="ij")
        H = self.h(U, V)
        tol = 1e-12 * (1.0 + np.abs(V))
        if np.any(H < V - tol):
            i, j = np.unravel_index(np.argmin(H - V), H.shape)
            raise PlanApproxError(f"h(u, v) < v at u={U[i, j]!r}, v={V[i, j]!r}")
        if np.any(np.abs(H[0] - t) > 1e-12 * (1.0 + t)):
            raise PlanApproxError("h(0, v) differs from v")
        X = np.random.default_rng(seed).normal(size=(n_points, self.k)) * 3
        if np.any(np.abs(np.diag(self.c1.matrix(X, X))) > 0):
            raise PlanApproxError("c1(x, x) is not zero")
        if d < 1:
            raise PlanApproxError("target dimension must be positive")


@dataclass(frozen=True)
class LiftedCost:
    """Evaluator of a separable cost on concatenated vectors ``(x1, x2)``."""

    spec: SeparableProductCost
    d: int

    @property
    def dim(self) -> int:
        return self.spec.k + self.d

    def matrix(self, A, B) -> np.ndarray:
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        if A.shape[1] != self.dim or B.shape[1] != self.dim:
            raise PlanApproxError(f"points must have dimension {self.dim}")
        k = self.spec.k
        return self.spec.h(self.spec.c1.matrix(A[:, :k], B[:, :k]), self.spec.c2.matrix(A[:, k:], B[:, k:]))

    def __call__(self, a, b) -> float:
        return float(self.matrix(a, b)[0, 0])


def lift_cost(spec: SeparableProductCost, d: int, validate: bool = True) -> LiftedCost:
    if validate:
        spec.validate(d)
    return LiftedCost(spec, d)


def _map_values(mu: DiscreteMeasure, g) -> np.ndarray:
    if callable(g):
        G = np.vstack([np.atleast_1d(np.asarray(g(x), dtype=np.float64)) for x in mu.points])
    else:
        G = np.asarray(g, dtype=np.float64)
        if G.ndim == 1:
            G = G[:, None]
    if G.shape[0] != mu.size or not np.all(np.isfinite(G)):
        raise PlanApproxError("map values must be finite, one row per source atom")
    return G


def graph_measure(mu: DiscreteMeasure, g) -> DiscreteMeasure:
    """``(I, g) # mu`` on the concatenated space."""
    return DiscreteMeasure(np.hstack([mu.points, _map_values(mu, g)]), mu.weights)


def coupling_measure(mu: DiscreteMeasure, nu_points, gamma: Coupling) -> DiscreteMeasure:
    """The coupling as a discrete measure on pairs ``(x_i, y_j)`` (support
    only)."""
    Y = np.asarray(nu_points, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    P = gamma.matrix
    if P.shape != (mu.size, Y.shape[0]):
        raise PlanApproxError(f"coupling of shape {P.shape} for {mu.size} source and {Y.shape[0]} target atoms")
    if np.max(np.abs(P.sum(axis=1) - mu.weights)) > TOL.marginal:
        raise PlanApproxError("the first marginal of the coupling differs from the source weights")
    I, J = np.nonzero(P > 0)
    return DiscreteMeasure(np.hstack([mu.points[I], Y[J]]), P[I, J])


def plan_distance(mu: DiscreteMeasure, g, gamma: Coupling, nu_points, C) -> float:
    """``T_C((I, g) # mu, gamma)`` by an exact OT solve on the product
    space; ``C`` is any cost with a ``matrix`` method on concatenated
    points."""
    src = graph_measure(mu, g)
    tgt = coupling_measure(mu, nu_points, gamma)
    return solve_kantorovich(src.weights, tgt.weights, C.matrix(src.points, tgt.points))[1]


@dataclass
class EquivalenceReport:
    """``lhs = T_c2(g # mu, nu)``, ``rhs = T_C((I, g) # mu, gamma)`` and
    ``upper = sum_ij gamma_ij c2(g(x_i), y_j)``."""

    lhs: float
    rhs: float
    upper: float
    asserted: bool

    @property
    def gap(self) -> float:
        return abs(self.rhs - self.lhs)

    @property
    def gamma_optimal(self) -> bool:
        """Whether ``gamma`` is an optimal plan for ``c2(g(x), y)``."""
        return self.upper - self.lhs <= 1e-8 * (1.0 + abs(self.lhs))


def equivalence_check(mu: DiscreteMeasure, nu: DiscreteMeasure, g, gamma: Coupling, C, c2: Optional[PairCost] = None
                      ) -> EquivalenceReport:
    """Compare the map and plan formulations for one coupling.

    For a separable cost (a ``LiftedCost``) and any ``gamma`` in
    ``Pi(mu, nu)``, ``lhs <= rhs <= upper``: dropping ``c1`` gives the lower
    bound, and the coupling that keeps ``x = y1`` gives the upper one.  So
    the two formulations agree whenever ``gamma`` is optimal for
    ``c2(g(x), y)``, but not for an arbitrary coupling (with
    ``mu = nu = (delta_0 + delta_1) / 2``, ``g = I`` and the anti-diagonal
    coupling, ``lhs = 0`` and ``rhs = 1``).  Both inequalities are asserted
    (tolerance ``1e-8 (1 + |lhs|)``).  For other product costs ``c2`` must
    be given and nothing is asserted.
    """
    G = _map_values(mu, g)
    if isinstance(C, LiftedCost):
        c2, asserted = C.spec.c2, True
    elif c2 is None:
        raise PlanApproxError("c2 is required for a cost that is not a lifted separable cost")
    else:
        asserted = False
    if np.max(np.abs(gamma.matrix.sum(axis=0) - nu.weights)) > TOL.marginal:
        raise PlanApproxError("the second marginal of the coupling differs from the target weights")
    M2 = c2.matrix(G, nu.points)
    lhs = solve_kantorovich(mu.weights, nu.weights, M2)[1]
    rhs = plan_distance(mu, G, gamma, nu.points, C)
    upper = float(np.sum(gamma.matrix * M2))
    tol = 1e-8 * (1.0 + abs(lhs))
    if asserted and not (lhs <= rhs + tol and rhs <= upper + tol):
        raise AssertionError(f"bounds fail: {lhs!r} <= {rhs!r} <= {upper!r}")
    return EquivalenceReport(lhs, rhs, upper, asserted)
