"""Maps that are L-Lipschitz gradients of ell-strongly convex potentials.

Data ``(x_i, g_i, phi_i)`` can be interpolated by such a potential exactly
when every pair satisfies the quadratic condition ``Q >= 0`` below.  Fitting a
map to a transport problem then alternates between a convex QCQP over the
values ``(phi_i, g_i)`` with the plan fixed, and an exact OT solve for the
plan with the values fixed.  Out-of-sample evaluation solves two small QCQPs
giving the lowest and highest interpolating potentials at the new point.

With a partition of space into cells, the conditions are only imposed
within each cell, giving a piecewise map.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import qcqp
from .config import TOL
from .measure import DiscreteMeasure
from .otcore import SQEUCLIDEAN, CostFunction, solve_kantorovich


class FitError(RuntimeError):
    """``status`` is ``"infeasible"`` or ``"maxIterReached"`` for QCQP
    failures inside ``fit_map`` and ``"error"`` otherwise."""

    def __init__(self, iteration: int, message: str, status: str = "error"):
        super().__init__(f"outer iteration {iteration}: {message}")
        self.iteration = iteration
        self.status = status


@dataclass(frozen=True)
class SmoothnessParams:
    """Strong convexity ``ell`` and gradient Lipschitz constant ``L`` with
    ``0 <= ell < L`` (the interpolation constants divide by ``1 - ell/L``)."""

    ell: float
    L: float

    def __post_init__(self):
        if not (np.isfinite(self.L) and self.L > 0):
            raise ValueError(f"L must be finite and positive, got {self.L!r}")
        if not (0 <= self.ell < self.L):
            raise ValueError(f"need 0 <= ell < L, got ell={self.ell!r}, L={self.L!r}")

    @property
    def kappa(self) -> float:
        return self.ell / self.L

    @property
    def c1(self) -> float:
        return 1.0 / (2.0 * self.L * (1.0 - self.kappa))

    @property
    def c2(self) -> float:
        return self.ell / (2.0 * (1.0 - self.kappa))

    @property
    def c3(self) -> float:
        return self.ell / (self.L * (1.0 - self.kappa))


def taylor_Q(x, xp, phi, phip, g, gp, params: SmoothnessParams):
    """``phi - phi' - <g', x - x'> - c1 |g - g'|^2 - c2 |x - x'|^2 + c3 <g' - g, x' - x>``.

    Broadcasts over leading dimensions; vectors live on the last axis.
    """
    x, xp, g, gp = (np.asarray(v, dtype=np.float64) for v in (x, xp, g, gp))
    d = x - xp
    dg = g - gp
    return (
        np.asarray(phi, dtype=np.float64)
        - phip
        - np.sum(gp * d, axis=-1)
        - params.c1 * np.sum(dg * dg, axis=-1)
        - params.c2 * np.sum(d * d, axis=-1)
        + params.c3 * np.sum(dg * d, axis=-1)
    )


def _local_form(params: SmoothnessParams, dim: int, delta):
    """``Q`` as a quadratic in ``v = (phi, phi', g, g')`` for the pairs with
    ``x - x' = delta`` (shape ``(K, d)``): returns shared ``A`` and batched
    ``b`` and ``c`` with ``Q = v^T A v + b^T v + c``."""
    s = 2 + 2 * dim
    A = np.zeros((s, s))
    I = np.eye(dim)
    gi, gj = slice(2, 2 + dim), slice(2 + dim, s)
    A[gi, gi] = -params.c1 * I
    A[gj, gj] = -params.c1 * I
    A[gi, gj] = params.c1 * I
    A[gj, gi] = params.c1 * I
    K = delta.shape[0]
    b = np.zeros((K, s))
    b[:, 0] = 1.0
    b[:, 1] = -1.0
    b[:, gi] = params.c3 * delta
    b[:, gj] = -(1.0 + params.c3) * delta
    c = -params.c2 * np.sum(delta * delta, axis=1)
    return A, b, c


@dataclass(frozen=True)
class Partition:
    """Assignment of each atom to one of ``K`` cells."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64).ravel()
        if lab.size and lab.min() < 0:
            raise ValueError("cell labels must be nonnegative")
        object.__setattr__(self, "labels", lab)

    @classmethod
    def single(cls, n: int) -> "Partition":
        return cls(np.zeros(n, dtype=np.int64))

    @classmethod
    def halfspace(cls, points, normal, offset: float = 0.0, margin: float = 1e-12) -> "Partition":
        """Two cells split by ``<normal, x> = offset``; atoms on the
        boundary are rejected."""
        s = np.asarray(points, dtype=np.float64) @ np.asarray(normal, dtype=np.float64) - offset
        if np.any(np.abs(s) <= margin):
            raise ValueError(f"atom {int(np.argmin(np.abs(s)))} lies on the cell boundary")
        return cls((s > 0).astype(np.int64))

    @property
    def n_cells(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def cells(self):
        return [np.flatnonzero(self.labels == k) for k in range(self.n_cells)]


@dataclass(eq=False)
class TaylorWitness:
    """Values ``phi_i`` and gradients ``g_i`` of a potential at ``atoms``."""

    atoms: np.ndarray
    gradients: np.ndarray
    potentials: np.ndarray
    params: SmoothnessParams
    cells: np.ndarray = None

    def __post_init__(self):
        self.atoms = np.atleast_2d(np.asarray(self.atoms, dtype=np.float64))
        self.gradients = np.atleast_2d(np.asarray(self.gradients, dtype=np.float64))
        self.potentials = np.asarray(self.potentials, dtype=np.float64).ravel()
        n = self.atoms.shape[0]
        if self.gradients.shape != self.atoms.shape or self.potentials.shape != (n,):
            raise ValueError("witness arrays have inconsistent shapes")
        self.cells = np.zeros(n, dtype=np.int64) if self.cells is None else Partition(self.cells).labels
        if self.cells.shape != (n,):
            raise ValueError("one cell label per atom is required")

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def pair_values(self, cell: int) -> np.ndarray:
        """Matrix ``Q[i, j]`` over the atoms of one cell."""
        I = np.flatnonzero(self.cells == cell)
        X, G, P = self.atoms[I], self.gradients[I], self.potentials[I]
        return taylor_Q(X[:, None], X[None], P[:, None], P[None], G[:, None], G[None], self.params)

    def min_pair_value(self) -> float:
        vals = [self.pair_values(k).min() for k in np.unique(self.cells)]
        return float(min(vals)) if vals else 0.0

    def to_dict(self) -> dict:
        return {
            "atoms": self.atoms.tolist(),
            "gradients": self.gradients.tolist(),
            "potentials": self.potentials.tolist(),
            "ell": self.params.ell,
            "L": self.params.L,
            "cells": self.cells.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TaylorWitness":
        return cls(d["atoms"], d["gradients"], d["potentials"], SmoothnessParams(d["ell"], d["L"]), d.get("cells"))


def check_interpolable(witness: TaylorWitness, tol: float = TOL.interpolable) -> bool:
    """True iff every within-cell pair satisfies ``Q >= -tol``."""
    return witness.min_pair_value() >= -tol


# ---------------------------------------------------------------------------
# QCQP assembly


def _variable_layout(n: int, d: int):
    phi = np.arange(n)
    grad = n + np.arange(n * d).reshape(n, d)
    return phi, grad


def interior_witness_values(atoms, params: SmoothnessParams):
    """A strictly interpolable point: the quadratic potential with curvature
    ``(ell + L) / 2`` gives ``Q > 0`` for every pair of distinct atoms."""
    m = 0.5 * (params.ell + params.L)
    X = np.asarray(atoms, dtype=np.float64)
    return m * 0.5 * np.sum(X * X, axis=1), m * X


def build_interpolation_qcqp(atoms, cells, params: SmoothnessParams, H=None, f=None, const=0.0) -> qcqp.QcqpProblem:
    """QCQP over ``z = (phi_1..phi_n, g_1..g_n)`` with the interpolation
    constraints for every ordered within-cell pair."""
    X = np.asarray(atoms, dtype=np.float64)
    n, d = X.shape
    phi_idx, g_idx = _variable_layout(n, d)
    phi0, g0 = interior_witness_values(X, params)
    z0 = np.concatenate([phi0, g0.ravel()])
    prob = qcqp.QcqpProblem(n * (d + 1), H, f, const, interior_point=z0)
    cells = np.asarray(cells)
    for k in np.unique(cells):
        I = np.flatnonzero(cells == k)
        if I.size < 2:
            continue
        ii, jj = np.meshgrid(I, I, indexing="ij")
        off = ii != jj
        ii, jj = ii[off], jj[off]
        A, b, c = _local_form(params, d, X[ii] - X[jj])
        idx = np.concatenate([phi_idx[ii, None], phi_idx[jj, None], g_idx[ii], g_idx[jj]], axis=1)
        prob.add_constraints(idx, A, b, c)
    return prob


def _pack(phi, G):
    return np.concatenate([phi, G.ravel()])


def _unpack(z, n, d):
    return z[:n].copy(), z[n:].reshape(n, d).copy()


def _plan_objective(plan, a, Y, P, n, d):
    """Quadratic in ``z`` equal to ``sum_ij plan_ij (g_i - y_j)^T P (g_i - y_j)``."""
    dim = n * (d + 1)
    H = np.zeros((dim, dim))
    for i in range(n):
        s = n + i * d
        H[s : s + d, s : s + d] = 2.0 * a[i] * P
    f = np.zeros(dim)
    f[n:] = (-2.0 * (plan @ Y) @ P).ravel()
    const = float(np.sum(plan.sum(axis=0) * np.einsum("jk,kl,jl->j", Y, P, Y)))
    return H, f, const


# ---------------------------------------------------------------------------
# Algorithm: alternate QCQP and OT steps


@dataclass
class FitResult:
    witness: TaylorWitness
    trace: list = field(default_factory=list)  # dicts {iteration, step, objective}
    plan: Optional[np.ndarray] = None
    status: str = "converged"
    source: Optional[DiscreteMeasure] = None

    @property
    def objective(self) -> float:
        return self.trace[-1]["objective"] if self.trace else float("nan")

    def objectives(self) -> np.ndarray:
        return np.array([t["objective"] for t in self.trace])


def fit_map(mu: DiscreteMeasure, nu: DiscreteMeasure, params: SmoothnessParams,
            cost: CostFunction = SQEUCLIDEAN, partition: Optional[Partition] = None, max_outer: int = 50,
            qcqp_tol: float = TOL.qcqp, stop_decrease: float = 1e-8, inner: str = "newton") -> FitResult:
    """Alternating minimisation of ``T_c(g # mu, nu)`` over gradients of
    potentials in the class, for a convex quadratic cost.

    Starts from an optimal plan between ``mu`` and ``nu``; each outer
    iteration solves the QCQP for the current plan (warm-started, and only
    accepted when it does not increase the objective) and then re-solves
    the OT problem for the new image points.  Stops after ``max_outer``
    iterations or when an iteration decreases the objective by less than
    ``stop_decrease``.
    """
    if not cost.is_quadratic():
        raise ValueError("fit_map needs a convex quadratic cost")
    if mu.dim != nu.dim:
        raise ValueError("source and target must have the same dimension")
    d = mu.dim
    P = np.eye(d) if cost.kind == "sqeuclidean" else cost.P
    labels = Partition.single(mu.size).labels if partition is None else Partition(partition.labels).labels
    if labels.shape != (mu.size,):
        raise ValueError("partition must label every atom")
    X, a = mu.points, mu.weights
    # coincident atoms must share a gradient; merge them (same cell required)
    uniq, inv = np.unique(X, axis=0, return_inverse=True)
    inv = inv.ravel()
    if uniq.shape[0] < X.shape[0]:
        lab = np.full(uniq.shape[0], -1)
        for i, u in enumerate(inv):
            if lab[u] >= 0 and lab[u] != labels[i]:
                raise ValueError(f"atom {i} coincides with an atom of another cell")
            lab[u] = labels[i]
        X, a, labels = uniq, np.bincount(inv, weights=a), lab
    n = X.shape[0]
    Y = nu.points
    b = nu.weights

    plan, _ = solve_kantorovich(a, b, cost.matrix(X, Y))
    pi = plan.matrix
    base = build_interpolation_qcqp(X, labels, params)
    z = base.interior_point.copy()
    lam = None
    trace: list[dict] = []
    status = "maxOuter"
    prev_outer = np.inf
    for it in range(max_outer):
        H, f, const = _plan_objective(pi, a, Y, P, n, d)
        base.H, base.f, base.const = H, f, const
        start_val = base.objective(z)
        res = qcqp.solve(base, tol=qcqp_tol, x0=z, lam0=lam, inner=inner, feas_tol=0.1 * TOL.interpolable)
        if res.status == "infeasible":
            raise FitError(it, f"QCQP declared infeasible (violation {res.best_violation:.3e})", "infeasible")
        feasible = qcqp.check_feasible(base, res.x, TOL.interpolable)
        if feasible and res.value <= start_val:
            z, lam = res.x, res.multipliers
        elif it == 0 and not feasible:
            raise FitError(it, f"QCQP returned an infeasible point ({res.status}, violation {res.violation:.3e})",
                           "maxIterReached")
        phi, G = _unpack(z, n, d)
        trace.append({"iteration": it, "step": "qcqp", "objective": base.objective(z), "qcqp_status": res.status})
        plan, val = solve_kantorovich(a, b, cost.matrix(G, Y))
        # keep the current plan on ties so the trace cannot go up through round-off
        cur = float(np.sum(pi * cost.matrix(G, Y)))
        if val < cur:
            pi = plan.matrix
        else:
            val = cur
        trace.append({"iteration": it, "step": "plan", "objective": val})
        if prev_outer - val < stop_decrease:
            status = "converged"
            break
        prev_outer = val
    phi, G = _unpack(z, n, d)
    wit = TaylorWitness(X, G, phi, params, labels)
    return FitResult(wit, trace, pi, status, DiscreteMeasure(X, a))


# ---------------------------------------------------------------------------
# out-of-sample evaluation


@dataclass
class Bounds:
    phi_lower: float
    grad_lower: np.ndarray
    phi_upper: float
    grad_upper: np.ndarray


def _fixed_reduction(A, b, c, free, fixed_vals):
    """Restrict ``v^T A v + b^T v + c`` to the ``free`` coordinates with the
    others set to ``fixed_vals`` (one row per constraint)."""
    s = A.shape[0]
    fixed = np.setdiff1d(np.arange(s), free)
    Aff = A[np.ix_(free, free)]
    Afk = A[np.ix_(free, fixed)]
    Akk = A[np.ix_(fixed, fixed)]
    bf = b[:, free] + 2.0 * fixed_vals @ Afk.T
    cf = c + np.sum(b[:, fixed] * fixed_vals, axis=1) + np.einsum("ks,st,kt->k", fixed_vals, Akk, fixed_vals)
    return Aff, bf, cf


def _bound_problem(witness: TaylorWitness, x, cell: int, upper: bool, tol: float):
    I = np.flatnonzero(witness.cells == cell)
    if I.size == 0:
        raise ValueError(f"cell {cell} has no atoms")
    d = witness.dim
    Xc, Gc, Pc = witness.atoms[I], witness.gradients[I], witness.potentials[I]
    gi, gj = np.arange(2, 2 + d), np.arange(2 + d, 2 + 2 * d)
    if upper:
        # Q(x_i, x, phi_i, t, g_i, g) >= 0, maximise t
        A, b, c = _local_form(witness.params, d, Xc - x[None, :])
        free = np.concatenate([[1], gj])
        fixed_vals = np.concatenate([Pc[:, None], Gc], axis=1)
    else:
        # Q(x, x_j, t, phi_j, g, g_j) >= 0, minimise t
        A, b, c = _local_form(witness.params, d, x[None, :] - Xc)
        free = np.concatenate([[0], gi])
        fixed_vals = np.concatenate([Pc[:, None], Gc], axis=1)
    Aff, bf, cf = _fixed_reduction(A, b, c, free, fixed_vals)
    # strictly feasible start: gradient of the mid-curvature quadratic, t far enough out
    g0 = 0.5 * (witness.params.ell + witness.params.L) * x
    q_rest = np.einsum("s,st,t->", g0, Aff[1:, 1:], g0) + bf[:, 1:] @ g0 + cf
    scale = 1.0 + np.max(np.abs(q_rest))
    t0 = np.min(q_rest) - scale if upper else np.max(-q_rest) + scale
    f = np.zeros(d + 1)
    f[0] = 1.0
    prob = qcqp.QcqpProblem(d + 1, None, f, 0.0, "max" if upper else "min",
                            interior_point=np.concatenate([[t0], g0]))
    prob.add_constraints(np.broadcast_to(np.arange(d + 1), (I.size, d + 1)), Aff, bf, cf)
    res = qcqp.solve(prob, tol=tol, x0=prob.interior_point, max_iter=80, feas_tol=0.1 * TOL.interpolable)
    if res.status == "infeasible":
        raise FitError(-1, "bound problem infeasible: the witness is not interpolable", "infeasible")
    return res


def eval_bounds(witness: TaylorWitness, x, cell: Optional[int] = None, tol: float = 1e-9) -> Bounds:
    """Lowest and highest interpolating potentials at ``x`` and their
    gradients, using the data of one cell."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape != (witness.dim,):
        raise ValueError(f"point has dimension {x.size}, expected {witness.dim}")
    if cell is None:
        cells = np.unique(witness.cells)
        if cells.size > 1:
            raise ValueError("the witness has several cells; pass the cell of x")
        cell = int(cells[0])
    lo = _bound_problem(witness, x, cell, upper=False, tol=tol)
    hi = _bound_problem(witness, x, cell, upper=True, tol=tol)
    phi_l, phi_u = float(lo.x[0]), float(hi.x[0])
    if phi_l > phi_u + TOL.witness * (1 + abs(phi_u)):
        raise FitError(-1, f"lower bound {phi_l!r} exceeds upper bound {phi_u!r}")
    return Bounds(phi_l, lo.x[1:].copy(), phi_u, hi.x[1:].copy())


def _n_threads() -> int:
    try:
        return max(1, int(os.environ.get("CATMAP_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(witness: TaylorWitness, X, cells=None, which: str = "upper") -> np.ndarray:
    """Map values at new points: the gradient of the upper (default) or
    lower bounding potential."""
    if which not in ("upper", "lower"):
        raise ValueError("which must be 'upper' or 'lower'")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    cells = [None] * X.shape[0] if cells is None else list(np.asarray(cells).ravel())

    def one(k):
        bnd = eval_bounds(witness, X[k], cells[k])
        return bnd.grad_upper if which == "upper" else bnd.grad_lower

    workers = _n_threads()
    if workers == 1:
        rows = [one(k) for k in range(X.shape[0])]
    else:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, range(X.shape[0])))
    return np.vstack(rows) if rows else np.zeros((0, witness.dim))
