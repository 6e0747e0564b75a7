"""Convex QCQPs with concave quadratic inequality constraints.

Problems have the form

    minimise   1/2 z^T H z + f^T z + c0        (H positive semidefinite)
    subject to q_k(z) = z_I^T A_k z_I + b_k^T z_I + c_k >= 0,  A_k <= 0,

where each constraint touches a small index set ``I`` of the decision
vector.  A linear objective may also be maximised.  Constraints are stored
in groups sharing the same local size so that values, gradients and Hessian
contributions are computed in batches.

The solver is an augmented Lagrangian method.  Each subproblem
``min_z f(z) + 1/(2 rho) sum_k (max(0, lam_k - rho q_k(z))^2 - lam_k^2)`` is
convex and once continuously differentiable; it is solved by a damped
semismooth Newton method (default) or by accelerated gradient descent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import TOL


class QcqpError(ValueError):
    """Malformed problem: non-PSD objective, convex constraint, bad shapes."""


@dataclass(frozen=True, eq=False)
class ConcaveQuadraticConstraint:
    """``z[idx]^T A z[idx] + b^T z[idx] + c >= 0`` with ``A`` negative semidefinite."""

    idx: np.ndarray
    A: np.ndarray
    b: np.ndarray
    c: float

    def value(self, z) -> float:
        v = np.asarray(z, dtype=np.float64)[self.idx]
        return float(v @ self.A @ v + self.b @ v + self.c)


@dataclass(eq=False)
class ConstraintGroup:
    idx: np.ndarray  # (K, s) int
    A: np.ndarray  # (K, s, s), possibly a broadcast view
    b: np.ndarray  # (K, s)
    c: np.ndarray  # (K,)

    @property
    def size(self) -> int:
        return self.idx.shape[0]

    def values(self, z):
        Z = z[self.idx]
        return np.einsum("ks,kst,kt->k", Z, self.A, Z) + np.einsum("ks,ks->k", self.b, Z) + self.c

    def local_grads(self, z):
        Z = z[self.idx]
        return 2.0 * np.einsum("kst,kt->ks", self.A, Z) + self.b


def _psd_check(M, name, sign=1.0):
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return
    eig = np.linalg.eigvalsh(sign * M)
    scale = 1.0 + np.max(np.abs(eig), axis=-1, initial=0.0)
    if np.any(eig.min(axis=-1) < -1e-8 * scale):
        raise QcqpError(f"{name} has eigenvalue {float(sign * eig.min()):.3e} of the wrong sign")


class QcqpProblem:
    """Objective plus groups of concave quadratic constraints.

    ``interior_point`` is an optional strictly feasible point.  When given,
    the solver uses it to pull a slightly infeasible solution back into the
    feasible set (a convex combination suffices because every constraint is
    concave).
    """

    def __init__(self, dim: int, H=None, f=None, const: float = 0.0, sense: str = "min",
                 interior_point=None):
        if dim <= 0:
            raise QcqpError("dimension must be positive")
        self.dim = int(dim)
        if sense not in ("min", "max"):
            raise QcqpError(f"unknown sense {sense!r}")
        self.H = None if H is None else np.array(H, dtype=np.float64)
        if self.H is not None:
            if self.H.shape != (dim, dim) or not np.allclose(self.H, self.H.T, atol=1e-12):
                raise QcqpError("objective matrix must be symmetric and match the dimension")
            if sense == "max":
                raise QcqpError("only linear objectives may be maximised")
            _psd_check(self.H, "objective matrix")
        self.f = np.zeros(dim) if f is None else np.array(f, dtype=np.float64).ravel()
        if self.f.shape != (dim,):
            raise QcqpError("objective vector has the wrong length")
        self.const = float(const)
        self.sense = sense
        self.groups: list[ConstraintGroup] = []
        self.interior_point = None if interior_point is None else np.asarray(interior_point, float)

    # -- assembly ----------------------------------------------------------
    def add_constraints(self, idx, A, b, c, validate: bool = True) -> None:
        """Add ``K`` constraints of local size ``s``.  ``A`` may be a single
        ``(s, s)`` matrix shared by every constraint."""
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        K, s = idx.shape
        A = np.asarray(A, dtype=np.float64)
        shared = A.ndim == 2
        if validate:
            if np.any(idx < 0) or np.any(idx >= self.dim):
                raise QcqpError("constraint index out of range")
            Acheck = A if shared else A.reshape(-1, s, s)
            if not np.allclose(Acheck, np.swapaxes(Acheck, -1, -2), atol=1e-12):
                raise QcqpError("constraint matrices must be symmetric")
            _psd_check(Acheck, "constraint matrix", sign=-1.0)
        A = np.broadcast_to(A, (K, s, s)) if shared else A.reshape(K, s, s)
        b = np.broadcast_to(np.asarray(b, dtype=np.float64), (K, s))
        c = np.broadcast_to(np.asarray(c, dtype=np.float64).ravel(), (K,))
        self.groups.append(ConstraintGroup(idx, A, np.array(b), np.array(c)))

    def add_constraint(self, con: ConcaveQuadraticConstraint) -> None:
        self.add_constraints(np.asarray(con.idx)[None, :], np.asarray(con.A)[None], np.asarray(con.b)[None],
                             [con.c])

    @property
    def n_constraints(self) -> int:
        return sum(g.size for g in self.groups)

    # -- evaluation --------------------------------------------------------
    def objective(self, z) -> float:
        z = np.asarray(z, dtype=np.float64)
        v = self.f @ z + self.const
        if self.H is not None:
            v += 0.5 * z @ self.H @ z
        return float(v)

    def constraint_values(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dim,):
            raise QcqpError(f"point has shape {z.shape}, expected ({self.dim},)")
        if not self.groups:
            return np.zeros(0)
        return np.concatenate([g.values(z) for g in self.groups])

    def violation(self, z) -> float:
        q = self.constraint_values(z)
        return float(np.max(-q, initial=0.0))

    # -- debug dump --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "sense": self.sense,
            "H": None if self.H is None else self.H.tolist(),
            "f": self.f.tolist(),
            "const": self.const,
            "groups": [
                {"idx": g.idx.tolist(), "A": np.asarray(g.A).tolist(), "b": g.b.tolist(), "c": g.c.tolist()}
                for g in self.groups
            ],
            "interior_point": None if self.interior_point is None else self.interior_point.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "QcqpProblem":
        p = cls(d["dim"], d.get("H"), d.get("f"), d.get("const", 0.0), d.get("sense", "min"),
                d.get("interior_point"))
        for g in d.get("groups", []):
            p.add_constraints(g["idx"], g["A"], g["b"], g["c"])
        return p


def check_feasible(problem: QcqpProblem, point, tol: float = 1e-9) -> bool:
    """True iff every constraint is at least ``-tol`` at ``point``."""
    return bool(np.all(problem.constraint_values(point) >= -tol))


@dataclass
class QcqpResult:
    x: np.ndarray
    value: float
    status: str  # "optimal" | "maxIterReached" | "infeasible"
    violation: float
    stationarity: float
    multipliers: np.ndarray = field(repr=False)
    outer_iterations: int = 0
    inner_iterations: int = 0
    best_violation: float = math.inf

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class _Augmented:
    """Augmented Lagrangian of a problem in minimisation form."""

    def __init__(self, problem: QcqpProblem):
        self.p = problem
        self.sign = -1.0 if problem.sense == "max" else 1.0
        self.H = problem.H
        self.f = self.sign * problem.f
        self.n = problem.dim
        self.splits = np.cumsum([0] + [g.size for g in problem.groups])

    def fval(self, z):
        v = self.f @ z
        if self.H is not None:
            v += 0.5 * z @ self.H @ z
        return v

    def fgrad(self, z):
        g = self.f.copy()
        if self.H is not None:
            g += self.H @ z
        return g

    def q(self, z):
        return self.p.constraint_values(z)

    def value(self, z, lam, rho):
        s = np.maximum(0.0, lam - rho * self.q(z))
        return self.fval(z) + (np.sum(s * s) - np.sum(lam * lam)) / (2.0 * rho)

    def grad_and_s(self, z, lam, rho):
        g = self.fgrad(z)
        s_all = np.maximum(0.0, lam - rho * self.q(z))
        for grp, a, b in zip(self.p.groups, self.splits[:-1], self.splits[1:]):
            s = s_all[a:b]
            act = s > 0
            if np.any(act):
                G = grp.local_grads(z)[act]
                np.add.at(g, grp.idx[act], -s[act, None] * G)
        return g, s_all

    def hessian(self, z, s_all, rho):
        Hm = np.zeros((self.n, self.n)) if self.H is None else self.H.copy()
        for grp, a, b in zip(self.p.groups, self.splits[:-1], self.splits[1:]):
            s = s_all[a:b]
            act = s > 0
            if not np.any(act):
                continue
            G = grp.local_grads(z)[act]
            loc = rho * G[:, :, None] * G[:, None, :] - 2.0 * s[act, None, None] * grp.A[act]
            I = grp.idx[act]
            np.add.at(Hm, (I[:, :, None], I[:, None, :]), loc)
        return Hm

    def lagrangian_grad(self, z, lam):
        g = self.fgrad(z)
        for grp, a, b in zip(self.p.groups, self.splits[:-1], self.splits[1:]):
            l = lam[a:b]
            act = l > 0
            if np.any(act):
                np.add.at(g, grp.idx[act], -l[act, None] * grp.local_grads(z)[act])
        return g


def _newton_inner(aug: _Augmented, z, lam, rho, tol, max_iter, state):
    delta = state.setdefault("delta", 1e-10)
    its = 0
    F = aug.value(z, lam, rho)
    for its in range(1, max_iter + 1):
        g, s = aug.grad_and_s(z, lam, rho)
        gscale = 1.0 + np.max(np.abs(aug.fgrad(z)))
        if np.max(np.abs(g)) <= tol * gscale:
            break
        Hm = aug.hessian(z, s, rho)
        diag_scale = 1.0 + np.max(np.abs(np.diag(Hm)))
        while True:
            try:
                Lc = np.linalg.cholesky(Hm + delta * diag_scale * np.eye(aug.n))
                break
            except np.linalg.LinAlgError:
                delta = max(delta * 100.0, 1e-12)
        p = -np.linalg.solve(Lc.T, np.linalg.solve(Lc, g))
        cap = 1e3 * (1.0 + np.max(np.abs(z)))
        pn = np.max(np.abs(p))
        if pn > cap:
            p *= cap / pn
        slope = g @ p
        if slope >= 0:  # numerical breakdown; fall back to steepest descent
            p, slope = -g, -(g @ g)
        alpha = 1.0
        while alpha > 1e-12:
            Fn = aug.value(z + alpha * p, lam, rho)
            if Fn <= F + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        else:
            break  # no decrease possible at working precision
        z = z + alpha * p
        if Fn >= F and np.max(np.abs(alpha * p)) <= 1e-15 * (1 + np.max(np.abs(z))):
            F = Fn
            break
        F = Fn
        if alpha == 1.0:
            delta = max(delta / 10.0, 1e-14)
        elif alpha < 0.1:
            delta = min(delta * 10.0, 1e6)
    state["delta"] = delta
    return z, its


def _apg_inner(aug: _Augmented, z, lam, rho, tol, max_iter, state):
    """Accelerated gradient with backtracking and adaptive restart."""
    Lip = state.setdefault("lip", 1.0)
    y, z_prev, tk = z.copy(), z.copy(), 1.0
    its = 0
    for its in range(1, max_iter + 1):
        g, _ = aug.grad_and_s(y, lam, rho)
        Fy = aug.value(y, lam, rho)
        while True:
            zn = y - g / Lip
            if aug.value(zn, lam, rho) <= Fy - 0.5 * (g @ g) / Lip + 1e-15 * abs(Fy):
                break
            Lip *= 2.0
        tn = 0.5 * (1 + math.sqrt(1 + 4 * tk * tk))
        if (zn - z_prev) @ (g) > 0:  # restart when momentum points uphill
            tk, tn = 1.0, 1.0
        y = zn + ((tk - 1) / tn) * (zn - z_prev)
        z_prev, tk = zn, tn
        Lip *= 0.9
        gz, _ = aug.grad_and_s(zn, lam, rho)
        if np.max(np.abs(gz)) <= tol * (1.0 + np.max(np.abs(aug.fgrad(zn)))):
            break
    state["lip"] = Lip
    return z_prev, its


def pull_back(problem: QcqpProblem, z, interior, steps: int = 60):
    """Smallest move along the segment from ``z`` to a strictly feasible
    ``interior`` point that restores feasibility.

    Every constraint is concave along the segment, so the feasible part of
    it is an interval ending at ``interior`` and bisection applies.
    """
    if np.min(problem.constraint_values(interior), initial=np.inf) <= 0:
        return z, problem.violation(z)
    lo, hi = 0.0, 1.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if problem.violation((1 - mid) * z + mid * interior) > 0:
            lo = mid
        else:
            hi = mid
    z = (1 - hi) * z + hi * interior
    return z, problem.violation(z)


def solve(problem: QcqpProblem, tol: float = TOL.qcqp, max_iter: int = 60, x0=None, inner: str = "newton",
          inner_max_iter: Optional[int] = None, rho0: float = 1.0, rho_max: float = 1e12,
          lam0=None, feas_tol: Optional[float] = None) -> QcqpResult:
    """Solve ``problem`` to constraint violation and scaled KKT stationarity
    below ``tol``.

    ``x0`` warm-starts the primal iterate and ``lam0`` the multipliers.
    ``feas_tol`` (default ``tol``) is the separate bound on constraint
    violation; callers that later check feasibility strictly pass a smaller
    value.
    Stationarity is measured as ``||grad f - sum lam_k grad q_k||_inf``
    relative to ``1 + ||grad f||_inf``.
    """
    aug = _Augmented(problem)
    n, m = problem.dim, problem.n_constraints
    z = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64).ravel()
    if z.shape != (n,):
        raise QcqpError(f"warm start has shape {z.shape}, expected ({n},)")
    lam = np.zeros(m) if lam0 is None else np.array(lam0, dtype=np.float64)
    rho = float(rho0)
    feas_tol = tol if feas_tol is None else float(feas_tol)
    inner_fn = {"newton": _newton_inner, "apg": _apg_inner}[inner]
    inner_max_iter = inner_max_iter or (100 if inner == "newton" else 20000)
    state: dict = {}
    prev_viol = math.inf
    best_viol = math.inf
    stall = 0
    history: list[float] = []
    status = "maxIterReached"
    total_inner = 0
    stat = math.inf
    viol = math.inf
    k = 0
    for k in range(1, max_iter + 1):
        z, its = inner_fn(aug, z, lam, rho, tol / 10.0, inner_max_iter, state)
        total_inner += its
        q = aug.q(z)
        viol = float(np.max(-q, initial=0.0))
        lam = np.maximum(0.0, lam - rho * q)
        gf = aug.fgrad(z)
        stat = float(np.max(np.abs(aug.lagrangian_grad(z, lam)), initial=0.0) / (1.0 + np.max(np.abs(gf))))
        # total complementarity gap, which bounds the suboptimality together with stationarity
        comp = float(np.sum(lam * np.abs(q))) / (1.0 + abs(aug.fval(z)))
        best_viol = min(best_viol, viol)
        if viol <= feas_tol and stat <= tol and comp <= tol:
            status = "optimal"
            break
        if m == 0 and stat <= tol:
            status = "optimal"
            break
        history.append(viol)
        if viol > TOL.qcqp_infeasible and len(history) > 5 and viol >= 0.99 * min(history[-6:-1]):
            stall += 1
            if stall >= 5 and rho >= rho_max:
                status = "infeasible"
                break
        else:
            stall = 0
        if viol > feas_tol and viol > 0.25 * prev_viol:
            rho = min(rho * 10.0, rho_max)
        prev_viol = viol

    if problem.interior_point is not None and viol > feas_tol and status != "infeasible":
        z, viol = pull_back(problem, z, problem.interior_point)
    return QcqpResult(z, problem.objective(z), status, viol, stat, lam, k, total_inner, best_viol)
