"""Exact discrete optimal transport.

The solver is a transportation (network) simplex on the bipartite graph of
source and target atoms.  A basis is a spanning tree of ``n + m - 1`` cells;
pivots use Dantzig's most-negative reduced cost, falling back to Bland's
lowest-index rule after a run of degenerate pivots, with lowest-index
tie-breaking for the leaving cell.  Plans returned are vertices of the
transportation polytope, hence valid Danskin subgradients of the optimal
value as a function of the cost matrix.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import TOL
from .measure import Coupling, DiscreteMeasure, MeasureError, pushforward


class OTError(ValueError):
    """Invalid transport problem (shapes, non-finite costs)."""


class SimplexIterationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# ground costs


@dataclass(frozen=True, eq=False)
class CostFunction:
    """Ground cost ``c(x, y)``.

    ``kind`` is ``"sqeuclidean"``, ``"quadratic"`` (``(x-y)^T P (x-y)`` with
    ``P`` symmetric positive definite) or ``"pnorm"`` (``||x-y||^p`` for the
    ``l2`` or ``linf`` norm).
    """

    kind: str
    P: Optional[np.ndarray] = None
    p: float = 2.0
    norm: str = "l2"

    def __post_init__(self):
        if self.kind not in ("sqeuclidean", "quadratic", "pnorm"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.kind == "quadratic":
            P = np.atleast_2d(np.asarray(self.P, dtype=np.float64))
            if P.shape[0] != P.shape[1] or not np.allclose(P, P.T, atol=1e-12):
                raise ValueError("quadratic cost needs a symmetric square matrix")
            try:
                np.linalg.cholesky(P)
            except np.linalg.LinAlgError:
                raise ValueError("quadratic cost matrix must be positive definite") from None
            P = P.copy()
            P.setflags(write=False)
            object.__setattr__(self, "P", P)
        if self.kind == "pnorm":
            if not self.p > 0:
                raise ValueError("pnorm cost needs p > 0")
            if self.norm not in ("l2", "linf"):
                raise ValueError("pnorm cost norm must be 'l2' or 'linf'")

    # constructors
    @classmethod
    def squared_euclidean(cls) -> "CostFunction":
        return cls("sqeuclidean")

    @classmethod
    def quadratic_form(cls, P) -> "CostFunction":
        return cls("quadratic", P=np.asarray(P, dtype=np.float64))

    @classmethod
    def norm_power(cls, p: float, norm: str = "l2") -> "CostFunction":
        return cls("pnorm", p=float(p), norm=norm)

    @property
    def metric_matrix(self) -> Optional[np.ndarray]:
        """``P`` for quadratic costs (identity-free for squared Euclidean)."""
        return self.P if self.kind == "quadratic" else None

    def is_quadratic(self) -> bool:
        return self.kind in ("sqeuclidean", "quadratic")

    def __call__(self, x, y) -> float:
        return float(self.matrix(np.atleast_2d(x), np.atleast_2d(y))[0, 0])

    def matrix(self, X, Y) -> np.ndarray:
        """Pairwise cost matrix ``M[i, j] = c(X[i], Y[j])``."""
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[1] != Y.shape[1]:
            raise OTError(f"cost between dimensions {X.shape[1]} and {Y.shape[1]}")
        if self.kind == "sqeuclidean":
            D = X[:, None, :] - Y[None, :, :]
            return np.einsum("ijk,ijk->ij", D, D)
        if self.kind == "quadratic":
            if self.P.shape[0] != X.shape[1]:
                raise OTError("quadratic cost matrix size does not match the point dimension")
            D = X[:, None, :] - Y[None, :, :]
            return np.einsum("ijk,kl,ijl->ij", D, self.P, D)
        D = X[:, None, :] - Y[None, :, :]
        if self.norm == "l2":
            r = np.sqrt(np.einsum("ijk,ijk->ij", D, D))
        else:
            r = np.max(np.abs(D), axis=-1)
        return r**self.p

    def grad_x(self, X, Y, plan) -> np.ndarray:
        """``G[i] = sum_j plan[i, j] * grad_x c(X[i], Y[j])``.

        At points where the cost is not differentiable (zero distance for
        ``p <= 1``, ties in the ``linf`` norm) one element of the Clarke
        subdifferential is used: zero at zero distance, lowest-index
        coordinate for ties.
        """
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        plan = np.asarray(plan, dtype=np.float64)
        a = plan.sum(axis=1)
        if self.kind == "sqeuclidean":
            return 2.0 * (a[:, None] * X - plan @ Y)
        if self.kind == "quadratic":
            return 2.0 * (a[:, None] * X - plan @ Y) @ self.P
        D = X[:, None, :] - Y[None, :, :]
        if self.norm == "l2":
            r = np.sqrt(np.einsum("ijk,ijk->ij", D, D))
            with np.errstate(divide="ignore", invalid="ignore"):
                coef = np.where(r > 0, self.p * r ** (self.p - 2.0), 0.0)
            return np.einsum("ij,ij,ijk->ik", plan, coef, D)
        absD = np.abs(D)
        k = np.argmax(absD, axis=-1)
        r = np.take_along_axis(absD, k[..., None], axis=-1)[..., 0]
        sgn = np.sign(np.take_along_axis(D, k[..., None], axis=-1)[..., 0])
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(r > 0, self.p * r ** (self.p - 1.0), 0.0) * sgn * plan
        G = np.zeros_like(X)
        for kk in range(X.shape[1]):
            G[:, kk] = np.sum(np.where(k == kk, coef, 0.0), axis=1)
        return G

    def describe(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "quadratic":
            d["P"] = self.P.tolist()
        if self.kind == "pnorm":
            d.update(p=self.p, norm=self.norm)
        return d

    @classmethod
    def from_description(cls, d: dict) -> "CostFunction":
        kind = d.get("kind", "sqeuclidean")
        if kind == "quadratic":
            return cls.quadratic_form(d["P"])
        if kind == "pnorm":
            return cls.norm_power(d.get("p", 2.0), d.get("norm", "l2"))
        return cls.squared_euclidean()


SQEUCLIDEAN = CostFunction.squared_euclidean()


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Cost matrix together with the data it was assembled from."""

    entries: np.ndarray
    source: Optional[np.ndarray] = None
    target: Optional[np.ndarray] = None
    cost: Optional[CostFunction] = None

    @classmethod
    def build(cls, X, Y, cost: CostFunction) -> "CostMatrix":
        return cls(cost.matrix(X, Y), np.asarray(X), np.asarray(Y), cost)

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf).writerows(np.asarray(self.entries).tolist())
        return buf.getvalue()


# ---------------------------------------------------------------------------
# transportation simplex


@dataclass
class SimplexStats:
    pivots: int = 0
    degenerate_pivots: int = 0
    bland_pivots: int = 0


def _initial_basis(a, b, C):
    """Matrix-minimum rule producing a spanning-tree basis of n+m-1 cells."""
    n, m = C.shape
    supply = a.copy()
    demand = b.copy()
    row_alive = np.ones(n, dtype=bool)
    col_alive = np.ones(m, dtype=bool)
    nrow, ncol = n, m
    cells = []
    flows = []
    for idx in np.argsort(C, axis=None, kind="stable"):
        i, j = divmod(int(idx), m)
        if not (row_alive[i] and col_alive[j]):
            continue
        x = min(supply[i], demand[j])
        cells.append((i, j))
        flows.append(x)
        row_done = supply[i] <= demand[j]
        col_done = demand[j] <= supply[i]
        supply[i] -= x
        demand[j] -= x
        if row_done and col_done:
            kill_row = nrow > 1
        elif row_done:
            kill_row = nrow > 1
        else:
            kill_row = ncol == 1
        if kill_row:
            row_alive[i] = False
            nrow -= 1
        else:
            col_alive[j] = False
            ncol -= 1
        if nrow == 0 or ncol == 0 or len(cells) == n + m - 1:
            break
    return cells, flows


def _hang_subtree(q, p, adj, C, n, pot, parent, depth):
    """Attach the subtree containing ``q`` below ``p`` and refresh its
    parent pointers, depths and potentials (``u_i + v_j = C_ij`` on tree edges)."""
    parent[q] = p
    stack = [q]
    while stack:
        u = stack.pop()
        pu = parent[u]
        depth[u] = depth[pu] + 1 if pu >= 0 else 0
        if pu >= 0:
            pot[u] = (C[pu, u - n] if u >= n else C[u, pu - n]) - pot[pu]
        for v in adj[u]:
            if v != pu:
                parent[v] = u
                stack.append(v)


def _network_simplex(a, b, C, max_iter=None, degenerate_switch=None, stats=None):
    n, m = C.shape
    N = n + m
    cells, flows = _initial_basis(a, b, C)
    flow = dict(zip(cells, flows))
    adj = [set() for _ in range(N)]  # row i -> node i, column j -> node n + j
    for i, j in cells:
        adj[i].add(n + j)
        adj[n + j].add(i)

    scale = max(1.0, float(np.max(np.abs(C))))
    eps = 1e-12 * scale * max(1, N)
    max_iter = max_iter or 50 * N * N + 1000
    degenerate_switch = degenerate_switch or max(50, N)
    bland = False
    streak = 0
    stats = stats if stats is not None else SimplexStats()
    pot = np.zeros(N)
    parent = [-1] * N
    depth = [0] * N
    _hang_subtree(0, -1, adj, C, n, pot, parent, depth)  # rooted at row 0

    for _ in range(max_iter):
        red = C - pot[:n, None] - pot[None, n:]
        if bland:
            cand = np.flatnonzero(red.ravel() < -eps)
            if cand.size == 0:
                break
            e = int(cand[0])
        else:
            e = int(np.argmin(red))
            if red.flat[e] >= -eps:
                break
        ei, ej = divmod(e, m)

        # cycle: tree path from column node ej back to row node ei
        u, v = n + ej, ei
        up_u, up_v = [], []
        while depth[u] > depth[v]:
            up_u.append(u)
            u = parent[u]
        while depth[v] > depth[u]:
            up_v.append(v)
            v = parent[v]
        while u != v:
            up_u.append(u)
            up_v.append(v)
            u = parent[u]
            v = parent[v]
        path = up_u + [u] + up_v[::-1]
        edges = []
        for k in range(len(path) - 1):
            p, q = path[k], path[k + 1]
            edges.append((p, q - n) if p < n else (q, p - n))
        minus = edges[0::2]
        plus = edges[1::2]
        theta = min(flow[c] for c in minus)
        leave = min((c for c in minus if flow[c] == theta), key=lambda c: c[0] * m + c[1])
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        del flow[leave]
        flow[(ei, ej)] = theta

        li, lj = leave[0], n + leave[1]
        child = lj if parent[lj] == li else li
        adj[li].discard(lj)
        adj[lj].discard(li)
        # which endpoint of the entering edge sits below the cut?
        w = ei
        while depth[w] > depth[child]:
            w = parent[w]
        q, p = (ei, n + ej) if w == child else (n + ej, ei)
        adj[ei].add(n + ej)
        adj[n + ej].add(ei)
        _hang_subtree(q, p, adj, C, n, pot, parent, depth)

        stats.pivots += 1
        if bland:
            stats.bland_pivots += 1
        if theta <= 0.0:
            stats.degenerate_pivots += 1
            streak += 1
            if streak >= degenerate_switch:
                bland = True
        else:
            streak = 0
            bland = False
    else:
        raise SimplexIterationError(f"network simplex did not converge in {max_iter} pivots")

    P = np.zeros((n, m))
    for (i, j), x in flow.items():
        P[i, j] = x
    return P, pot[:n].copy(), pot[n:].copy()


def _check_problem(a, b, M):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    M = np.asarray(getattr(M, "entries", M), dtype=np.float64)
    if M.ndim != 2 or M.shape != (a.size, b.size):
        raise OTError(f"cost matrix shape {M.shape} does not match weights ({a.size}, {b.size})")
    if not np.all(np.isfinite(M)):
        raise OTError("cost matrix has non-finite entries")
    if np.any(a < 0) or np.any(b < 0):
        raise OTError("negative weights")
    for name, w in (("a", a), ("b", b)):
        if abs(w.sum() - 1.0) > TOL.weight_renormalise:
            raise OTError(f"weights {name} sum to {w.sum()!r}, expected 1")
    return a / a.sum(), b / b.sum(), M


def solve_kantorovich(a, b, M, stats: Optional[SimplexStats] = None) -> tuple[Coupling, float]:
    """Optimal plan and value of ``min_{pi in Pi(a, b)} <pi, M>``.

    The plan is a vertex of the transportation polytope (at most
    ``n + m - 1`` nonzero entries).  Zero-weight rows and columns are
    stripped before solving and come back as zero rows/columns.
    """
    a, b, M = _check_problem(a, b, M)
    rows = np.flatnonzero(a > 0)
    cols = np.flatnonzero(b > 0)
    ar, bc = a[rows], b[cols]
    bc = bc * (ar.sum() / bc.sum())
    sub, _, _ = _network_simplex(ar, bc, M[np.ix_(rows, cols)], stats=stats)
    sub = np.maximum(sub, 0.0)
    P = np.zeros(M.shape)
    P[np.ix_(rows, cols)] = sub
    plan = Coupling(P, a, b)
    return plan, float(np.sum(P * M))


def danskin_subgradient(a, b, M) -> Coupling:
    """One optimal plan, an element of the Clarke subdifferential of
    ``M -> W(a, b, M)`` at ``M``."""
    return solve_kantorovich(a, b, M)[0]


def transport_cost(mu: DiscreteMeasure, nu: DiscreteMeasure, c: CostFunction = SQEUCLIDEAN) -> float:
    if mu.dim != nu.dim and c.kind != "pnorm":
        raise OTError(f"measures of dimension {mu.dim} and {nu.dim}")
    M = c.matrix(mu.points, nu.points)
    return solve_kantorovich(mu.weights, nu.weights, M)[1]


@dataclass
class MapCost:
    value: float
    via_pushforward: float
    via_source: float
    plan: Coupling = field(repr=False)


def map_problem_cost(mu: DiscreteMeasure, nu: DiscreteMeasure, g: Callable, c: CostFunction = SQEUCLIDEAN,
                     vectorized: bool = False) -> MapCost:
    """``T_c(g # mu, nu)`` computed two ways.

    Once on the image measure, once as an OT problem between ``mu`` and
    ``nu`` with the modified cost ``c(g(x_i), y_j)``.  Both agree whenever
    the solver is exact; disagreement beyond ``1e-9`` raises.
    """
    image = pushforward(mu, g, vectorized=vectorized)
    v1 = transport_cost(image, nu, c)
    M = c.matrix(image.points, nu.points)
    plan, v2 = solve_kantorovich(mu.weights, nu.weights, M)
    if abs(v1 - v2) > TOL.value_abs + TOL.value_rel * max(abs(v1), abs(v2)):
        raise AssertionError(f"change-of-variables routes disagree: {v1!r} vs {v2!r}")
    return MapCost(v2, v1, v2, plan)


def plan_to_csv(plan: Coupling) -> str:
    buf = io.StringIO()
    csv.writer(buf).writerows(plan.matrix.tolist())
    return buf.getvalue()


__all__ = [
    "CostFunction",
    "CostMatrix",
    "MapCost",
    "MeasureError",
    "OTError",
    "SQEUCLIDEAN",
    "SimplexStats",
    "danskin_subgradient",
    "map_problem_cost",
    "plan_to_csv",
    "solve_kantorovich",
    "transport_cost",
]
