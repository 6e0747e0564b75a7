"""One-dimensional transport through quantile functions.

In 1D the squared-Euclidean map problem over nondecreasing maps reduces to a
weighted least-squares projection of the barycentric projection of the
monotone (quantile) plan.  For the class of maps whose slopes lie in
``[ell, L]`` that projection is a chain-constrained QP solved exactly here.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .barycentric import barycentric_projection
from .config import TOL
from .measure import Coupling, DiscreteMeasure, merge_duplicates

#: value returned by a pseudo-inverse when its defining set is unbounded above
POS_INF = math.inf
#: value returned by a pseudo-inverse when its defining set is unbounded below
NEG_INF = -math.inf


class QuantileError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Nondecreasing piecewise-constant function on the real line.

    Takes value ``base`` left of ``jumps[0]`` and ``levels[k]`` between
    ``jumps[k]`` and ``jumps[k + 1]``.  At a jump the function is
    right-continuous (takes the new level) unless ``right_continuous`` is
    false.
    """

    jumps: np.ndarray
    levels: np.ndarray
    base: float = 0.0
    right_continuous: bool = True

    def __post_init__(self):
        x = np.asarray(self.jumps, dtype=np.float64).ravel()
        v = np.asarray(self.levels, dtype=np.float64).ravel()
        if x.shape != v.shape:
            raise QuantileError("one level per jump is required")
        if np.any(np.diff(x) <= 0):
            raise QuantileError("jump locations must be strictly increasing")
        if np.any(np.diff(np.concatenate([[self.base], v])) < 0):
            raise QuantileError("levels must be nondecreasing")
        object.__setattr__(self, "jumps", x)
        object.__setattr__(self, "levels", v)

    def __call__(self, x):
        side = "right" if self.right_continuous else "left"
        k = np.searchsorted(self.jumps, x, side=side)
        vals = np.concatenate([[self.base], self.levels])
        return vals[k]


class Cdf(StepFunction):
    """``F(x) = mu((-inf, x])`` of a 1D discrete measure (duplicates merged)."""

    def __init__(self, mu: DiscreteMeasure):
        if mu.dim != 1:
            raise QuantileError("CDFs are defined for 1D measures only")
        m = merge_duplicates(mu)
        order = np.argsort(m.points[:, 0], kind="stable")
        cum = np.cumsum(m.weights[order])
        if abs(cum[-1] - 1.0) > TOL.weight_renormalise:
            raise QuantileError("weights do not sum to one")
        cum[-1] = 1.0
        super().__init__(m.points[order, 0], cum, 0.0, True)

    @property
    def atoms(self) -> np.ndarray:
        return self.jumps

    @property
    def cumulative(self) -> np.ndarray:
        return self.levels

    def strict(self) -> StepFunction:
        """``G(x) = mu((-inf, x))``, the left-continuous companion."""
        return StepFunction(self.jumps, self.levels, 0.0, right_continuous=False)

    def quantile(self, p):
        return right_inverse(self, p)


def right_inverse(psi: StepFunction, p: float) -> float:
    """``inf {x : psi(x) >= p}`` for ``p`` in ``(0, 1]``."""
    if not (0.0 < p <= 1.0):
        raise QuantileError(f"right inverse needs p in (0, 1], got {p!r}")
    if psi.base >= p:
        return NEG_INF
    k = int(np.searchsorted(psi.levels, p, side="left"))
    return float(psi.jumps[k]) if k < psi.jumps.size else POS_INF


def left_inverse(phi: StepFunction, p: float) -> float:
    """``sup {x : phi(x) <= p}`` for ``p`` in ``[0, 1]``."""
    if not (0.0 <= p <= 1.0):
        raise QuantileError(f"left inverse needs p in [0, 1], got {p!r}")
    if phi.base > p:
        return NEG_INF
    k = int(np.searchsorted(phi.levels, p, side="right"))
    return float(phi.jumps[k]) if k < phi.jumps.size else POS_INF


def _sorted_atoms(mu: DiscreteMeasure):
    if mu.dim != 1:
        raise QuantileError("expected a 1D measure")
    order = np.argsort(mu.points[:, 0], kind="stable")
    return order, mu.points[order, 0], mu.weights[order]


def monotone_plan(mu: DiscreteMeasure, nu: DiscreteMeasure) -> Coupling:
    """Quantile coupling ``(F_mu^-1, F_nu^-1) # Leb[0, 1]``, in the original
    atom order of both measures.  It is the optimal plan for every convex
    cost of ``x - y``."""
    oi, _, a = _sorted_atoms(mu)
    oj, _, b = _sorted_atoms(nu)
    ca, cb = np.cumsum(a), np.cumsum(b)
    ca[-1] = cb[-1] = 1.0
    p = np.union1d(ca, cb)
    dp = np.diff(np.concatenate([[0.0], p]))
    keep = dp > 0
    p, dp = p[keep], dp[keep]
    mid = p - dp / 2
    ii = np.minimum(np.searchsorted(ca, mid), a.size - 1)
    jj = np.minimum(np.searchsorted(cb, mid), b.size - 1)
    P = np.zeros((mu.size, nu.size))
    np.add.at(P, (oi[ii], oj[jj]), dp)
    return Coupling(P, mu.weights, nu.weights)


def w2_1d(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Squared 2-Wasserstein distance between 1D measures,
    ``int_0^1 |F_mu^-1(p) - F_nu^-1(p)|^2 dp``, summed exactly over the merged
    cumulative-weight breakpoints."""
    _, x, a = _sorted_atoms(mu)
    _, y, b = _sorted_atoms(nu)
    ca, cb = np.cumsum(a), np.cumsum(b)
    ca[-1] = cb[-1] = 1.0
    p = np.union1d(ca, cb)
    dp = np.diff(np.concatenate([[0.0], p]))
    mid = p - dp / 2
    ii = np.minimum(np.searchsorted(ca, mid), a.size - 1)
    jj = np.minimum(np.searchsorted(cb, mid), b.size - 1)
    return float(np.sum(dp * (x[ii] - y[jj]) ** 2))


@dataclass
class QuantileCheck:
    max_deviation: float
    n_points: int


def quantile_pushforward_check(mu: DiscreteMeasure, g, n_grid: int = 1001) -> QuantileCheck:
    """Compare ``F_{g#mu}^-1(p)`` with ``g(F_mu^-1(p))`` on a grid of ``p``.

    Grid points that coincide with a breakpoint of either CDF are skipped;
    the identity only holds almost everywhere.
    """
    _, x, a = _sorted_atoms(mu)
    gx = np.array([float(np.asarray(g(v)).ravel()[0]) for v in x])
    if np.any(np.diff(gx) < 0):
        raise QuantileError("g is not nondecreasing on the atoms of mu")
    F = Cdf(mu)
    image = DiscreteMeasure(gx, a)
    Fg = Cdf(image)
    p = (np.arange(n_grid) + 0.5) / n_grid
    bps = np.concatenate([F.cumulative, Fg.cumulative])
    near = np.min(np.abs(p[:, None] - bps[None, :]), axis=1) < 1e-12
    p = p[~near]
    lhs = np.array([right_inverse(Fg, q) for q in p])
    rhs = np.array([float(np.asarray(g(right_inverse(F, q))).ravel()[0]) for q in p])
    dev = float(np.max(np.abs(lhs - rhs))) if p.size else 0.0
    return QuantileCheck(dev, int(p.size))


# ---------------------------------------------------------------------------
# constrained projection


def _chain_bounds(x, L, ell):
    dx = np.diff(x)
    lo = ell * dx
    with np.errstate(invalid="ignore"):
        hi = np.where(dx > 0, L * dx, 0.0)
    return lo, hi


def _block_solution(a, t, state, lo, hi):
    """Minimiser of ``sum a_i (g_i - t_i)^2`` with the constraints in
    ``state`` (0 free, -1 at lower bound, +1 at upper bound) held as
    equalities; free constraints are ignored."""
    n = t.size
    off = np.zeros(n)
    step = np.where(state < 0, lo, np.where(state > 0, hi, 0.0))
    starts = np.concatenate([[True], state == 0])
    block = np.cumsum(starts) - 1
    acc = np.concatenate([[0.0], np.cumsum(step)])
    off = acc - acc[np.flatnonzero(starts)][block]
    nb = block[-1] + 1
    wsum = np.bincount(block, weights=a, minlength=nb)
    num = np.bincount(block, weights=a * (t - off), minlength=nb)
    cnt = np.bincount(block, minlength=nb)
    base = np.where(wsum > 0, num / np.where(wsum > 0, wsum, 1.0),
                    np.bincount(block, weights=t - off, minlength=nb) / cnt)
    return base[block] + off, block


def _multipliers(a, g, t, block, state):
    """``nu_k = -sum_{i <= k, same block} a_i (g_i - t_i)`` for each link."""
    r = a * (g - t)
    cs = np.cumsum(r)
    starts = np.flatnonzero(np.concatenate([[True], np.diff(block) != 0]))
    before = np.concatenate([[0.0], cs])[starts][block]
    nu = -(cs - before)[:-1]
    return np.where(state != 0, nu, 0.0)


@dataclass
class ProjectionResult:
    values: np.ndarray
    iterations: int
    kkt_residual: float


def project_chain(x, a, t, L: float, ell: float = 0.0, max_iter: int | None = None) -> ProjectionResult:
    """Weighted projection onto ``ell dx_k <= g_{k+1} - g_k <= L dx_k``.

    ``x`` must be sorted.  Exact primal active-set method: every iterate is
    feasible, each subproblem is solved in closed form on blocks of atoms
    tied by active constraints, and termination is certified by the signs of
    the multipliers.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if ell < 0 or L < 0 or ell > L:
        raise QuantileError(f"need 0 <= ell <= L, got ell={ell!r}, L={L!r}")
    if np.any(np.diff(x) < 0):
        raise QuantileError("atoms must be sorted")
    n = t.size
    if n == 1:
        return ProjectionResult(t.copy(), 0, 0.0)
    lo, hi = _chain_bounds(x, L, ell)
    scale = 1.0 + np.max(np.abs(t)) + np.max(np.abs(x))
    ftol = 1e-13 * scale
    state = np.full(n - 1, -1, dtype=np.int8)  # start with every link at its lower bound
    state[lo == hi] = -1
    g, block = _block_solution(a, t, state, lo, hi)
    max_iter = max_iter or 20 * n + 100
    it = 0
    for it in range(1, max_iter + 1):
        cand, cblock = _block_solution(a, t, state, lo, hi)
        p = cand - g
        if np.max(np.abs(p)) <= 1e-15 * scale:
            g, block = cand, cblock
            nu = _multipliers(a, g, t, block, state)
            # lower-active links need nu >= 0, upper-active nu <= 0
            viol = np.where(state < 0, -nu, np.where(state > 0, nu, 0.0))
            viol[lo == hi] = 0.0
            k = int(np.argmax(viol))
            if viol[k] <= TOL.projection_kkt * scale:
                break
            state[k] = 0
            continue
        d, dp = np.diff(g), np.diff(p)
        alpha, hit, side = 1.0, -1, 0
        free = state == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            r_lo = np.where(free & (dp < 0), (lo - d) / dp, np.inf)
            r_hi = np.where(free & (dp > 0), (hi - d) / dp, np.inf)
        k_lo, k_hi = int(np.argmin(r_lo)), int(np.argmin(r_hi))
        if r_lo[k_lo] < alpha:
            alpha, hit, side = max(r_lo[k_lo], 0.0), k_lo, -1
        if r_hi[k_hi] < alpha or (r_hi[k_hi] == alpha and hit >= 0 and k_hi < hit):
            alpha, hit, side = max(r_hi[k_hi], 0.0), k_hi, 1
        g = g + alpha * p
        if hit >= 0:
            state[hit] = side
        else:
            g, block = cand, cblock
    else:
        raise RuntimeError(f"chain projection did not terminate in {max_iter} iterations")
    # snap active links exactly onto their bounds
    g, block = _block_solution(a, t, state, lo, hi)
    d = np.diff(g)
    feas = max(np.max(lo - d, initial=0.0), np.max(d - hi, initial=0.0))
    nu = _multipliers(a, g, t, block, state)
    dual = np.max(np.where(state < 0, -nu, np.where(state > 0, nu, 0.0)), initial=0.0)
    if feas > 1e-10 * scale:
        raise RuntimeError(f"chain projection infeasible by {feas:.3e}")
    return ProjectionResult(g, it, float(max(feas, dual, 0.0)))


def project_monotone_lipschitz(mu: DiscreteMeasure, t, L: float, ell: float = 0.0) -> np.ndarray:
    """Weighted L2(mu) projection of the values ``t`` (one per atom of ``mu``)
    onto maps whose slopes between consecutive atoms lie in ``[ell, L]``.

    Returns the projected values in the atom order of ``mu``.
    """
    t = np.asarray(t, dtype=np.float64).ravel()
    if t.size != mu.size:
        raise QuantileError(f"{t.size} targets for {mu.size} atoms")
    order, x, a = _sorted_atoms(mu)
    res = project_chain(x, a, t[order], L, ell)
    out = np.empty_like(t)
    out[order] = res.values
    return out


@dataclass
class Map1D:
    """Fitted nondecreasing map, known on ``knots`` and extended
    piecewise-linearly (outside the knots with the nearest segment's slope,
    or ``clip(1, ell, L)`` when there is a single knot)."""

    knots: np.ndarray
    values: np.ndarray
    L: float
    ell: float
    objective: float = float("nan")
    barycentre: np.ndarray | None = None

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        scalar = x.ndim == 0
        xv = np.atleast_1d(x).ravel()
        k, v = self.knots, self.values
        if k.size == 1:
            s = float(np.clip(1.0, self.ell, self.L))
            out = v[0] + s * (xv - k[0])
        else:
            out = np.interp(xv, k, v)
            s_lo = (v[1] - v[0]) / (k[1] - k[0])
            s_hi = (v[-1] - v[-2]) / (k[-1] - k[-2])
            s_lo = float(np.clip(s_lo, self.ell, self.L))
            s_hi = float(np.clip(s_hi, self.ell, self.L))
            out = np.where(xv < k[0], v[0] + s_lo * (xv - k[0]), out)
            out = np.where(xv > k[-1], v[-1] + s_hi * (xv - k[-1]), out)
        return float(out[0]) if scalar else out.reshape(np.shape(x))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["x", "g"])
        w.writerows(zip(self.knots.tolist(), self.values.tolist()))
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"kind": "1d", "knots": self.knots.tolist(), "values": self.values.tolist(),
                "L": self.L, "ell": self.ell, "objective": self.objective}

    @classmethod
    def from_dict(cls, d: dict) -> "Map1D":
        return cls(np.asarray(d["knots"], float), np.asarray(d["values"], float), float(d["L"]),
                   float(d["ell"]), float(d.get("objective", "nan")))


def solve_map_1d(mu: DiscreteMeasure, nu: DiscreteMeasure, L: float, ell: float = 0.0) -> Map1D:
    """Globally optimal map among nondecreasing maps with slopes in
    ``[ell, L]`` for ``min W_2^2(g # mu, nu)`` in 1D: project the barycentric
    projection of the monotone plan."""
    if mu.dim != 1 or nu.dim != 1:
        raise QuantileError("solve_map_1d needs 1D measures")
    m = merge_duplicates(mu)
    if np.any(m.weights == 0):
        m = m.restrict(m.weights > 0)
    order, x, a = _sorted_atoms(m)
    plan = monotone_plan(m, nu)
    bar = barycentric_projection(plan, nu.points).values[:, 0]
    res = project_chain(x, a, bar[order], L, ell)
    image = DiscreteMeasure(res.values, a)
    return Map1D(x, res.values, float(L), float(ell), w2_1d(image, nu), bar[order])
