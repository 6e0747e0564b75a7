"""Scripted experiments on explicit constructions.

Each experiment returns an ``ExperimentReport`` (a table plus a summary) and
raises ``ExperimentFailure`` naming the offending quantity when one of its
checks fails.  Reports are deterministic given their parameters.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import datasets
from .barycentric import barycentric_projection
from .cvxgrad import SmoothnessParams, fit_map
from .io import atomic_write_json, atomic_write_text
from .measure import DiscreteMeasure, pushforward, second_moment
from .nnmap import NeuralMap, SgdConfig
from .otcore import SQEUCLIDEAN, map_problem_cost, solve_kantorovich
from .quantile1d import solve_map_1d, w2_1d


class ExperimentFailure(AssertionError):
    def __init__(self, quantity: str, message: str):
        super().__init__(f"{quantity}: {message}")
        self.quantity = quantity


@dataclass
class ExperimentReport:
    name: str
    header: dict
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("".join(f"# {k} = {v}\n" for k, v in self.header.items()))
        if self.rows:
            w = csv.DictWriter(buf, fieldnames=list(self.rows[0]))
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"name": self.name, "header": self.header, "summary": self.summary}

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        stem = self.name.replace("-", "_")
        return (atomic_write_text(out / f"{stem}.csv", self.to_csv()),
                atomic_write_json(out / f"{stem}.json", self.to_dict()))


def _require(ok: bool, quantity: str, message: str):
    if not ok:
        raise ExperimentFailure(quantity, message)


# ---------------------------------------------------------------------------
# continuous monotone maps approaching a discontinuous transport


EXISTENCE_SOURCE = datasets.uniform_1d(-1.0, 1.0)
EXISTENCE_TARGET = datasets.two_uniforms_1d((-2.0, -1.0), (1.0, 2.0))


def g_eps(x, eps: float) -> np.ndarray:
    """Continuous nondecreasing map, ``x -/+ 1`` outside ``[-eps, eps]`` and
    linear with slope ``(1 + eps) / eps`` inside."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= -eps, x - 1.0, np.where(x >= eps, x + 1.0, (1.0 + eps) / eps * x))


def existence_counterexample(eps_list: Sequence[float] = (0.5, 0.25, 0.1, 0.05, 0.01), n: int = 10_000
                             ) -> ExperimentReport:
    """``W2^2(g_eps # mu, nu)`` for ``mu = U([-1, 1])`` and
    ``nu = U([-2, -1]) / 2 + U([1, 2]) / 2``, both discretised at ``n``
    quantile midpoints.

    Checks: strict decrease along a decreasing ``eps`` list, the last value
    below the one at ``eps = 0.5``, and the masses of ``g_eps # mu`` on
    ``[-2, -1-eps]``, ``(-1-eps, 1+eps)``, ``[1+eps, 2]`` within ``2/sqrt(n)``
    of ``(1-eps)/2``, ``eps``, ``(1-eps)/2``.  The continuous value is
    ``eps / 3`` (only the middle interval contributes).
    """
    eps = [float(e) for e in eps_list]
    _require(n >= 100, "n", f"need at least 100 atoms, got {n}")
    _require(all(0 < e < 1 for e in eps), "eps", "values must lie in (0, 1)")
    _require(all(a > b for a, b in zip(eps, eps[1:])), "eps", "list must be strictly decreasing")
    mu = datasets.midpoint_measure_1d(EXISTENCE_SOURCE, n)
    nu = datasets.midpoint_measure_1d(EXISTENCE_TARGET, n)
    tol = 2.0 / np.sqrt(n)
    rows = []
    for e in eps:
        img = pushforward(mu, lambda X, e=e: g_eps(X, e), vectorized=True)
        y = img.points[:, 0]
        w = img.weights
        masses = (float(w[y <= -1.0 - e].sum()), float(w[(y > -1.0 - e) & (y < 1.0 + e)].sum()),
                  float(w[y >= 1.0 + e].sum()))
        expected = ((1.0 - e) / 2, e, (1.0 - e) / 2)
        for name, got, want in zip(("left", "middle", "right"), masses, expected):
            _require(abs(got - want) <= tol, f"mass_{name}(eps={e})", f"{got!r} vs {want!r} (tolerance {tol:.3g})")
        rows.append({"eps": e, "w2_squared": w2_1d(img, nu), "continuous_value": e / 3.0,
                     "mass_left": masses[0], "mass_middle": masses[1], "mass_right": masses[2]})
    vals = [r["w2_squared"] for r in rows]
    for k in range(1, len(vals)):
        _require(vals[k] < vals[k - 1], f"w2_squared(eps={eps[k]})", f"{vals[k]!r} does not decrease from {vals[k - 1]!r}")
    ref = rows[0]["w2_squared"] if eps[0] == 0.5 else w2_1d(
        pushforward(mu, lambda X: g_eps(X, 0.5), vectorized=True), nu)
    _require(vals[-1] < ref, "w2_squared", "final value not below the value at eps = 0.5")
    return ExperimentReport(
        "existence-1d",
        {"n": n, "source": "U([-1, 1]) at quantile midpoints", "target": "U([-2,-1])/2 + U([1,2])/2 at quantile midpoints"},
        rows,
        {"eps": eps, "w2_squared": vals, "decreasing": True, "mass_tolerance": float(tol)},
    )


# ---------------------------------------------------------------------------
# two-point configuration in the plane


def counterexample_2d(a: float = 1.0, b: float = 10.0, x: float = 1.0) -> ExperimentReport:
    """Projecting the barycentric map onto monotone maps is not the map
    problem in 2D.

    ``mu = 2/3 delta_(0,0) + 1/3 delta_(x,0)`` and
    ``nu = 2/3 delta_(0,0) + 1/3 delta_(-a,b)``.  The barycentric map of the
    optimal plan is monotone, so it is its own projection, yet the monotone
    map sending ``(x, 0)`` to ``(0, b)`` reaches a lower transport cost:
    ``(a^2 + b^2) / 6`` against ``a^2 / 3``.
    """
    t0 = time.perf_counter()
    mu = DiscreteMeasure([[0.0, 0.0], [x, 0.0]], [2 / 3, 1 / 3])
    nu = DiscreteMeasure([[0.0, 0.0], [-a, b]], [2 / 3, 1 / 3])
    plan, _ = solve_kantorovich(mu.weights, nu.weights, SQEUCLIDEAN.matrix(mu.points, nu.points))
    bar = barycentric_projection(plan, nu.points, mu.points)
    want_bar = np.array([[-a / 2, b / 2], [0.0, 0.0]])
    _require(np.allclose(bar.values, want_bar, atol=1e-12, rtol=0), "barycentre", f"{bar.values.tolist()} vs {want_bar.tolist()}")
    d = bar.values[0] - bar.values[1]
    mono_bar = float(d @ (mu.points[0] - mu.points[1]))
    _require(mono_bar >= 0, "monotonicity(barycentre)", f"{mono_bar!r} < 0")

    table = {tuple(p): v for p, v in zip(mu.points.tolist(), bar.values)}
    cost_bar = map_problem_cost(mu, nu, lambda p: table[tuple(p.tolist())]).value
    alt = {(0.0, 0.0): np.array([0.0, 0.0]), (x, 0.0): np.array([0.0, b])}
    cost_alt = map_problem_cost(mu, nu, lambda p: alt[tuple(p.tolist())]).value
    mono_alt = float((alt[(0.0, 0.0)] - alt[(x, 0.0)]) @ (mu.points[0] - mu.points[1]))
    want_bar_cost, want_alt_cost = (a * a + b * b) / 6, a * a / 3
    _require(abs(cost_bar - want_bar_cost) <= 1e-9, "w2_squared(barycentre)", f"{cost_bar!r} vs {want_bar_cost!r}")
    _require(abs(cost_alt - want_alt_cost) <= 1e-9, "w2_squared(alternative)", f"{cost_alt!r} vs {want_alt_cost!r}")
    _require(mono_alt >= 0, "monotonicity(alternative)", f"{mono_alt!r} < 0")
    _require(cost_alt < cost_bar, "gap", "the alternative map is not better")
    elapsed = time.perf_counter() - t0
    rows = [
        {"map": "barycentre", "g00": bar.values[0].tolist(), "gx0": bar.values[1].tolist(), "monotonicity": mono_bar,
         "w2_squared": cost_bar, "expected": want_bar_cost},
        {"map": "alternative", "g00": [0.0, 0.0], "gx0": [0.0, b], "monotonicity": mono_alt,
         "w2_squared": cost_alt, "expected": want_alt_cost},
    ]
    return ExperimentReport("counterexample-2d", {"a": a, "b": b, "x": x}, rows,
                            {"w2_barycentre": cost_bar, "w2_alternative": cost_alt, "gap": cost_bar - cost_alt,
                             "seconds": elapsed})


# ---------------------------------------------------------------------------
# 1D: alternating solver against the closed form


def equivalence_1d_demo(n: int = 20, m: int = 20, L: float = 2.0, ell: float = 0.0, instances: int = 5, seed: int = 0,
                        tol: float = 1e-5, large_L: float = 1e8) -> ExperimentReport:
    """On random 1D discrete measures, the alternating QCQP/OT solver and
    the quantile-based projection reach the same objective.

    With the Lipschitz bound lifted (``large_L``) the closed form must also
    reach ``m2(nu) - m2(bar # mu)``, the cost of the barycentric map, which
    is monotone in 1D.
    """
    rng = np.random.default_rng(seed)
    params = SmoothnessParams(ell, L)
    rows = []
    for k in range(instances):
        mu = DiscreteMeasure(rng.normal(size=n), rng.dirichlet(np.ones(n)))
        nu = DiscreteMeasure(rng.normal(size=m) * 2 + 1, rng.dirichlet(np.ones(m)))
        closed = solve_map_1d(mu, nu, L, ell).objective
        alt = fit_map(mu, nu, params)
        plan, _ = solve_kantorovich(mu.weights, nu.weights, SQEUCLIDEAN.matrix(mu.points, nu.points))
        bar = barycentric_projection(plan, nu.points)
        bar_obj = second_moment(nu) - float(bar.weights @ np.sum(bar.values**2, axis=1))
        diff = abs(alt.objective - closed)
        _require(diff <= tol, f"objective(instance={k})", f"alternating {alt.objective!r} vs closed form {closed!r}")
        loose = solve_map_1d(mu, nu, large_L, ell).objective
        _require(abs(loose - bar_obj) <= tol, f"barycentric_objective(instance={k})", f"{loose!r} vs {bar_obj!r}")
        rows.append({"instance": k, "closed_form": closed, "alternating": alt.objective, "difference": diff,
                     "outer_iterations": alt.trace[-1]["iteration"] if alt.trace else 0, "barycentric_objective": bar_obj,
                     "unconstrained_closed_form": loose})
    return ExperimentReport("equivalence-1d", {"n": n, "m": m, "L": L, "ell": ell, "instances": instances, "seed": seed},
                            rows, {"max_difference": max(r["difference"] for r in rows), "tolerance": tol})


def lipschitz_levels_1d(n: int = 200, m: int = 200, levels: Sequence[float] = (2.0, 8.0), grid: int = 201
                        ) -> ExperimentReport:
    """Maps of two Lipschitz levels from ``U([-1, 1])`` to
    ``U([2, 4]) / 2 + U([6, 8]) / 2`` evaluated on a grid, with the monotone
    OT map (barycentre) for reference."""
    mu = datasets.midpoint_measure_1d(datasets.INTERVAL_SOURCE, n)
    nu = datasets.midpoint_measure_1d(datasets.TWO_INTERVALS_TARGET, m)
    maps = {L: solve_map_1d(mu, nu, L) for L in levels}
    xs = np.linspace(-1.0, 1.0, grid)
    plan, _ = solve_kantorovich(mu.weights, nu.weights, SQEUCLIDEAN.matrix(mu.points, nu.points))
    bar = barycentric_projection(plan, nu.points)
    bar_on_grid = np.interp(xs, mu.points[bar.indices, 0], bar.values[:, 0])
    rows = []
    for i, xv in enumerate(xs):
        row = {"x": float(xv), "ot_map": float(bar_on_grid[i])}
        for L, mp in maps.items():
            row[f"g_L{L:g}"] = float(mp(np.array([xv]))[0])
        rows.append(row)
    return ExperimentReport("lipschitz-levels-1d", {"n": n, "m": m, "levels": list(levels)}, rows,
                            {f"objective_L{L:g}": mp.objective for L, mp in maps.items()})


EXPERIMENTS: dict[str, Callable[[], ExperimentReport]] = {
    "existence-1d": existence_counterexample,
    "counterexample-2d": counterexample_2d,
    "equivalence-1d": equivalence_1d_demo,
}


def run(name: str, out_dir=None) -> ExperimentReport:
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    rep = EXPERIMENTS[name]()
    if out_dir is not None:
        rep.write(out_dir)
    return rep


def summary_json(rep: ExperimentReport) -> str:
    return json.dumps(rep.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# neural map from a standard Gaussian to a two-component mixture


@dataclass(frozen=True)
class NnFieldSetup:
    net: NeuralMap
    source: dict
    target: dict
    config: SgdConfig

    def samplers(self):
        return (lambda rng, k: datasets.sample(self.source, k, rng),
                lambda rng, k: datasets.sample(self.target, k, rng))


def nn_field_setup(seed: int = 0, steps: int = 1000) -> NnFieldSetup:
    """``g = I + h`` with ``h`` a 2-16-16-16-2 ReLU network, weights in
    ``[-1/2, 1/2]``, squared Euclidean cost, fresh batches of 64 from a
    standard Gaussian and a two-Gaussian mixture."""
    net = NeuralMap.mlp(2, (16, 16, 16), 2, "relu", w=0.5, offset=True)
    cfg = SgdConfig(batch_source=64, batch_target=64, alpha0=0.05, tau=500.0, steps=steps, seed=seed)
    return NnFieldSetup(net, datasets.STANDARD_GAUSSIAN_2D, datasets.two_gaussians_2d(), cfg)
