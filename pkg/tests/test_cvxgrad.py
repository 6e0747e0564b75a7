import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catmap.cvxgrad import (
    FitError,
    Partition,
    SmoothnessParams,
    TaylorWitness,
    check_interpolable,
    eval_bounds,
    evaluate,
    fit_map,
    taylor_Q,
)
from catmap.measure import DiscreteMeasure
from catmap.otcore import CostFunction
from catmap.quantile1d import solve_map_1d


def quadratic_witness(rng, n, d, c, params, cells=None):
    """Exact data of phi(x) = c |x|^2 / 2."""
    X = rng.normal(size=(n, d))
    return TaylorWitness(X, c * X, 0.5 * c * np.sum(X * X, axis=1), params, cells)


class TestParams:
    def test_constants(self):
        p = SmoothnessParams(0.5, 2.0)
        assert p.kappa == 0.25
        assert p.c1 == pytest.approx(1 / 3)
        assert p.c2 == pytest.approx(1 / 3)
        assert p.c3 == pytest.approx(1 / 3)

    @pytest.mark.parametrize("ell, L", [(1.0, 1.0), (2.0, 1.0), (-0.1, 1.0), (0.0, 0.0), (0.0, np.inf)])
    def test_rejected(self, ell, L):
        with pytest.raises(ValueError):
            SmoothnessParams(ell, L)


class TestTaylorQ:
    def test_same_point(self):
        p = SmoothnessParams(0.3, 2.0)
        assert taylor_Q([1.0, 2.0], [1.0, 2.0], 3.0, 3.0, [0.5, 0.1], [0.5, 0.1], p) == 0.0

    def test_half_square(self):
        assert taylor_Q([0.0], [1.0], 0.0, 0.5, [0.0], [1.0], SmoothnessParams(0.0, 1.0)) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("ell, c, L", [(0.0, 1.0, 1.0), (0.5, 1.0, 2.0), (0.5, 0.5, 2.0), (0.0, 0.0, 3.0), (1.0, 1.7, 4.0)])
    def test_quadratic_data_interpolable(self, seed, ell, c, L):
        rng = np.random.default_rng(seed)
        w = quadratic_witness(rng, 12, 3, c, SmoothnessParams(ell, L))
        assert w.min_pair_value() >= -1e-12
        assert check_interpolable(w)

    def test_matches_expanded_form(self):
        rng = np.random.default_rng(0)
        p = SmoothnessParams(0.4, 1.9)
        x, xp, g, gp = rng.normal(size=(4, 3))
        phi, phip = rng.normal(size=2)
        ref = (phi - phip - gp @ (x - xp) - p.c1 * (g - gp) @ (g - gp) - p.c2 * (x - xp) @ (x - xp)
               + p.c3 * (gp - g) @ (xp - x))
        assert taylor_Q(x, xp, phi, phip, g, gp, p) == pytest.approx(ref, abs=1e-14)


class TestCheckInterpolable:
    def test_single_triple(self):
        assert check_interpolable(TaylorWitness([[0.3, 0.1]], [[5.0, -2.0]], [7.0], SmoothnessParams(0.0, 1.0)))

    @pytest.mark.parametrize("ell, L", [(0.0, 1.0), (0.5, 2.0), (1.0, 3.0)])
    def test_lipschitz_violation(self, ell, L):
        p = SmoothnessParams(ell, L)
        x1, x2 = np.array([0.0, 0.0]), np.array([1.0, 0.0])
        g1, g2 = np.array([0.0, 0.0]), np.array([1.1 * L, 0.0])
        # symmetric sum written out by hand
        dg, dx = g1 - g2, x1 - x2
        pair_sum = (1 + 2 * p.c3) * dg @ dx - 2 * p.c1 * dg @ dg - 2 * p.c2 * dx @ dx
        assert pair_sum < 0
        for phi2 in np.linspace(-3, 3, 13):
            w = TaylorWitness([x1, x2], [g1, g2], [0.0, phi2], p)
            assert not check_interpolable(w)

    def test_cells_are_independent(self):
        p = SmoothnessParams(0.0, 1.0)
        X = [[0.0], [1.0]]
        G = [[0.0], [5.0]]
        assert not check_interpolable(TaylorWitness(X, G, [0.0, 0.0], p))
        assert check_interpolable(TaylorWitness(X, G, [0.0, 0.0], p, cells=[0, 1]))

    def test_json_roundtrip(self):
        w = quadratic_witness(np.random.default_rng(0), 5, 2, 1.0, SmoothnessParams(0.5, 2.0), [0, 1, 0, 1, 1])
        v = TaylorWitness.from_dict(json.loads(w.to_json()))
        for k in ("atoms", "gradients", "potentials", "cells"):
            np.testing.assert_array_equal(getattr(v, k), getattr(w, k))
        assert v.params == w.params
        assert set(w.to_dict()) == {"atoms", "gradients", "potentials", "ell", "L", "cells"}


class TestPartition:
    def test_halfspace(self):
        part = Partition.halfspace([[1.0, 0.0], [-1.0, 0.5], [2.0, 3.0]], [1.0, 0.0])
        np.testing.assert_array_equal(part.labels, [1, 0, 1])
        assert part.n_cells == 2

    def test_boundary_rejected(self):
        with pytest.raises(ValueError, match="boundary"):
            Partition.halfspace([[0.0, 1.0]], [1.0, 0.0])

    def test_negative_label(self):
        with pytest.raises(ValueError):
            Partition([0, -1])


def one_d_instance(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(3, 25, size=2)
    mu = DiscreteMeasure(rng.normal(size=n), rng.dirichlet(np.ones(n)))
    nu = DiscreteMeasure(rng.normal(size=m) * 2 + 1, rng.dirichlet(np.ones(m)))
    return mu, nu


class TestFitMap:
    def test_identity(self):
        rng = np.random.default_rng(0)
        mu = DiscreteMeasure.uniform(rng.normal(size=(15, 2)))
        r = fit_map(mu, mu, SmoothnessParams(0.5, 2.0))
        assert r.objective <= 1e-7
        assert check_interpolable(r.witness)

    @pytest.mark.parametrize("seed", range(8))
    def test_one_d_matches_quantile_route(self, seed):
        mu, nu = one_d_instance(seed)
        ell, L = [(0.0, 1.0), (0.3, 1.5), (0.5, 4.0), (1.0, 1.2)][seed % 4]
        r = fit_map(mu, nu, SmoothnessParams(ell, L))
        ref = solve_map_1d(mu, nu, L, ell).objective
        assert abs(r.objective - ref) <= 1e-5

    @pytest.mark.parametrize("seed", range(4))
    def test_two_d_properties(self, seed):
        rng = np.random.default_rng(10 + seed)
        mu = DiscreteMeasure.uniform(rng.normal(size=(20, 2)))
        nu = DiscreteMeasure.uniform(rng.normal(size=(25, 2)) * 1.5 + 1)
        p = SmoothnessParams(0.5, 2.0)
        r = fit_map(mu, nu, p)
        obj = r.objectives()
        assert np.all(np.diff(obj) <= 1e-7)
        w = r.witness
        assert check_interpolable(w)
        dX = w.atoms[:, None] - w.atoms[None]
        dG = w.gradients[:, None] - w.gradients[None]
        mono = np.sum(dG * dX, axis=-1) - p.ell * np.sum(dX * dX, axis=-1)
        assert mono.min() >= -1e-8
        assert np.all(np.linalg.norm(dG, axis=-1) <= p.L * np.linalg.norm(dX, axis=-1) + 1e-6)

    def test_gaussian_mixture_leakage(self):
        rng = np.random.default_rng(4)
        mu = DiscreteMeasure.uniform(rng.normal(size=(30, 2)))
        centres = np.array([[-3.0, 0.0], [3.0, 0.0]])
        Y = centres[rng.integers(0, 2, 30)] + 0.3 * rng.normal(size=(30, 2))
        r = fit_map(mu, DiscreteMeasure.uniform(Y), SmoothnessParams(0.5, 2.0))
        assert r.status == "converged"
        assert r.objective > 1e-3

    def test_partition(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(20, 2))
        part = Partition.halfspace(X, [1.0, 0.0])
        Y = X + 3.0 * np.sign(X[:, :1]) * np.array([1.0, 0.0])
        mu, nu = DiscreteMeasure.uniform(X), DiscreteMeasure.uniform(Y)
        single = fit_map(mu, nu, SmoothnessParams(0.5, 2.0))
        split = fit_map(mu, nu, SmoothnessParams(0.5, 2.0), partition=part)
        assert check_interpolable(split.witness)
        # splitting the space cannot hurt, and here the split map is a translation per cell
        assert split.objective <= single.objective + 1e-7
        assert split.objective <= 1e-6

    def test_quadratic_cost(self):
        rng = np.random.default_rng(6)
        mu = DiscreteMeasure.uniform(rng.normal(size=(10, 2)))
        nu = DiscreteMeasure.uniform(rng.normal(size=(10, 2)) + 1)
        cost = CostFunction.quadratic_form(np.array([[2.0, 0.3], [0.3, 1.0]]))
        r = fit_map(mu, nu, SmoothnessParams(0.0, 2.0), cost=cost)
        assert np.all(np.diff(r.objectives()) <= 1e-7)

    def test_rejects_non_quadratic_cost(self):
        mu = DiscreteMeasure.uniform([[0.0, 0.0]])
        with pytest.raises(ValueError):
            fit_map(mu, mu, SmoothnessParams(0.0, 1.0), cost=CostFunction.norm_power(1.0))

    def test_duplicate_atoms_merged(self):
        mu = DiscreteMeasure.uniform([[0.0], [0.0], [1.0]])
        nu = DiscreteMeasure.uniform([[0.0], [0.5], [3.0]])
        r = fit_map(mu, nu, SmoothnessParams(0.0, 1.0))
        assert r.witness.n == 2
        ref = solve_map_1d(mu, nu, 1.0, 0.0).objective
        assert r.objective == pytest.approx(ref, abs=1e-6)


class TestBounds:
    def test_single_triple(self):
        w = TaylorWitness([[0.0]], [[0.0]], [0.0], SmoothnessParams(0.0, 1.0))
        b = eval_bounds(w, [1.0])
        assert b.phi_upper == pytest.approx(0.5, abs=1e-7)
        assert b.grad_upper[0] == pytest.approx(1.0, abs=1e-6)

    def test_at_data_atoms(self):
        rng = np.random.default_rng(1)
        w = quadratic_witness(rng, 8, 2, 1.2, SmoothnessParams(0.5, 2.0))
        for i in range(3):
            b = eval_bounds(w, w.atoms[i])
            assert b.phi_lower == pytest.approx(w.potentials[i], abs=1e-6)
            assert b.phi_upper == pytest.approx(w.potentials[i], abs=1e-6)
            np.testing.assert_allclose(b.grad_upper, w.gradients[i], atol=1e-6)
            np.testing.assert_allclose(b.grad_lower, w.gradients[i], atol=1e-6)

    def test_quadratic_data_reproduced(self):
        # a single quadratic potential is in the class, so it lies between the bounds
        rng = np.random.default_rng(2)
        w = quadratic_witness(rng, 10, 2, 1.0, SmoothnessParams(0.5, 2.0))
        for x in rng.normal(size=(5, 2)):
            b = eval_bounds(w, x)
            assert b.phi_lower <= 0.5 * x @ x + 1e-7 <= b.phi_upper + 2e-7

    def test_lower_below_upper_and_lipschitz(self):
        rng = np.random.default_rng(3)
        p = SmoothnessParams(0.5, 2.0)
        mu = DiscreteMeasure.uniform(rng.normal(size=(12, 2)))
        nu = DiscreteMeasure.uniform(rng.normal(size=(12, 2)) * 2)
        w = fit_map(mu, nu, p).witness
        X = rng.uniform(-2, 2, size=(50, 2))
        grads = []
        for x in X:
            b = eval_bounds(w, x)
            assert b.phi_lower <= b.phi_upper + 1e-8
            grads.append(b.grad_upper)
        G = np.array(grads)
        dX = np.linalg.norm(X[:, None] - X[None], axis=-1)
        dG = np.linalg.norm(G[:, None] - G[None], axis=-1)
        off = dX > 0
        assert np.max(dG[off] / dX[off]) <= p.L + 1e-6

    def test_several_cells_need_cell(self):
        w = quadratic_witness(np.random.default_rng(0), 4, 1, 1.0, SmoothnessParams(0.0, 2.0), [0, 0, 1, 1])
        with pytest.raises(ValueError):
            eval_bounds(w, [0.0])
        eval_bounds(w, [0.0], cell=1)

    def test_inconsistent_witness(self):
        w = TaylorWitness([[0.0], [1.0]], [[0.0], [5.0]], [0.0, 0.0], SmoothnessParams(0.0, 1.0))
        with pytest.raises(FitError):
            eval_bounds(w, [0.5])

    @pytest.mark.parametrize("threads", ["1", "3"])
    def test_evaluate_threads(self, monkeypatch, threads):
        monkeypatch.setenv("CATMAP_THREADS", threads)
        w = quadratic_witness(np.random.default_rng(5), 6, 2, 1.0, SmoothnessParams(0.0, 2.0))
        X = np.random.default_rng(6).normal(size=(4, 2))
        out = evaluate(w, X)
        ref = np.vstack([eval_bounds(w, x).grad_upper for x in X])
        np.testing.assert_array_equal(out, ref)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.9), st.floats(1.0, 3.0))
def test_bounds_ordered_property(seed, ell, L):
    rng = np.random.default_rng(seed)
    c = rng.uniform(ell, L)
    w = quadratic_witness(rng, 5, 2, c, SmoothnessParams(ell, L))
    b = eval_bounds(w, rng.normal(size=2))
    assert b.phi_lower <= b.phi_upper + 1e-8
