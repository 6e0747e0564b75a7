import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catmap.barycentric import (
    BarycentricError,
    barycentric_projection,
    constrained_barycentric_fit,
    l2_decomposition_check,
)
from catmap.measure import Coupling, DiscreteMeasure
from catmap.otcore import CostFunction, solve_kantorovich
from catmap.quantile1d import monotone_plan, project_chain, project_monotone_lipschitz


def random_coupling(rng, n, m):
    P = rng.random((n, m)) * (rng.random((n, m)) < 0.6)
    P[np.arange(n), rng.integers(0, m, size=n)] += 0.1
    P /= P.sum()
    return Coupling.from_matrix(P)


class TestProjection:
    def test_product(self):
        Y = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, -1.0]])
        b = np.array([0.2, 0.3, 0.5])
        bar = barycentric_projection(Coupling.product([0.4, 0.6], b), Y)
        np.testing.assert_allclose(bar.values, np.tile(b @ Y, (2, 1)), rtol=1e-14)

    def test_matching(self):
        Y = np.array([[1.0], [2.0], [3.0]])
        P = np.eye(3)[[2, 0, 1]] / 3
        bar = barycentric_projection(Coupling.from_matrix(P), Y)
        np.testing.assert_allclose(bar.values[:, 0], [3.0, 1.0, 2.0])

    def test_two_point_configuration(self):
        mu = DiscreteMeasure([[0.0, 0.0], [1.0, 0.0]], [2 / 3, 1 / 3])
        nu = DiscreteMeasure([[0.0, 0.0], [-1.0, 10.0]], [2 / 3, 1 / 3])
        plan, _ = solve_kantorovich(mu.weights, nu.weights, CostFunction.squared_euclidean().matrix(mu.points, nu.points))
        bar = barycentric_projection(plan, nu.points)
        np.testing.assert_allclose(bar[0], [-0.5, 5.0], atol=1e-15)
        np.testing.assert_allclose(bar[1], [0.0, 0.0], atol=1e-15)

    def test_zero_mass_row(self):
        P = np.array([[0.5, 0.0], [0.0, 0.0], [0.0, 0.5]])
        bar = barycentric_projection(Coupling.from_matrix(P), [[0.0], [1.0]])
        assert bar.dropped == (1,)
        with pytest.raises(BarycentricError, match="1"):
            bar[1]
        assert "atom" in bar.to_csv()

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 8))
    def test_mass_conservation(self, seed, n, m):
        rng = np.random.default_rng(seed)
        pi = random_coupling(rng, n, m)
        Y = rng.normal(size=(m, 2))
        bar = barycentric_projection(pi, Y)
        np.testing.assert_allclose(bar.weights @ bar.values, pi.col_marginal @ Y, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_1d_monotone(self, seed):
        rng = np.random.default_rng(seed)
        mu = DiscreteMeasure.uniform(np.sort(rng.normal(size=10)))
        nu = DiscreteMeasure.uniform(rng.normal(size=7))
        plan, _ = solve_kantorovich(mu.weights, nu.weights, (mu.points - nu.points.T) ** 2)
        vals = barycentric_projection(plan, nu.points).values[:, 0]
        assert np.all(np.diff(vals) >= -1e-12)


class TestDecomposition:
    def test_f_is_barycentre(self):
        rng = np.random.default_rng(0)
        pi = random_coupling(rng, 5, 4)
        Y = rng.normal(size=(4, 2))
        bar = barycentric_projection(pi, Y)
        dec = l2_decomposition_check(pi, Y, bar.values)
        assert dec.projection_term == pytest.approx(0.0, abs=1e-15)
        assert dec.lhs == pytest.approx(dec.residual_term, rel=1e-12)

    def test_deterministic_coupling(self):
        Y = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
        pi = Coupling.from_matrix(np.eye(3) / 3)
        dec = l2_decomposition_check(pi, Y, np.zeros((3, 2)))
        assert dec.residual_term == pytest.approx(0.0, abs=1e-15)

    @settings(max_examples=60)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 8))
    def test_random(self, seed, n, m):
        rng = np.random.default_rng(seed)
        pi = random_coupling(rng, n, m)
        Y, F = rng.normal(size=(m, 3)), rng.normal(size=(n, 3))
        dec = l2_decomposition_check(pi, Y, F)
        # direct resummation
        direct = sum(pi.matrix[i, j] * np.sum((F[i] - Y[j]) ** 2) for i in range(n) for j in range(m))
        assert dec.lhs == pytest.approx(direct, rel=1e-12, abs=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_optimal_plans(self, seed):
        rng = np.random.default_rng(seed)
        X, Y = rng.normal(size=(7, 2)), rng.normal(size=(6, 2))
        a, b = np.full(7, 1 / 7), np.full(6, 1 / 6)
        plan, _ = solve_kantorovich(a, b, CostFunction.squared_euclidean().matrix(X, Y))
        l2_decomposition_check(plan, Y, X)


class TestConstrainedFit:
    def test_identity_projector(self):
        rng = np.random.default_rng(1)
        pi = random_coupling(rng, 4, 3)
        Y = rng.normal(size=(3, 2))
        fit = constrained_barycentric_fit(pi, Y, lambda v, w: v)
        np.testing.assert_array_equal(fit.values, barycentric_projection(pi, Y).values)

    def test_1d_projector_matches(self):
        rng = np.random.default_rng(2)
        x = np.sort(rng.normal(size=9))
        mu = DiscreteMeasure.uniform(x)
        nu = DiscreteMeasure.uniform(rng.normal(size=5) * 4)
        plan = monotone_plan(mu, nu)
        fit = constrained_barycentric_fit(plan, nu.points, lambda v, w: project_chain(x, w, v[:, 0], 0.8, 0.1).values)
        bar = barycentric_projection(plan, nu.points).values[:, 0]
        np.testing.assert_allclose(fit.values[:, 0], project_monotone_lipschitz(mu, bar, 0.8, 0.1), atol=1e-14)

    def test_fixed_plan_objective_minimised(self):
        # the fit minimises sum pi_ij |g_i - y_j|^2 over the class
        rng = np.random.default_rng(5)
        x = np.sort(rng.normal(size=8))
        mu = DiscreteMeasure.uniform(x)
        nu = DiscreteMeasure.uniform(rng.normal(size=8) * 3)
        plan = monotone_plan(mu, nu)
        Y = nu.points
        fit = constrained_barycentric_fit(plan, Y, lambda v, w: project_chain(x, w, v[:, 0], 1.0, 0.0).values)
        best = l2_decomposition_check(plan, Y, fit.values).lhs
        for _ in range(200):
            g = rng.normal() + np.concatenate([[0.0], np.cumsum(rng.random(7) * np.diff(x))])
            assert l2_decomposition_check(plan, Y, g).lhs >= best - 1e-12
