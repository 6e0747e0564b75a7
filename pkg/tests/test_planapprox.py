import numpy as np
import pytest

from catmap.measure import Coupling, DiscreteMeasure
from catmap.otcore import CostFunction, solve_kantorovich
from catmap.planapprox import (
    LiftedCost,
    LpPowerCost,
    PlanApproxError,
    SeparableProductCost,
    equivalence_check,
    lift_cost,
    plan_distance,
)
from oracles import random_couplings

SQ = CostFunction.squared_euclidean()


def instance(seed, n=6, m=7, k=2, d=2):
    rng = np.random.default_rng(seed)
    mu = DiscreteMeasure(rng.normal(size=(n, k)), rng.dirichlet(np.ones(n)))
    nu = DiscreteMeasure(rng.normal(size=(m, d)) + 1, rng.dirichlet(np.ones(m)))
    A = rng.normal(size=(d, k))
    return rng, mu, nu, lambda x: A @ x + np.sin(x[0])


class TestLift:
    def test_sum_is_full_squared_euclidean(self):
        C = lift_cost(SeparableProductCost(SQ, SQ, k=2), d=3)
        rng = np.random.default_rng(0)
        A, B = rng.normal(size=(4, 5)), rng.normal(size=(6, 5))
        np.testing.assert_allclose(C.matrix(A, B), SQ.matrix(A, B), rtol=1e-13)

    @pytest.mark.parametrize("p", [1.0, 2.0, 3.5])
    def test_max_is_linf_power(self, p):
        c = CostFunction.norm_power(p, "linf")
        C = lift_cost(SeparableProductCost(c, c, k=1, combiner="max"), d=2)
        rng = np.random.default_rng(1)
        A, B = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(C.matrix(A, B), c.matrix(A, B), rtol=1e-13)

    @pytest.mark.parametrize("p, q", [(1.0, 1.0), (2.0, 0.5), (3.0, 2.0), (1.5, 1.3)])
    def test_power_combiner_is_p_norm_power(self, p, q):
        c = LpPowerCost(p, p * q)
        C = lift_cost(SeparableProductCost(c, c, k=2, combiner="power", q=q), d=2)
        rng = np.random.default_rng(2)
        A, B = rng.normal(size=(4, 4)), rng.normal(size=(5, 4))
        ref = np.sum(np.abs(A[:, None] - B[None]) ** p, axis=-1) ** q
        np.testing.assert_allclose(C.matrix(A, B), ref, rtol=1e-12)

    @pytest.mark.parametrize("h", [lambda u, v: 0.5 * v, lambda u, v: u + v + 1.0, lambda u, v: u * v])
    def test_non_compliant_combiner(self, h):
        with pytest.raises(PlanApproxError):
            lift_cost(SeparableProductCost(SQ, SQ, k=1, combiner=h), d=1)

    def test_c1_must_vanish_on_diagonal(self):
        class Shifted:
            def matrix(self, X, Y):
                return SQ.matrix(X, Y) + 1.0

        with pytest.raises(PlanApproxError):
            lift_cost(SeparableProductCost(Shifted(), SQ, k=1), d=1)

    def test_dimension_check(self):
        C = lift_cost(SeparableProductCost(SQ, SQ, k=1), d=1)
        with pytest.raises(PlanApproxError):
            C.matrix(np.zeros((1, 3)), np.zeros((1, 3)))


class TestPlanDistance:
    def test_graph_coupling_is_zero(self):
        _, mu, _, g = instance(0)
        G = np.array([g(x) for x in mu.points])
        # gamma = (I, g) # mu, written as a coupling with the image points as targets
        gamma = Coupling.from_matrix(np.diag(mu.weights))
        C = lift_cost(SeparableProductCost(SQ, SQ, k=2), d=2)
        assert plan_distance(mu, g, gamma, G, C) == pytest.approx(0.0, abs=1e-14)

    def test_matching(self):
        rng = np.random.default_rng(1)
        X, Y = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
        perm = rng.permutation(5)
        mu = DiscreteMeasure.uniform(X)
        gamma = Coupling.from_matrix(np.eye(5)[perm] / 5)
        C = lift_cost(SeparableProductCost(SQ, SQ, k=1), d=1)
        assert plan_distance(mu, Y[perm], gamma, Y, C) == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("seed", range(4))
    def test_nonnegative_and_brute_force(self, seed):
        rng, mu, nu, g = instance(seed, n=3, m=3, k=1, d=1)
        gamma = Coupling.from_matrix(random_couplings(rng, mu.weights, nu.weights, 2)[1])
        C = lift_cost(SeparableProductCost(SQ, SQ, k=1), d=1)
        val = plan_distance(mu, g, gamma, nu.points, C)
        G = np.array([g(x) for x in mu.points])
        S = np.hstack([mu.points, G])
        I, J = np.nonzero(gamma.matrix > 0)
        T = np.hstack([mu.points[I], nu.points[J]])
        ref = solve_kantorovich(mu.weights, gamma.matrix[I, J], SQ.matrix(S, T))[1]
        assert val >= 0
        assert val == pytest.approx(ref, abs=1e-12)

    def test_marginal_mismatch(self):
        _, mu, nu, g = instance(0)
        gamma = Coupling.product(np.full(6, 1 / 6), nu.weights)
        C = lift_cost(SeparableProductCost(SQ, SQ, k=2), d=2)
        with pytest.raises(PlanApproxError):
            plan_distance(mu, g, gamma, nu.points, C)


def optimal_coupling(mu, nu, g, c2):
    G = np.array([g(x) for x in mu.points])
    return solve_kantorovich(mu.weights, nu.weights, c2.matrix(G, nu.points))[0]


class TestEquivalence:
    @pytest.mark.parametrize("seed", range(5))
    def test_squared_euclidean_bounds(self, seed):
        rng, mu, nu, g = instance(seed)
        C = lift_cost(SeparableProductCost(SQ, SQ, k=2), d=2)
        for P in random_couplings(rng, mu.weights, nu.weights, 10):
            rep = equivalence_check(mu, nu, g, Coupling.from_matrix(P), C)
            assert rep.asserted
            assert rep.lhs <= rep.rhs + 1e-9 <= rep.upper + 2e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_equal_for_optimal_coupling(self, seed):
        _, mu, nu, g = instance(seed)
        C = lift_cost(SeparableProductCost(SQ, SQ, k=2), d=2)
        rep = equivalence_check(mu, nu, g, optimal_coupling(mu, nu, g, SQ), C)
        assert rep.gamma_optimal
        assert rep.gap <= 1e-8 * (1 + abs(rep.lhs))

    def test_anti_diagonal_counterexample(self):
        mu = DiscreteMeasure.uniform([[0.0], [1.0]])
        C = lift_cost(SeparableProductCost(SQ, SQ, k=1), d=1)
        anti = Coupling.from_matrix(np.array([[0.0, 0.5], [0.5, 0.0]]))
        rep = equivalence_check(mu, mu, lambda x: x, anti, C)
        assert rep.lhs == 0.0
        assert rep.rhs == pytest.approx(1.0, abs=1e-14)
        assert rep.upper == pytest.approx(1.0, abs=1e-14)
        assert not rep.gamma_optimal

    @pytest.mark.parametrize("seed", range(3))
    def test_linf_and_power(self, seed):
        rng, mu, nu, g = instance(seed, n=5, m=5)
        c = CostFunction.norm_power(1.5, "linf")
        lp = LpPowerCost(3.0, 3.0 * 0.7)
        for C, c2 in ((lift_cost(SeparableProductCost(c, c, k=2, combiner="max"), d=2), c),
                      (lift_cost(SeparableProductCost(lp, lp, k=2, combiner="power", q=0.7), d=2), lp)):
            for P in random_couplings(rng, mu.weights, nu.weights, 3):
                equivalence_check(mu, nu, g, Coupling.from_matrix(P), C)
            rep = equivalence_check(mu, nu, g, optimal_coupling(mu, nu, g, c2), C)
            assert rep.gap <= 1e-8 * (1 + abs(rep.lhs))

    def test_coupling_from_triplets(self):
        _, mu, nu, g = instance(7)
        gamma = Coupling.from_triplets(optimal_coupling(mu, nu, g, SQ).to_triplets())
        C = lift_cost(SeparableProductCost(SQ, SQ, k=2), d=2)
        assert equivalence_check(mu, nu, g, gamma, C).gap <= 1e-8

    def test_mahalanobis_reports_gap(self):
        rng, mu, nu, g = instance(3, n=5, m=5, k=1, d=1)
        Sigma = np.array([[1.0, 0.8], [0.8, 1.0]])
        C = CostFunction.quadratic_form(np.linalg.inv(Sigma))
        gaps = []
        for P in random_couplings(rng, mu.weights, nu.weights, 4):
            rep = equivalence_check(mu, nu, g, Coupling.from_matrix(P), C, c2=SQ)
            assert not rep.asserted
            gaps.append(rep.gap)
        assert max(gaps) > 1e-3
        # even the optimal coupling does not close the gap for this cost
        rep = equivalence_check(mu, nu, g, optimal_coupling(mu, nu, g, SQ), C, c2=SQ)
        assert rep.gap > 1e-3

    def test_non_lifted_needs_c2(self):
        _, mu, nu, g = instance(0)
        with pytest.raises(PlanApproxError):
            equivalence_check(mu, nu, g, Coupling.product(mu.weights, nu.weights), SQ)
