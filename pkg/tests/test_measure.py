import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from catmap.measure import (
    Coupling,
    DiscreteMeasure,
    MapEvaluationError,
    MeasureError,
    load_coupling,
    load_measure,
    merge_duplicates,
    pushforward,
    second_moment,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@st.composite
def measures(draw, max_n=8, dim=None):
    n = draw(st.integers(1, max_n))
    d = dim or draw(st.integers(1, 3))
    pts = draw(hnp.arrays(np.float64, (n, d), elements=finite))
    w = draw(hnp.arrays(np.float64, n, elements=st.floats(0.01, 1.0)))
    return DiscreteMeasure(pts, w / w.sum())


def g_eps(x, eps):
    if x <= -eps:
        return x - 1
    if x >= eps:
        return x + 1
    return (1 + eps) / eps * x


class TestConstruction:
    def test_renormalises_small_error(self):
        mu = DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5 + 5e-7])
        assert abs(mu.weights.sum() - 1.0) < 1e-12

    @pytest.mark.parametrize(
        "pts, w",
        [
            ([[0.0], [1.0]], [0.5, 0.6]),
            ([[0.0], [1.0]], [1.2, -0.2]),
            ([[0.0], [1.0]], [1.0]),
            ([[0.0], [np.nan]], [0.5, 0.5]),
            (np.zeros((0, 2)), []),
        ],
    )
    def test_rejects(self, pts, w):
        with pytest.raises(MeasureError):
            DiscreteMeasure(pts, w)

    def test_immutable(self):
        mu = DiscreteMeasure.uniform([[0.0, 1.0], [2.0, 3.0]])
        with pytest.raises(ValueError):
            mu.points[0, 0] = 5.0

    def test_json_and_csv_roundtrip(self, tmp_path):
        mu = DiscreteMeasure([[0.0, 1.0], [2.5, -1.0], [3.0, 3.0]], [0.2, 0.3, 0.5])
        p = tmp_path / "mu.json"
        p.write_text(json.dumps(mu.to_dict()))
        back = load_measure(p)
        np.testing.assert_array_equal(back.points, mu.points)
        np.testing.assert_array_equal(back.weights, mu.weights)
        q = tmp_path / "mu.csv"
        q.write_text("x,y,w\n" + "\n".join(",".join(repr(v) for v in r) for r in mu.to_csv_rows()))
        back = load_measure(q)
        np.testing.assert_array_equal(back.points, mu.points)

    def test_declared_dim_mismatch(self):
        with pytest.raises(MeasureError):
            DiscreteMeasure.from_dict({"dim": 3, "points": [[0, 0]], "weights": [1]})


class TestCoupling:
    def test_product_marginals(self):
        pi = Coupling.product([0.25, 0.75], [0.5, 0.2, 0.3])
        np.testing.assert_allclose(pi.matrix.sum(), 1.0)

    def test_rejects_bad_marginal(self):
        with pytest.raises(MeasureError):
            Coupling([[0.5, 0.0], [0.0, 0.5]], [0.5, 0.5], [0.4, 0.6])

    def test_rejects_negative(self):
        with pytest.raises(MeasureError):
            Coupling([[0.6, -0.1], [-0.1, 0.6]], [0.5, 0.5], [0.5, 0.5])

    def test_triplet_roundtrip(self, tmp_path):
        pi = Coupling([[0.5, 0.0], [0.1, 0.4]], [0.5, 0.5], [0.6, 0.4])
        p = tmp_path / "plan.json"
        p.write_text(json.dumps(pi.to_triplets()))
        np.testing.assert_array_equal(load_coupling(p).matrix, pi.matrix)
        assert pi.support_size() == 3


class TestPushforward:
    def test_identity(self):
        mu = DiscreteMeasure([[1.0, 2.0], [3.0, 4.0]], [0.3, 0.7])
        out = pushforward(mu, lambda x: x)
        np.testing.assert_array_equal(out.points, mu.points)

    def test_square_symmetric(self):
        mu = DiscreteMeasure.uniform([-1.0, 1.0])
        out = pushforward(mu, lambda x: x**2)
        np.testing.assert_array_equal(out.points.ravel(), [1.0, 1.0])
        merged = merge_duplicates(out)
        assert merged.size == 1 and merged.weights[0] == 1.0

    def test_piecewise_ramp(self):
        mu = DiscreteMeasure.uniform([-1.0, -1 / 3, 1 / 3, 1.0])
        out = pushforward(mu, lambda x: g_eps(x[0], 1 / 3))
        np.testing.assert_allclose(out.points.ravel(), [-2.0, -4 / 3, 4 / 3, 2.0], atol=1e-15)

    def test_error_names_index(self):
        mu = DiscreteMeasure.uniform([0.0, 1.0, 2.0])

        def g(x):
            if x[0] == 2.0:
                raise ZeroDivisionError
            return x

        with pytest.raises(MapEvaluationError) as info:
            pushforward(mu, g)
        assert info.value.index == 2

    def test_nonfinite_image(self):
        mu = DiscreteMeasure.uniform([0.0, 1.0])
        with pytest.raises(MapEvaluationError) as info:
            pushforward(mu, lambda x: np.divide(1.0, x, where=x != 0, out=np.full_like(x, np.inf)))
        assert info.value.index == 0

    @given(measures())
    def test_mass_preserved(self, mu):
        out = pushforward(mu, lambda X: 2 * X + 1, vectorized=True)
        np.testing.assert_array_equal(out.weights, mu.weights)

    @given(measures(), st.floats(-5, 5))
    def test_moment_scaling(self, mu, c):
        out = pushforward(mu, lambda X: c * X, vectorized=True)
        assert second_moment(out) == pytest.approx(c * c * second_moment(mu), rel=1e-12, abs=1e-9)


class TestSecondMoment:
    def test_dirac(self):
        assert second_moment(DiscreteMeasure.dirac([0.0, 0.0])) == 0.0

    def test_two_atoms(self):
        assert second_moment(DiscreteMeasure.uniform([[0.0, 1.0], [1.0, 0.0]])) == 1.0

    def test_random_against_resummation(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(5, 3))
        w = rng.random(5)
        w /= w.sum()
        expected = 0.0
        for k in range(5):
            expected += w[k] * sum(v * v for v in pts[k])
        assert second_moment(DiscreteMeasure(pts, w)) == pytest.approx(expected, rel=1e-14)


class TestMerge:
    def test_same_point(self):
        mu = DiscreteMeasure([[1.0, 1.0], [1.0, 1.0]], [0.3, 0.7])
        m = merge_duplicates(mu, 0.0)
        assert m.size == 1
        assert m.weights[0] == pytest.approx(1.0, abs=1e-15)

    def test_distinct_unchanged(self):
        mu = DiscreteMeasure.uniform([[0.0], [1.0], [2.0]])
        assert merge_duplicates(mu, 0.0) is mu

    def test_cluster_centroid(self):
        mu = DiscreteMeasure([[0.0, 0.0], [0.1, 0.0], [0.1, 0.1], [5.0, 5.0]], [0.1, 0.2, 0.3, 0.4])
        m = merge_duplicates(mu, 0.15)
        assert m.size == 2
        # (0.1*0 + 0.2*0.1 + 0.3*0.1) / 0.6 = 0.05/0.6 ; y: 0.03/0.6
        k = int(np.argmin(m.points[:, 0]))
        np.testing.assert_allclose(m.points[k], [0.05 / 0.6, 0.03 / 0.6], rtol=1e-14)
        assert m.weights[k] == pytest.approx(0.6, abs=1e-15)

    def test_negative_tol(self):
        with pytest.raises(ValueError):
            merge_duplicates(DiscreteMeasure.dirac([0.0]), -1.0)

    @settings(max_examples=50)
    @given(measures(), st.floats(0, 30))
    def test_mass_and_mean_preserved(self, mu, tol):
        m = merge_duplicates(mu, tol)
        assert m.weights.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(m.mean(), mu.mean(), atol=1e-9)
