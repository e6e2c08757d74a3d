import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, kl_quadrature, w2_monte_carlo
from wgat import gauss
from wgat.gauss import GaussianEmbedding as G

EXAMPLE_A = G([0.0, 0.0], [1.0, 4.0])
EXAMPLE_B = G([1.0, 1.0], [4.0, 1.0])


def random_pair(rng, dim=4):
    return (G(rng.normal(size=dim), rng.uniform(0.1, 3.0, dim)),
            G(rng.normal(size=dim), rng.uniform(0.1, 3.0, dim)))


finite = st.floats(-5, 5, allow_nan=False)
positive = st.floats(1e-3, 10, allow_nan=False)


@st.composite
def gaussians(draw, dim=3):
    mean = draw(arrays(np.float64, dim, elements=finite))
    var = draw(arrays(np.float64, dim, elements=positive))
    return G(mean, var)


class TestEmbeddingContract:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="lengths differ"):
            G([0.0, 1.0], [1.0])

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_nonpositive_variance_rejected(self, bad):
        with pytest.raises(ValueError, match="positive"):
            G([0.0], [bad])

    def test_dimension_mismatch_between_pairs(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            gauss.w2_squared(G([0.0], [1.0]), G([0.0, 0.0], [1.0, 1.0]))


class TestW2:
    def test_identity_is_zero(self):
        assert gauss.w2_squared(EXAMPLE_A, EXAMPLE_A) == 0.0

    def test_worked_example(self):
        assert gauss.w2_squared(EXAMPLE_A, EXAMPLE_B) == pytest.approx(4.0, abs=1e-12)

    def test_worked_example_against_coupling(self):
        mc = w2_monte_carlo(EXAMPLE_A.mean, EXAMPLE_A.variance, EXAMPLE_B.mean,
                            EXAMPLE_B.variance)
        assert abs(mc - 4.0) / 4.0 < 0.01

    def test_equal_variances_reduce_to_mean_distance(self):
        delta = np.array([0.3, -1.2, 2.0])
        a, b = G(np.zeros(3), [2.0, 2.0, 2.0]), G(delta, [2.0, 2.0, 2.0])
        assert gauss.w2_squared(a, b) == pytest.approx(delta @ delta)

    @given(gaussians(), gaussians())
    def test_symmetric_exactly(self, a, b):
        assert gauss.w2_squared(a, b) == gauss.w2_squared(b, a)

    @given(gaussians(), gaussians(), gaussians())
    def test_root_satisfies_triangle_inequality(self, a, b, c):
        ab, bc, ac = (math.sqrt(gauss.w2_squared(x, y)) for x, y in ((a, b), (b, c), (a, c)))
        assert ac <= ab + bc + 1e-9

    def test_pairwise_matches_rows(self):
        rng = np.random.default_rng(3)
        ma, mb = rng.normal(size=(6, 5)), rng.normal(size=(4, 5))
        va, vb = rng.uniform(0.1, 2, (6, 5)), rng.uniform(0.1, 2, (4, 5))
        full = gauss.w2_squared_pairwise(ma, va, mb, vb)
        for i in range(6):
            for j in range(4):
                expect = gauss.w2_squared_rows(ma[i], va[i], mb[j], vb[j])
                assert full[i, j] == pytest.approx(expect, rel=1e-10, abs=1e-12)


class TestKL:
    def test_identity_is_zero(self):
        assert gauss.kl_divergence(EXAMPLE_A, EXAMPLE_A) == pytest.approx(0.0, abs=1e-15)

    def test_worked_example_and_swap(self):
        a, b = G([0.0], [1.0]), G([1.0], [2.0])
        assert gauss.kl_divergence(a, b) == pytest.approx(0.5 * math.log(2), abs=1e-12)
        assert gauss.kl_divergence(b, a) == pytest.approx(1 - 0.5 * math.log(2), abs=1e-12)

    def test_matches_quadrature(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            a, b = random_pair(rng, dim=3)
            expect = kl_quadrature(a.mean, a.variance, b.mean, b.variance)
            assert abs(gauss.kl_divergence(a, b) - expect) < 1e-4

    @given(gaussians(), gaussians())
    def test_nonnegative(self, a, b):
        assert gauss.kl_divergence(a, b) >= 0.0
        assert gauss.jeffreys_divergence(a, b) >= 0.0

    def test_jeffreys_is_average_of_both_directions(self):
        a, b = random_pair(np.random.default_rng(8))
        both = 0.5 * (gauss.kl_divergence(a, b) + gauss.kl_divergence(b, a))
        assert gauss.jeffreys_divergence(a, b) == pytest.approx(both, rel=1e-12)

    def test_jeffreys_pairwise_matches_rows(self):
        rng = np.random.default_rng(4)
        ma, mb = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
        va, vb = rng.uniform(0.2, 2, (5, 3)), rng.uniform(0.2, 2, (7, 3))
        full = gauss.jeffreys_pairwise(ma, va, mb, vb)
        rows = np.array([[gauss.jeffreys_rows(ma[i], va[i], mb[j], vb[j]) for j in range(7)]
                         for i in range(5)])
        np.testing.assert_allclose(full, rows, rtol=1e-10, atol=1e-12)


class TestScores:
    def test_prediction_score_is_negated_distance(self):
        assert gauss.prediction_score(EXAMPLE_A, EXAMPLE_B) == pytest.approx(-4.0)
        assert gauss.prediction_score(EXAMPLE_A, EXAMPLE_A) == 0.0

    @given(gaussians(), gaussians())
    def test_prediction_score_symmetric_and_nonpositive(self, a, b):
        assert gauss.prediction_score(a, b) == gauss.prediction_score(b, a) <= 0.0

    @pytest.mark.parametrize("tau, expected", [(0.5, 1.0), (0.25, 2.0)])
    def test_lipschitz_score_at_zero_distance(self, tau, expected):
        assert gauss.lipschitz_score(EXAMPLE_A, EXAMPLE_A, tau) == pytest.approx(expected)

    def test_lipschitz_score_vanishes_far_away(self):
        assert gauss.lipschitz_score_from_distance(1e4, 0.25) < 1e-300

    @pytest.mark.parametrize("tau", [0.0, -0.5])
    def test_lipschitz_score_rejects_bad_temperature(self, tau):
        with pytest.raises(ValueError, match="temperature"):
            gauss.lipschitz_score(EXAMPLE_A, EXAMPLE_B, tau)

    @given(st.floats(0, 50), st.floats(0, 50))
    def test_lipschitz_score_bounded_and_monotone(self, d1, d2):
        lo, hi = sorted((d1, d2))
        f_lo = gauss.lipschitz_score_from_distance(lo, 0.25)
        f_hi = gauss.lipschitz_score_from_distance(hi, 0.25)
        assert 0.0 <= f_hi <= f_lo <= 4.0

    def test_sigmoid_extremes_are_finite(self):
        out = gauss.sigmoid(np.array([-800.0, 0.0, 800.0]))
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


class TestPartials:
    def test_identical_pair_has_zero_mean_gradient(self):
        dma, _, dmb, _ = gauss.w2_squared_partials(EXAMPLE_A, EXAMPLE_A)
        assert not dma.any() and not dmb.any()

    def test_variance_partial_example(self):
        _, dva, _, _ = gauss.w2_squared_partials(G([0.0], [1.0]), G([0.0], [4.0]))
        assert dva[0] == pytest.approx(-1.0)
        fd = central_difference(
            lambda v: gauss.w2_squared(G([0.0], v), G([0.0], [4.0])), [1.0])
        assert abs(fd[0] - dva[0]) / abs(dva[0]) < 1e-6

    @pytest.mark.parametrize("rows, partials", [
        (gauss.w2_squared_rows, gauss.w2_rows_partials),
        (gauss.kl_rows, gauss.kl_rows_partials),
        (gauss.jeffreys_rows, gauss.jeffreys_rows_partials),
    ])
    def test_all_partials_match_finite_differences(self, rows, partials):
        rng = np.random.default_rng(11)
        args = [rng.normal(size=4), rng.uniform(0.3, 3, 4), rng.normal(size=4),
                rng.uniform(0.3, 3, 4)]
        analytic = partials(*args)
        for k in range(4):
            def f(x, k=k):
                trial = list(args)
                trial[k] = x
                return float(rows(*trial))
            numeric = central_difference(f, args[k])
            np.testing.assert_allclose(analytic[k], numeric, rtol=1e-5, atol=1e-9)

    def test_mean_partials_are_opposite(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = random_pair(rng)
            dma, _, dmb, _ = gauss.w2_squared_partials(a, b)
            np.testing.assert_array_equal(dma, -dmb)

    @pytest.mark.parametrize("fn, vjp", [
        (gauss.w2_squared_pairwise, gauss.w2_pairwise_vjp),
        (gauss.jeffreys_pairwise, gauss.jeffreys_pairwise_vjp),
    ])
    def test_pairwise_adjoints_match_finite_differences(self, fn, vjp):
        rng = np.random.default_rng(21)
        args = [rng.normal(size=(3, 2)), rng.uniform(0.5, 2, (3, 2)),
                rng.normal(size=(4, 2)), rng.uniform(0.5, 2, (4, 2))]
        weights = rng.normal(size=(3, 4))
        analytic = vjp(weights, *args)
        for k in range(4):
            def f(x, k=k):
                trial = list(args)
                trial[k] = x
                return float(np.sum(weights * fn(*trial)))
            np.testing.assert_allclose(analytic[k], central_difference(f, args[k]),
                                       rtol=1e-6, atol=1e-8)
