import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from cekd.numerics import (
    NonFiniteError,
    RngStream,
    finite_diff_gradient,
    kl_div,
    log_softmax,
    sample_beta,
    softmax,
)

# reference values computed with mpmath at 30 digits
SOFTMAX_123 = [0.09003057317, 0.2447284711, 0.6652409558]
KL_HALF_QUARTER = 0.143841036226

logit_vectors = arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)

    def test_reference_values(self):
        np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), SOFTMAX_123, atol=1e-5)

    def test_infinite_temperature_limit(self):
        np.testing.assert_allclose(softmax([1.0, 2.0, 3.0], 1e6), [1 / 3] * 3, atol=1e-6)

    @pytest.mark.parametrize("T", [0.0, -1.0])
    def test_rejects_nonpositive_temperature(self, T):
        with pytest.raises(ValueError):
            softmax([1.0, 2.0], T)

    def test_overflow_safe(self):
        p = softmax([1000.0, 0.0, -1000.0])
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0)

    @given(logit_vectors, st.floats(-100, 100), st.floats(0.1, 10))
    def test_shift_invariance(self, logits, c, T):
        np.testing.assert_allclose(softmax(logits, T), softmax(logits + c, T), atol=1e-12)

    @given(logit_vectors, st.floats(0.1, 10))
    def test_temperature_is_prescaling(self, logits, T):
        p = softmax(logits, T)
        np.testing.assert_allclose(p, softmax(logits / T, 1.0), atol=1e-12)
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all(p >= 0)

    @given(logit_vectors)
    def test_log_softmax_consistent(self, logits):
        np.testing.assert_allclose(np.exp(log_softmax(logits)), softmax(logits), atol=1e-12)


class TestKL:
    def test_identity(self):
        assert kl_div([0.5, 0.5], [0.5, 0.5]) == 0.0

    def test_reference_value(self):
        assert kl_div([0.5, 0.5], [0.25, 0.75]) == pytest.approx(KL_HALF_QUARTER, abs=1e-5)

    def test_zero_mass_terms_dropped(self):
        assert kl_div([1.0, 0.0], [1.0, 0.0]) == 0.0

    def test_missing_support_is_infinite(self):
        assert kl_div([0.5, 0.5], [1.0, 0.0]) == math.inf

    @settings(max_examples=200)
    @given(logit_vectors, st.data())
    def test_gibbs_inequality(self, a, data):
        b = data.draw(arrays(np.float64, a.shape, elements=st.floats(-30, 30)))
        assert kl_div(softmax(a), softmax(b)) >= -1e-12


class TestBeta:
    def test_uniform_when_alpha_one(self):
        rng = RngStream(11)
        draws = np.array([sample_beta(1.0, rng) for _ in range(10_000)])
        assert stats.kstest(draws, "uniform").statistic < 0.02

    @pytest.mark.parametrize("alpha", [0.2, 1.0, 5.0])
    def test_support(self, alpha):
        rng = RngStream(3)
        draws = [sample_beta(alpha, rng) for _ in range(2000)]
        assert min(draws) >= 0.0 and max(draws) <= 1.0

    def test_mean_for_alpha_five(self):
        rng = RngStream(5)
        draws = np.array([sample_beta(5.0, rng) for _ in range(10_000)])
        assert abs(draws.mean() - 0.5) < 0.02

    def test_symmetry(self):
        rng = RngStream(17)
        draws = np.array([sample_beta(3.0, rng) for _ in range(10_000)])
        assert stats.ks_2samp(draws, 1.0 - draws).statistic < 0.02

    @pytest.mark.parametrize("alpha", [0.0, -2.0])
    def test_rejects_bad_alpha(self, alpha):
        with pytest.raises(ValueError):
            sample_beta(alpha, RngStream(0))

    def test_reproducible(self):
        a = [sample_beta(2.0, RngStream(9)) for _ in range(3)]
        b = [sample_beta(2.0, RngStream(9)) for _ in range(3)]
        assert a == b


class TestRngStream:
    def test_children_reproducible_and_distinct(self):
        root = RngStream(42)
        x = root.child("a", 1).uniform(size=5)
        y = RngStream(42).child("a", 1).uniform(size=5)
        z = root.child("a", 2).uniform(size=5)
        assert np.array_equal(x, y)
        assert not np.array_equal(x, z)

    def test_counter_skips_ahead(self):
        a = RngStream(8)
        a.uniform(size=8)  # 8 doubles consume 2 Philox blocks
        b = RngStream(8, counter=2)
        assert a.uniform() == b.uniform()

    def test_children_uncorrelated(self):
        root = RngStream(0)
        x = root.child("x").normal(size=5000)
        y = root.child("y").normal(size=5000)
        assert abs(np.corrcoef(x, y)[0, 1]) < 0.05


class TestFiniteDifferences:
    def test_quadratic(self):
        g = finite_diff_gradient(lambda t: float(np.sum(t**2)), np.array([1.0, 2.0]), 1e-5)
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)

    def test_constant(self):
        g = finite_diff_gradient(lambda t: 3.0, np.zeros(4), 1e-5)
        np.testing.assert_allclose(g, 0.0, atol=1e-8)

    def test_subset_of_coordinates(self):
        theta = np.arange(6.0)
        g = finite_diff_gradient(lambda t: float(np.sum(t**3)), theta, 1e-5, indices=[1, 4])
        np.testing.assert_allclose(g, [3.0, 48.0], rtol=1e-8)

    def test_reports_offending_coordinate(self):
        def f(t):
            return math.inf if t[2] > 0.5 else float(t.sum())

        with pytest.raises(NonFiniteError) as info:
            finite_diff_gradient(f, np.array([0.0, 0.0, 0.5]), 1e-4)
        assert info.value.index == 2

    def test_rejects_eps_outside_range(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(lambda t: 0.0, np.zeros(2), 1e-2)

    def test_softmax_kl_gradient_three_classes(self):
        # hand-derived: d/ds T^2 KL(p || softmax(s/T)) = T (softmax(s/T) - p)
        T = 2.0
        target = np.array([0.3, -0.2, 0.9])
        p = softmax(target, T)
        s0 = np.random.default_rng(0).normal(scale=0.1, size=3)

        def f(s):
            return T * T * kl_div(p, softmax(s, T))

        analytic = T * (softmax(s0, T) - p)
        fd = finite_diff_gradient(f, s0, 1e-6)
        np.testing.assert_allclose(fd, analytic, rtol=1e-4)
