"""Probability primitives against frozen high-precision values."""

import math

import numpy as np
import pytest

from cotriad.errors import InvalidInputError, OracleFailureError
from cotriad.numerics import (
    cross_entropy,
    entropy,
    finite_diff_grad,
    softmax,
    softmax_rows,
)

# softmax([1, 2, 3]) evaluated with mpmath at 50 significant digits.
SOFTMAX_123 = np.array(
    [
        0.090030573170380457998,
        0.24472847105479765247,
        0.66524095577482188953,
    ]
)
# -(0.7 ln 0.7 + 0.3 ln 0.3), same precision.
ENTROPY_07_03 = 0.61086430205489346303


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax([0, 0, 0, 0]), 0.25, atol=1e-15)

    def test_saturation_does_not_overflow(self):
        out = softmax([1000.0, 0.0])
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_matches_high_precision_reference(self):
        np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), SOFTMAX_123, rtol=1e-14)

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            z = rng.normal(scale=5.0, size=rng.integers(2, 9))
            p = softmax(z)
            assert abs(p.sum() - 1.0) <= 1e-9
            np.testing.assert_allclose(p, softmax(z + 17.5), atol=1e-12)

    def test_argmax_preserved(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            z = rng.normal(scale=3.0, size=6)
            assert np.argmax(softmax(z)) == np.argmax(z)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            softmax([np.inf, 0.0])
        with pytest.raises(InvalidInputError):
            softmax([np.nan, 0.0])

    def test_rejects_short_vector(self):
        with pytest.raises(InvalidInputError):
            softmax([1.0])


class TestEntropy:
    def test_uniform_is_maximal(self):
        assert entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)

    def test_one_hot_is_zero(self):
        assert entropy([1.0, 0.0, 0.0]) == 0.0

    def test_matches_direct_formula(self):
        assert entropy([0.7, 0.3]) == pytest.approx(ENTROPY_07_03, abs=1e-14)

    def test_bounds_over_random_distributions(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            c = int(rng.integers(2, 8))
            p = rng.dirichlet(np.ones(c))
            h = entropy(p)
            assert -1e-12 <= h <= math.log(c) + 1e-12

    def test_rejects_out_of_range_entry(self):
        with pytest.raises(InvalidInputError):
            entropy([1.2, -0.2])


class TestCrossEntropy:
    def test_one_hot_at_target_is_zero(self):
        assert cross_entropy([1.0, 0.0], 0) == 0.0

    def test_clamp_floor(self):
        assert cross_entropy([1.0, 0.0], 1) == pytest.approx(
            27.631021115928548208, rel=1e-12
        )

    def test_uniform_case(self):
        for y in range(4):
            assert cross_entropy([0.25] * 4, y) == pytest.approx(math.log(4), abs=1e-12)

    def test_rejects_bad_index(self):
        with pytest.raises(InvalidInputError):
            cross_entropy([0.5, 0.5], 2)


class TestFiniteDiffGrad:
    def test_quadratic(self):
        g = finite_diff_grad(lambda v: float(v @ v), np.array([3.0]), h=1e-4)
        np.testing.assert_allclose(g, [6.0], atol=1e-6)

    def test_constant_function(self):
        g = finite_diff_grad(lambda v: 2.5, np.array([1.0, -2.0, 0.3]))
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_degree_two_polynomials_are_exact(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(1, 6))
            a = rng.normal(size=(n, n))
            a = a + a.T
            b = rng.normal(size=n)
            x = rng.normal(size=n)

            def f(v):
                return float(0.5 * v @ a @ v + b @ v)

            g = finite_diff_grad(f, x, h=1e-5)
            np.testing.assert_allclose(g, a @ x + b, rtol=1e-7, atol=1e-7)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(InvalidInputError):
            finite_diff_grad(lambda v: 0.0, np.zeros(2), h=0.0)

    def test_non_finite_evaluation_raises(self):
        with pytest.raises(OracleFailureError):
            finite_diff_grad(lambda v: float("nan"), np.zeros(2))

    def test_entropy_of_softmax_gradient(self):
        # dH(softmax(z))/dz_j = -p_j (log p_j + H); checked against the oracle.
        rng = np.random.default_rng(8)
        for _ in range(20):
            z = rng.normal(scale=2.0, size=5)
            p = softmax_rows(z[None, :])[0]
            h = -np.sum(p * np.log(p))
            analytic = -p * (np.log(p) + h)

            def f(v):
                q = softmax_rows(v[None, :])[0]
                return float(-np.sum(q * np.log(q)))

            fd = finite_diff_grad(f, z, h=1e-6)
            np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-8)
