"""Gauss-Hermite rule and adaptive-integration tests."""

import math

import numpy as np
import pytest
from scipy.special import gamma as gamma_fn

import oracles
from ptglmm import (
    AdaptationError,
    AdaptiveState,
    IntegrationError,
    adapt,
    aghq_log_integral,
    gh_rule,
)


class TestGhRule:
    def test_k1(self):
        rule = gh_rule(1)
        assert rule.nodes[0] == 0.0
        assert rule.weights[0] == pytest.approx(math.sqrt(math.pi), abs=1e-14)

    def test_k2_closed_form(self):
        rule = gh_rule(2)
        np.testing.assert_allclose(rule.nodes, [-1 / math.sqrt(2), 1 / math.sqrt(2)],
                                   atol=1e-14)
        np.testing.assert_allclose(rule.weights, [math.sqrt(math.pi) / 2] * 2, atol=1e-14)

    @pytest.mark.parametrize("k", [1, 2, 3, 5, 10, 25, 50, 100])
    def test_weight_sum(self, k):
        rule = gh_rule(k)
        assert rule.weights.sum() == pytest.approx(math.sqrt(math.pi), abs=1e-12)

    @pytest.mark.parametrize("k", [2, 3, 5, 10, 25, 100])
    def test_symmetry(self, k):
        rule = gh_rule(k)
        np.testing.assert_allclose(rule.nodes, -rule.nodes[::-1], atol=1e-14)
        np.testing.assert_allclose(rule.weights, rule.weights[::-1], atol=1e-14)
        assert np.all(rule.weights > 0)

    @pytest.mark.parametrize("k", [2, 5, 10, 20])
    def test_monomial_exactness(self, k):
        # integral v^j exp(-v^2) dv = Gamma((j+1)/2) for even j, 0 for odd;
        # errors measured against the no-cancellation scale sum w |v|^j
        rule = gh_rule(k)
        for j in range(2 * k):
            got = float(rule.weights @ rule.nodes ** j)
            want = 0.0 if j % 2 else gamma_fn((j + 1) / 2.0)
            scale = float(rule.weights @ np.abs(rule.nodes) ** j)
            assert abs(got - want) <= 1e-10 * max(1.0, scale), j

    def test_k10_fourth_moment(self):
        rule = gh_rule(10)
        got = float(rule.weights @ rule.nodes ** 4)
        assert got == pytest.approx(0.75 * math.sqrt(math.pi), abs=1e-10)

    @pytest.mark.parametrize("k", [0, -1, 101])
    def test_out_of_range(self, k):
        with pytest.raises(ValueError):
            gh_rule(k)


def gaussian_logpdf(mean, var):
    def log_h(v):
        return -0.5 * (v - mean) ** 2 / var - 0.5 * math.log(2 * math.pi * var)
    return log_h


class TestAdapt:
    def test_gaussian_mode_and_scale(self):
        state = adapt(gaussian_logpdf(1.5, 0.25), init=0.0)
        assert state.v_hat == pytest.approx(1.5, abs=1e-6)
        assert state.s_hat == pytest.approx(0.5, abs=1e-6)

    def test_symmetric_mode_at_zero(self):
        state = adapt(gaussian_logpdf(0.0, 2.0), init=0.0)
        assert state.v_hat == pytest.approx(0.0, abs=1e-8)

    def test_pt_subject_matches_grid_argmax(self, tiny_dataset):
        # posterior of one subject's random intercept: dense-grid oracle
        from scipy.special import gammaln

        y = tiny_dataset.y[:2]
        eta = np.array([1.0, 1.3])
        sigma2 = 0.5
        kappa, table = oracles.pt_poly_table(3.0, -1.0, int(y.max()))

        def log_h(v):
            s = -0.5 * v * v / sigma2 - 0.5 * math.log(2 * math.pi * sigma2)
            for yi, e in zip(y, eta):
                s += math.log(oracles.pt_pmf_from_table(int(yi), math.exp(e + v), kappa, table))
            return s

        state = adapt(log_h, init=0.0)
        grid = np.arange(-3.0, 3.0, 1e-3)
        vals = np.array([log_h(v) for v in grid])
        assert abs(state.v_hat - grid[vals.argmax()]) <= 1e-3

    def test_nonfinite_init_raises(self):
        def log_h(v):
            return -np.inf
        with pytest.raises(AdaptationError):
            adapt(log_h, init=0.0)

    def test_escape_raises(self):
        # strictly increasing log integrand walks out of the search box
        with pytest.raises(AdaptationError):
            adapt(lambda v: v, init=0.0)


class TestAghq:
    @pytest.mark.parametrize("k", [1, 2, 3, 5, 10, 25])
    @pytest.mark.parametrize("var", [0.25, 1.0, 4.0])
    def test_gaussian_exact_any_k(self, k, var):
        # adapted rule integrates a normal density to exactly 1
        state = AdaptiveState(v_hat=0.0, s_hat=math.sqrt(var))
        got = aghq_log_integral(gaussian_logpdf(0.0, var), gh_rule(k), state)
        assert got == pytest.approx(0.0, abs=1e-10)

    def test_laplace_identity_at_k1(self):
        log_h = gaussian_logpdf(0.7, 0.3)
        state = adapt(log_h, init=0.0)
        got = aghq_log_integral(log_h, gh_rule(1), state)
        want = log_h(state.v_hat) + 0.5 * math.log(2 * math.pi * state.s_hat ** 2)
        assert got == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("k", [2, 5, 10])
    def test_polynomial_moments(self, k):
        # h = N(0, var) * positive polynomial of degree 2k-2:
        # (v^(k-1) + 1)^2 = v^(2k-2) + 2 v^(k-1) + 1, Gaussian moments known
        var = 0.8
        sd = math.sqrt(var)

        def log_h(v):
            poly = (v ** (k - 1) + 1.0) ** 2
            return gaussian_logpdf(0.0, var)(v) + math.log(poly)

        def gauss_moment(j):
            if j % 2:
                return 0.0
            return sd ** j * math.prod(range(1, j, 2))  # (j-1)!!

        want = gauss_moment(2 * k - 2) + 2 * gauss_moment(k - 1) + 1.0
        state = AdaptiveState(v_hat=0.0, s_hat=sd)
        got = aghq_log_integral(log_h, gh_rule(k), state)
        assert math.exp(got) == pytest.approx(want, rel=1e-8)

    def test_all_minus_inf_raises(self):
        state = AdaptiveState(v_hat=0.0, s_hat=1.0)
        with pytest.raises(IntegrationError):
            aghq_log_integral(lambda v: -np.inf, gh_rule(5), state)

    def test_monotone_refinement_on_pt_integrand(self):
        # |AGHQ(k) - AGHQ(25)| nonincreasing over k = 1, 3, 5, 10, 15
        kappa, table = oracles.pt_poly_table(3.0, -1.0, 30)
        y = [7, 12, 3, 22]
        sigma2 = 0.5

        def log_h(v):
            s = -0.5 * v * v / sigma2 - 0.5 * math.log(2 * math.pi * sigma2)
            for yi in y:
                s += math.log(oracles.pt_pmf_from_table(yi, math.exp(1.8 + v), kappa, table))
            return s

        state = adapt(log_h, init=0.0)
        ref = aghq_log_integral(log_h, gh_rule(25), state)
        errs = [abs(aghq_log_integral(log_h, gh_rule(k), state) - ref)
                for k in (1, 3, 5, 10, 15)]
        for lo, hi in zip(errs[1:], errs[:-1]):
            assert lo <= hi + 1e-10
