"""Hypothesis-testing tests: Wald, LRT, boundary mixtures, BH adjustment."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ptglmm import (
    HypothesisSpec,
    TestRefusedError,
    bh_adjust,
    lr_test,
    wald_test,
)
from ptglmm.glmm import FitResult, ThetaFull


def make_fit(beta, vcov, coef_names=None, converged=True, loglik=-100.0,
             family="pt-glmm", tag="PT-GLMM"):
    beta = np.asarray(beta, dtype=float)
    names = coef_names or [f"b{i}" for i in range(beta.size)]
    return FitResult(
        theta_hat=ThetaFull(beta, 3.0, 0.0, 0.5),
        loglik=loglik,
        vcov=None if vcov is None else np.asarray(vcov, dtype=float),
        converged=converged,
        model_tag=tag,
        n_loglik_evals=100,
        coef_names=names,
        param_names=names + ["dispersion", "power", "ranef_var"],
        family=family,
        flags={},
        theta_start=ThetaFull(beta),
        n_obs=50,
        n_subjects=10,
    )


def pad_vcov(v):
    """Embed a beta-block into the full (p+3) covariance."""
    v = np.asarray(v, dtype=float)
    p = v.shape[0]
    out = np.eye(p + 3)
    out[:p, :p] = v
    return out


class TestHypothesisSpec:
    def test_rank_check(self):
        with pytest.raises(ValueError):
            HypothesisSpec(K=np.array([[1.0, 0.0], [2.0, 0.0]]))

    def test_b0_shape(self):
        with pytest.raises(ValueError):
            HypothesisSpec(K=np.array([[1.0, 0.0]]), b0=np.array([0.0, 1.0]))

    def test_named_selection(self):
        h = HypothesisSpec.for_coefficients(["b", "c"], ["a", "b", "c"])
        np.testing.assert_array_equal(h.K, [[0, 1, 0], [0, 0, 1]])
        assert h.df == 2


class TestWald:
    def test_scalar_case(self):
        fit = make_fit([2.0], pad_vcov([[4.0]]))
        res = wald_test(fit, HypothesisSpec(K=np.array([[1.0]])))
        assert res.statistic == pytest.approx(1.0, abs=1e-12)
        assert res.df == 1
        assert res.p_value == pytest.approx(0.3173105078629141, abs=1e-4)

    def test_b0_equal_estimate(self):
        fit = make_fit([2.0, -1.0], pad_vcov([[4.0, 0.3], [0.3, 2.0]]))
        hyp = HypothesisSpec(K=np.eye(2), b0=np.array([2.0, -1.0]))
        res = wald_test(fit, hyp)
        assert res.statistic == 0.0
        assert res.p_value == 1.0

    def test_joint_against_mpmath(self):
        mp = pytest.importorskip("mpmath")
        beta = np.array([0.8, -0.4, 0.25])
        V = np.array([[0.20, 0.05, -0.02],
                      [0.05, 0.30, 0.01],
                      [-0.02, 0.01, 0.15]])
        K = np.array([[1.0, 0.0, -1.0], [0.0, 2.0, 0.5]])
        fit = make_fit(beta, pad_vcov(V))
        res = wald_test(fit, HypothesisSpec(K=K))
        mp.mp.dps = 50
        Km = mp.matrix(K.tolist())
        Vm = mp.matrix(V.tolist())
        d = Km * mp.matrix(beta.tolist())
        M = Km * Vm * Km.T
        w = (d.T * (M ** -1) * d)[0, 0]
        assert res.statistic == pytest.approx(float(w), abs=1e-10)

    def test_row_scaling_invariance(self):
        beta = np.array([0.8, -0.4, 0.25])
        V = np.array([[0.20, 0.05, -0.02],
                      [0.05, 0.30, 0.01],
                      [-0.02, 0.01, 0.15]])
        fit = make_fit(beta, pad_vcov(V))
        K = np.array([[1.0, 0.0, -1.0], [0.0, 2.0, 0.5]])
        base = wald_test(fit, HypothesisSpec(K=K)).statistic

        @given(st.tuples(
            st.floats(min_value=0.01, max_value=100.0),
            st.floats(min_value=0.01, max_value=100.0),
        ))
        @settings(max_examples=40, deadline=None)
        def check(scales):
            s = np.array(scales)
            res = wald_test(fit, HypothesisSpec(K=s[:, None] * K))
            assert res.statistic == pytest.approx(base, rel=1e-9)

        check()

    def test_refused_without_vcov(self):
        fit = make_fit([1.0], None)
        fit.flags["vcov_reason"] = "estimate at the domain boundary"
        with pytest.raises(TestRefusedError):
            wald_test(fit, HypothesisSpec(K=np.array([[1.0]])))

    def test_refused_unconverged(self):
        fit = make_fit([1.0], pad_vcov([[1.0]]), converged=False)
        with pytest.raises(TestRefusedError):
            wald_test(fit, HypothesisSpec(K=np.array([[1.0]])))


class TestLrt:
    def test_identical_fits(self):
        a = make_fit([1.0], pad_vcov([[1.0]]), loglik=-50.0)
        res = lr_test(a, a, df=1)
        assert res.statistic == 0.0
        assert res.p_value == 1.0

    def test_chi2_quantile(self):
        full = make_fit([1.0], pad_vcov([[1.0]]), loglik=-50.0)
        null = make_fit([1.0], pad_vcov([[1.0]]), loglik=-50.0 - 3.841 / 2.0)
        res = lr_test(full, null, df=1)
        assert res.p_value == pytest.approx(0.05, abs=1e-4)

    def test_boundary_mixture(self):
        full = make_fit([1.0], pad_vcov([[1.0]]), loglik=-50.0)
        null = make_fit([1.0], pad_vcov([[1.0]]), loglik=-50.0 - 2.706 / 2.0)
        res = lr_test(full, null, df=1, boundary=True)
        assert res.kind == "LRT-boundary"
        assert res.p_value == pytest.approx(0.05, abs=1e-4)

    def test_boundary_zero_statistic(self):
        a = make_fit([1.0], pad_vcov([[1.0]]), loglik=-50.0)
        res = lr_test(a, a, df=1, boundary=True)
        assert res.p_value == 1.0

    def test_nesting_violation_flagged(self):
        full = make_fit([1.0], pad_vcov([[1.0]]), loglik=-51.0)
        null = make_fit([1.0], pad_vcov([[1.0]]), loglik=-50.0)
        with pytest.warns(RuntimeWarning):
            res = lr_test(full, null, df=1)
        assert res.statistic == 0.0
        assert "nesting_violation" in res.flags


class TestBh:
    def test_all_equal_adjusted(self):
        got = bh_adjust([0.01, 0.02, 0.03, 0.04])
        np.testing.assert_allclose(got, [0.04, 0.04, 0.04, 0.04], atol=1e-15)

    def test_single_value_unchanged(self):
        assert bh_adjust([0.37])[0] == pytest.approx(0.37)

    def test_against_direct_formula(self):
        p = [0.005, 0.011, 0.02, 0.22, 0.7]
        np.testing.assert_allclose(bh_adjust(p), oracles.bh_direct(p), atol=1e-15)

    def test_nan_passthrough(self):
        with pytest.warns(RuntimeWarning):
            got = bh_adjust([0.01, np.nan, 0.04])
        assert np.isnan(got[1])
        # m counts only the finite entries
        np.testing.assert_allclose(got[[0, 2]], oracles.bh_direct([0.01, 0.04]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            bh_adjust([0.5, 1.2])

    @given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=60))
    @settings(max_examples=150, deadline=None)
    def test_properties(self, p):
        adj = bh_adjust(p)
        p = np.asarray(p)
        # never below the raw p-value, capped at 1
        assert np.all(adj >= p - 1e-15)
        assert np.all(adj <= 1.0 + 1e-15)
        # order preserving
        order = np.argsort(p, kind="stable")
        assert np.all(np.diff(adj[order]) >= -1e-12)

    @given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=40))
    @settings(max_examples=60, deadline=None)
    def test_matches_direct_formula_property(self, p):
        np.testing.assert_allclose(bh_adjust(p), oracles.bh_direct(p), atol=1e-12)
