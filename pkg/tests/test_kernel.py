"""Row-kernel tests: both evaluation paths against the reference recursion."""

import numpy as np
import pytest
from scipy import stats

from ptglmm import PtParams, pt_log_pmf_vector, pt_pmf_vector
from ptglmm._kernel import (
    _pt_rows_numpy,
    nb_logpmf_rows,
    pois_logpmf_rows,
    pt_logpmf_rows,
    pt_sample_rows,
)
from ptglmm.glmm import _pt_consts

CASES = [
    (3.0, 3.0, 0.5),
    (5.0, 3.0, -1.0),
    (5.0, 2.0, 0.5),
    (12.0, 3.0, -5.0),
    (0.5, 10.0, 0.75),
    (40.0, 6.0, 0.6),
]


def _rows_setup(mu_vals, d, a, kmax, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, kmax + 1, size=len(mu_vals)).astype(np.int64)
    logmu = np.log(np.asarray(mu_vals))
    c, kappa, rho = _pt_consts(d, a, kmax if kmax > 0 else 1)
    return y, logmu, c, kappa, rho


@pytest.mark.parametrize("mu,d,a", CASES)
def test_kernel_matches_reference(mu, d, a):
    kmax = 300
    y, logmu, c, kappa, rho = _rows_setup([mu] * 64, d, a, kmax)
    got = pt_logpmf_rows(y, logmu, c, kappa, rho)
    ref = pt_log_pmf_vector(PtParams(mu, d, a), kmax)
    np.testing.assert_allclose(got, ref[y], rtol=1e-11, atol=1e-11)


@pytest.mark.parametrize("mu,d,a", CASES[:3])
def test_numpy_fallback_matches_numba(mu, d, a):
    kmax = 150
    y, logmu, c, kappa, rho = _rows_setup([mu * f for f in (0.5, 1.0, 2.0, 4.0)] * 8,
                                          d, a, kmax, seed=3)
    got_nb = pt_logpmf_rows(y, logmu, c, kappa, rho)
    got_np = _pt_rows_numpy(y, logmu, kappa, rho)
    np.testing.assert_allclose(got_np, got_nb, rtol=1e-12, atol=1e-12)


def test_varying_means():
    d, a = 3.0, -1.0
    mus = np.exp(np.linspace(-1.0, 4.0, 40))
    kmax = 200
    y, logmu, c, kappa, rho = _rows_setup(mus, d, a, kmax, seed=5)
    got = pt_logpmf_rows(y, logmu, c, kappa, rho)
    for i, mu in enumerate(mus):
        want = pt_log_pmf_vector(PtParams(float(mu), d, a), int(y[i]))[y[i]]
        assert got[i] == pytest.approx(want, rel=1e-11, abs=1e-11), i


def test_underflowing_zero_prob_row():
    # mean so large that P(0) underflows: offsets must carry the value
    d, a = 3.0, 0.0
    c, kappa, rho = _pt_consts(d, a, 4)
    y = np.array([0, 2], dtype=np.int64)
    logmu = np.array([np.log(30000.0), np.log(30000.0)])
    out = pt_logpmf_rows(y, logmu, c, kappa, rho)
    assert out[0] == pytest.approx(-30000.0 * kappa, rel=1e-12)
    assert np.isfinite(out[1])


def test_poisson_rows_vs_scipy():
    y = np.arange(0, 60, dtype=np.int64)
    logmu = np.full(60, np.log(7.0))
    got = pois_logpmf_rows(y, logmu)
    np.testing.assert_allclose(got, stats.poisson.logpmf(y, 7.0), rtol=1e-12)


def test_nb_rows_vs_scipy():
    y = np.arange(0, 80, dtype=np.int64)
    mu, d = 6.0, 4.0
    got = nb_logpmf_rows(y, np.full(80, np.log(mu)), d)
    size, p = mu / (d - 1.0), 1.0 / d
    np.testing.assert_allclose(got, stats.nbinom.logpmf(y, size, p), rtol=1e-10)


class TestSampleRows:
    def test_matches_inverse_cdf(self):
        # same uniforms through the row sampler and a direct cdf inversion
        mu, d, a = 4.0, 3.0, -1.0
        rng = np.random.default_rng(21)
        u = rng.random(5000)
        c, kappa, rho = _pt_consts(d, a, 500)
        got = pt_sample_rows(np.full(u.size, mu), c, kappa, rho, u)
        cdf = np.cumsum(pt_pmf_vector(PtParams(mu, d, a), 400))
        want = np.searchsorted(cdf, u, side="left")
        np.testing.assert_array_equal(got, want)

    def test_insufficient_cap_flags_rows(self):
        mu, d, a = 50.0, 3.0, 0.5
        c, kappa, rho = _pt_consts(d, a, 6)  # deliberately tiny support
        out = pt_sample_rows(np.array([mu]), c, kappa, rho, np.array([0.999999]))
        assert out[0] == -1

    def test_heavy_tail_row_means(self):
        mu, d, a = 5.0, 3.0, 0.5
        rng = np.random.default_rng(2)
        u = rng.random(60_000)
        c, kappa, rho = _pt_consts(d, a, 3000)
        y = pt_sample_rows(np.full(u.size, mu), c, kappa, rho, u)
        assert np.all(y >= 0)
        se = np.sqrt(d * mu / u.size)
        assert abs(y.mean() - mu) < 4 * se
