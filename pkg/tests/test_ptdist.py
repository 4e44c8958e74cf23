"""Distribution-level tests: corners, invariants, estimators, sampling."""

import math

import numpy as np
import pytest
from scipy import stats

import oracles
from ptglmm import (
    PmfEvaluationError,
    PtDomainError,
    PtParams,
    pt_log_pmf,
    pt_log_pmf_vector,
    pt_mom_estimates,
    pt_moments,
    pt_pmf,
    pt_pmf_vector,
    pt_sample,
)
from ptglmm.ptdist import A_PROFILE_GRID, EPS_D, profile_power

GRID_MU = (0.5, 2.0, 10.0)
GRID_D = (1.0, 3.0, 10.0)
GRID_A = (-5.0, -1.0, 0.0, 0.5)


class TestDomain:
    def test_valid_corners(self):
        PtParams(2.0, 1.0, 1.0)   # Poisson
        PtParams(2.0, 3.0, 0.0)   # NB
        PtParams(2.0, 3.0, -50.0)

    @pytest.mark.parametrize("mu,d,a", [
        (0.0, 3.0, 0.0),
        (-1.0, 3.0, 0.0),
        (2.0, 0.9, 0.0),
        (2.0, 3.0, 1.5),
        (2.0, 3.0, 1.0),   # power 1 demands dispersion 1
        (np.nan, 3.0, 0.0),
    ])
    def test_invalid(self, mu, d, a):
        with pytest.raises(PtDomainError):
            PtParams(mu, d, a)


class TestPmfCorners:
    def test_poisson_zero(self):
        assert pt_pmf(0, PtParams(2.0, 1.0, 1.0)) == pytest.approx(math.exp(-2.0), abs=1e-15)

    def test_poisson_full(self):
        params = PtParams(2.0, 1.0, 1.0)
        got = pt_pmf_vector(params, 60)
        want = np.exp(oracles.poisson_logpmf(np.arange(61), 2.0))
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_nb_closed_form(self):
        params = PtParams(3.0, 3.0, 0.0)
        got = pt_pmf_vector(params, 50)
        want = np.exp(oracles.nb_logpmf(np.arange(51), 3.0, 3.0))
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_polya_aeppli_zero(self):
        # a = -1 equals the compound Poisson-geometric law
        got = pt_pmf(0, PtParams(5.0, 3.0, -1.0))
        want = oracles.polya_aeppli_pmf(0, 5.0, 3.0)
        assert got == pytest.approx(want, abs=1e-14)

    def test_polya_aeppli_body(self):
        params = PtParams(5.0, 3.0, -1.0)
        got = pt_pmf_vector(params, 30)
        for k in range(31):
            assert got[k] == pytest.approx(oracles.polya_aeppli_pmf(k, 5.0, 3.0),
                                           abs=1e-12), k

    def test_pig_corner(self):
        # a = 0.5 equals an independently integrated Poisson-inverse-Gaussian
        params = PtParams(5.0, 3.0, 0.5)
        got = pt_pmf_vector(params, 25)
        for k in (0, 1, 2, 5, 10, 25):
            assert got[k] == pytest.approx(oracles.pig_pmf(k, 5.0, 3.0), abs=1e-8), k


class TestLogPmf:
    def test_matches_pmf(self):
        params = PtParams(3.0, 3.0, -1.0)
        lp = pt_log_pmf_vector(params, 200)
        p = pt_pmf_vector(params, 200)
        mask = p > 1e-300
        np.testing.assert_allclose(np.exp(lp[mask]), p[mask], rtol=1e-12)

    def test_poisson_zero_exact(self):
        assert pt_log_pmf(0, PtParams(2.0, 1.0, 1.0)) == -2.0

    def test_nb_tail_value(self):
        got = pt_log_pmf(10, PtParams(3.0, 3.0, 0.0))
        want = float(oracles.nb_logpmf(10, 3.0, 3.0))
        assert got == pytest.approx(want, rel=1e-12)

    def test_deep_tail_finite(self):
        # heavy-tailed parameters, count far beyond the bulk
        lp = pt_log_pmf(10_000, PtParams(5.0, 2.0, 0.5))
        assert np.isfinite(lp)
        assert lp < -3000.0

    def test_deep_tail_against_extended_precision(self):
        # rerun the positive-term recursion in 80-bit floats; at count 3000
        # the probability is ~1e-530, far below double underflow
        mu, d, a = 5.0, 2.0, 0.5
        kmax = 3000
        c = (d - 1.0) / (d - a)
        from scipy.special import gammaln

        j = np.arange(kmax, dtype=np.longdouble)
        log_rho = ((1.0 - a) * np.log1p(np.longdouble(-c)) + j * np.log(np.longdouble(c))
                   + gammaln((j + 1.0 - a).astype(float)).astype(np.longdouble)
                   - np.longdouble(float(gammaln(1.0 - a)))
                   - gammaln((j + 1.0).astype(float)).astype(np.longdouble))
        rho = np.exp(log_rho) * np.longdouble(mu)
        kappa = -math.expm1(a * math.log1p(-c)) * (1.0 - c) ** (1.0 - a) / (a * c)
        p = np.zeros(kmax + 1, dtype=np.longdouble)
        p[0] = np.exp(np.longdouble(-mu * kappa))
        for k in range(kmax):
            p[k + 1] = (rho[: k + 1] @ p[k::-1]) / np.longdouble(k + 1.0)
        want = float(np.log(p[kmax]))
        got = pt_log_pmf(kmax, PtParams(mu, d, a))
        assert got == pytest.approx(want, rel=1e-10)

    def test_bad_count(self):
        with pytest.raises(ValueError):
            pt_log_pmf(-1, PtParams(2.0, 3.0, 0.0))


class TestNormalizationGrid:
    @pytest.mark.parametrize("mu", GRID_MU)
    @pytest.mark.parametrize("d", GRID_D)
    @pytest.mark.parametrize("a", GRID_A)
    def test_mass_reaches_one(self, mu, d, a):
        from ptglmm.ptdist import _support_for_mass

        pmf, _ = _support_for_mass(PtParams(mu, d, a), 1e-9, 500_000)
        assert pmf.sum() >= 1.0 - 1e-8


class TestShapeDirections:
    def test_zero_inflation_with_negative_power(self):
        base = dict(mean=5.0, dispersion=3.0)
        p_zi = pt_pmf(0, PtParams(power=-5.0, **base))
        p_ht = pt_pmf(0, PtParams(power=0.5, **base))
        assert p_zi > p_ht

    def test_heavy_tail_with_positive_power(self):
        base = dict(mean=5.0, dispersion=3.0)
        kmax = 400
        tail_ht = pt_pmf_vector(PtParams(power=0.5, **base), kmax)[16:].sum()
        tail_zi = pt_pmf_vector(PtParams(power=-5.0, **base), kmax)[16:].sum()
        assert tail_ht > tail_zi  # P(Y > 3 mu) ordering


class TestMoments:
    @pytest.mark.parametrize("mu,d,a,want", [
        (4.0, 1.0, 1.0, (4.0, 4.0)),
        (3.0, 3.0, 0.0, (3.0, 9.0)),
    ])
    def test_closed_form(self, mu, d, a, want):
        assert pt_moments(PtParams(mu, d, a)) == pytest.approx(want, abs=1e-12)

    def test_nb_match(self):
        # NB(size = mu/(D-1), success 1/D) moments
        size, p = 3.0 / 2.0, 1.0 / 3.0
        mean = size * (1 - p) / p
        var = size * (1 - p) / p ** 2
        assert pt_moments(PtParams(3.0, 3.0, 0.0)) == pytest.approx((mean, var))

    @pytest.mark.parametrize("mu,d,a", [
        (5.0, 2.0, -1.0), (5.0, 2.0, 0.5), (2.0, 10.0, -5.0), (0.5, 3.0, 0.0),
    ])
    def test_truncated_sum(self, mu, d, a):
        params = PtParams(mu, d, a)
        pmf = pt_pmf_vector(params, int(mu + 40 * math.sqrt(d * mu) + 200))
        k = np.arange(pmf.size)
        m1 = float(k @ pmf)
        m2 = float((k * k) @ pmf)
        mean, var = pt_moments(params)
        assert m1 == pytest.approx(mean, abs=1e-6)
        assert m2 - m1 * m1 == pytest.approx(var, abs=1e-6)


class TestMomentEstimates:
    def test_degenerate_sample(self):
        est = pt_mom_estimates([2, 2, 2, 2])
        assert est.degenerate
        assert est.mean == 2.0
        assert est.dispersion == 1.0 + EPS_D
        assert est.power == 0.0

    def test_too_small(self):
        with pytest.raises(ValueError):
            pt_mom_estimates([1, 2])

    def test_nb_sample_dispersion(self):
        y = pt_sample(PtParams(5.0, 3.0, 0.0), 100_000, seed=1)
        est = pt_mom_estimates(y)
        assert abs(est.dispersion - 3.0) / 3.0 < 0.15
        assert est.mean == pytest.approx(5.0, rel=0.05)

    def test_poisson_sample_dispersion_tends_to_one(self):
        rng = np.random.default_rng(3)
        y = rng.poisson(4.0, 100_000)
        est = pt_mom_estimates(y)
        assert est.dispersion < 1.05

    def test_profile_grid_membership(self):
        y = pt_sample(PtParams(5.0, 3.0, 0.0), 2000, seed=2)
        est = pt_mom_estimates(y)
        assert est.power in A_PROFILE_GRID

    def test_profile_power_recovers_nb(self):
        # Monte Carlo derivation: with 4000 draws the argmax lands on the
        # generating power 85/100 times (the profile is third-moment
        # information, so small samples only localize to a neighborhood)
        hits = 0
        for rep in range(100):
            y = pt_sample(PtParams(5.0, 3.0, 0.0), 4000, seed=1000 + rep)
            a_hat = profile_power(y, float(y.mean()),
                                  max(1.0 + EPS_D, y.var(ddof=1) / y.mean()))
            hits += a_hat == 0.0
        assert hits >= 80

    def test_profile_power_neighborhood_small_sample(self):
        near = 0
        for rep in range(100):
            y = pt_sample(PtParams(5.0, 3.0, 0.0), 400, seed=2000 + rep)
            a_hat = profile_power(y, float(y.mean()),
                                  max(1.0 + EPS_D, y.var(ddof=1) / y.mean()))
            near += abs(a_hat) <= 1.0
        assert near >= 90


class TestSampling:
    def test_deterministic(self):
        params = PtParams(5.0, 3.0, -1.0)
        a = pt_sample(params, 1000, seed=11)
        b = pt_sample(params, 1000, seed=11)
        np.testing.assert_array_equal(a, b)

    def test_poisson_gof(self):
        params = PtParams(2.0, 1.0, 1.0)
        y = pt_sample(params, 100_000, seed=5)
        kmax = int(y.max())
        expected = 100_000 * np.exp(oracles.poisson_logpmf(np.arange(kmax + 1), 2.0))
        observed = np.bincount(y, minlength=kmax + 1).astype(float)
        # pool the tail so every expected cell count is >= 5
        cut = int(np.argmax(np.cumsum(expected[::-1])[::-1] < 5.0)) or kmax + 1
        obs = np.append(observed[:cut], observed[cut:].sum())
        exp = np.append(expected[:cut], 100_000 - expected[:cut].sum())
        chi2 = float(((obs - exp) ** 2 / exp).sum())
        p = stats.chi2.sf(chi2, obs.size - 1)
        assert p > 0.01

    def test_mean_within_mc_error(self):
        params = PtParams(5.0, 3.0, -1.0)
        n = 100_000
        y = pt_sample(params, n, seed=9)
        se = math.sqrt(3.0 * 5.0 / n)
        assert abs(y.mean() - 5.0) < 3.0 * se

    def test_marginal_matches_pmf(self):
        params = PtParams(3.0, 4.0, 0.5)
        y = pt_sample(params, 200_000, seed=13)
        pmf = pt_pmf_vector(params, int(y.max()))
        emp = np.bincount(y) / y.size
        np.testing.assert_allclose(emp[:10], pmf[:10], atol=4.0 * math.sqrt(0.25 / y.size))

    def test_bad_n(self):
        with pytest.raises(ValueError):
            pt_sample(PtParams(2.0, 3.0, 0.0), 0, seed=1)


class TestEvaluationError:
    def test_error_carries_count(self):
        err = PmfEvaluationError(17, "boom")
        assert err.k == 17
