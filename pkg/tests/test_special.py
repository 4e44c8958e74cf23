"""Incomplete-gamma / chi-square accuracy against scipy and mpmath."""

import numpy as np
import pytest
from scipy import special as sps
from scipy import stats

from ptglmm import chi2_cdf, chi2_sf, gamma_p, gamma_q

SHAPES = (0.25, 0.5, 1.0, 2.5, 7.0, 33.0, 150.0)
XS = (1e-8, 0.01, 0.3, 1.0, 2.0, 5.0, 20.0, 80.0, 400.0)


@pytest.mark.parametrize("s", SHAPES)
@pytest.mark.parametrize("x", XS)
def test_gamma_p_vs_scipy(s, x):
    assert gamma_p(s, x) == pytest.approx(float(sps.gammainc(s, x)), rel=1e-11, abs=1e-300)


@pytest.mark.parametrize("s", SHAPES)
@pytest.mark.parametrize("x", XS)
def test_gamma_q_vs_scipy(s, x):
    assert gamma_q(s, x) == pytest.approx(float(sps.gammaincc(s, x)), rel=1e-11, abs=1e-300)


def test_complementarity():
    for s in SHAPES:
        for x in XS:
            assert gamma_p(s, x) + gamma_q(s, x) == pytest.approx(1.0, abs=1e-13)


def test_mpmath_spot_checks():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 40
    for s, x in [(0.5, 3.7), (4.0, 1.2), (25.0, 60.0)]:
        want = float(mp.gammainc(s, 0, x, regularized=True))
        assert gamma_p(s, x) == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("df", (1, 2, 3, 5, 10, 42))
@pytest.mark.parametrize("x", (0.0, 0.5, 1.0, 3.841, 10.0, 55.0))
def test_chi2_vs_scipy(df, x):
    assert chi2_sf(x, df) == pytest.approx(float(stats.chi2.sf(x, df)), rel=1e-10, abs=1e-300)
    assert chi2_cdf(x, df) == pytest.approx(float(stats.chi2.cdf(x, df)), rel=1e-10, abs=1e-300)


def test_known_quantiles():
    # classic table values used downstream by the inference tests
    assert chi2_sf(3.841, 1) == pytest.approx(0.05, abs=5e-5)
    assert chi2_sf(2.706, 1) == pytest.approx(0.10, abs=5e-5)
    assert chi2_sf(1.0, 1) == pytest.approx(0.3173105078629141, rel=1e-10)


def test_domain_errors():
    with pytest.raises(ValueError):
        gamma_p(0.0, 1.0)
    with pytest.raises(ValueError):
        gamma_q(1.0, -1.0)
    with pytest.raises(ValueError):
        chi2_sf(1.0, 0)


def test_edges():
    assert gamma_p(2.0, 0.0) == 0.0
    assert gamma_q(2.0, 0.0) == 1.0
    assert chi2_sf(0.0, 3) == 1.0
    assert chi2_cdf(0.0, 3) == 0.0
    assert chi2_sf(1e6, 1) == pytest.approx(0.0, abs=1e-300)
