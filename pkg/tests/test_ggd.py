import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from idcap import ggd
from idcap.ggd import GGDParams
from idcap.special import digamma, log_gamma


@pytest.mark.parametrize("x, expected", [(1.0, 0.0), (0.5, 0.5723649429), (5.0, 3.1780538303)])
def test_log_gamma_known_values(x, expected):
    assert log_gamma(x) == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("x, expected", [(1.0, -0.5772156649), (2.0, 0.4227843351), (0.5, -1.9635100260)])
def test_digamma_known_values(x, expected):
    assert digamma(x) == pytest.approx(expected, abs=1e-10)


def test_log_gamma_against_mpmath():
    xs = np.geomspace(1e-3, 1e3, 400)
    ours = log_gamma(xs)
    ref = np.array([float(mpmath.loggamma(x)) for x in xs])
    # relative, except near the zeros of log Gamma at 1 and 2
    assert np.max(np.abs(ours - ref) / np.maximum(1.0, np.abs(ref))) < 1e-12


def test_digamma_against_mpmath():
    xs = np.geomspace(1e-3, 1e3, 400)
    ref = np.array([float(mpmath.digamma(x)) for x in xs])
    assert np.max(np.abs(digamma(xs) - ref)) < 1e-10


@pytest.mark.parametrize("bad", [0.0, -1.0, np.inf, np.nan])
def test_special_domain_errors(bad):
    with pytest.raises(ValueError):
        log_gamma(bad)
    with pytest.raises(ValueError):
        digamma(bad)


def test_params_validation():
    with pytest.raises(ValueError):
        GGDParams(0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        GGDParams(0.0, 1.0, -2.0)
    with pytest.raises(ValueError):
        GGDParams(np.nan, 1.0, 2.0)


def test_log_pdf_examples():
    assert ggd.ggd_log_pdf(0.0, GGDParams(0.0, math.sqrt(2), 2.0)) == pytest.approx(-0.9189385332, abs=1e-9)
    assert ggd.ggd_log_pdf(0.0, GGDParams(0.0, 1.0, 1.0)) == pytest.approx(-0.6931472, abs=1e-7)
    assert ggd.ggd_log_pdf(1.0, GGDParams(0.0, 1.0, 1.0)) == pytest.approx(-1.6931472, abs=1e-7)


@given(
    mu=st.floats(-5, 5),
    sigma=st.floats(0.05, 5),
    y=st.floats(-10, 10),
)
def test_gaussian_reduction(mu, sigma, y):
    ours = ggd.log_pdf(y, mu, sigma * math.sqrt(2.0), 2.0)
    assert abs(ours - stats.norm.logpdf(y, mu, sigma)) < 1e-10


@given(mu=st.floats(-5, 5), b=st.floats(0.05, 5), y=st.floats(-10, 10))
def test_laplace_reduction(mu, b, y):
    assert abs(ggd.log_pdf(y, mu, b, 1.0) - stats.laplace.logpdf(y, mu, b)) < 1e-10


@pytest.mark.parametrize("beta", [0.7, 1.0, 1.5, 2.0, 3.0])
def test_normalization(beta):
    mu, alpha = 0.3, 0.8
    # tail mass beyond alpha * 40^(1/beta) is Q(1/beta, 40) < 1e-15
    half = alpha * 40.0 ** (1.0 / beta)
    f = lambda y: math.exp(ggd.log_pdf(y, mu, alpha, beta))
    # split at the mode, where the density has a kink for beta <= 1
    left, _ = integrate.quad(f, mu - half, mu, limit=200, epsabs=1e-13, epsrel=1e-12)
    right, _ = integrate.quad(f, mu, mu + half, limit=200, epsabs=1e-13, epsrel=1e-12)
    assert abs(left + right - 1.0) < 1e-6


@pytest.mark.parametrize("alpha, beta, expected", [(1.0, 2.0, 0.5), (1.0, 1.0, 2.0)])
def test_variance_closed_cases(alpha, beta, expected):
    assert ggd.variance(alpha, beta) == pytest.approx(expected, rel=1e-13)


def test_variance_monte_carlo_example():
    rng = np.random.default_rng(11)
    draws = ggd.ggd_sample(GGDParams(0.0, 1.5, 0.8), rng, size=200_000)
    v = ggd.variance(1.5, 0.8)
    assert abs(draws.var() - v) / v < 0.02


@pytest.mark.parametrize("beta", [0.8, 1.0, 1.5, 2.0, 4.0])
@pytest.mark.parametrize("alpha", [0.1, 1.0, 2.5])
def test_variance_grid_monte_carlo(alpha, beta):
    rng = np.random.default_rng(int(1000 * beta + 10 * alpha))
    draws = ggd.sample(-0.4, alpha, beta, rng, size=200_000)
    v = ggd.variance(alpha, beta)
    assert abs(draws.var() - v) / v < 0.02


def test_sample_gaussian_ks():
    rng = np.random.default_rng(5)
    mu, alpha = 1.0, 0.6
    draws = ggd.sample(mu, alpha, 2.0, rng, size=100_000)
    res = stats.kstest(draws, stats.norm(mu, alpha / math.sqrt(2)).cdf)
    assert res.pvalue > 0.01


def test_sample_degenerate_scale():
    rng = np.random.default_rng(0)
    draws = ggd.sample(2.0, 1e-12, 1.5, rng, size=1000)
    assert np.max(np.abs(draws - 2.0)) < 1e-9


def test_nll_term_examples():
    assert ggd.ggd_nll_term(0.0, GGDParams(0.0, 1.0, 1.0)) == pytest.approx(0.0, abs=1e-14)
    assert ggd.ggd_nll_term(0.0, GGDParams(0.0, 1.0, 2.0)) == pytest.approx(-0.1207823, abs=1e-7)
    assert ggd.ggd_nll_term(1.0, GGDParams(0.0, 1.0, 1.0)) == pytest.approx(1.0, abs=1e-14)


@given(y=st.floats(-3, 3), mu=st.floats(-3, 3), alpha=st.floats(0.1, 3), beta=st.floats(0.3, 6))
def test_nll_is_shifted_log_pdf(y, mu, alpha, beta):
    # rel floor of a few ulps: z**beta reaches ~1e6 here, where one ulp exceeds 1e-10
    assert ggd.nll_term(y, mu, alpha, beta) == pytest.approx(-ggd.log_pdf(y, mu, alpha, beta) - ggd.LN2,
                                                             abs=1e-10, rel=1e-15)


def _fd(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


def test_nll_grad_finite_difference():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        y, mu = rng.uniform(-2, 2, size=2)
        alpha = rng.uniform(0.2, 2.0)
        beta = rng.uniform(1.0, 4.0)
        g = ggd.nll_grad(y, mu, alpha, beta)
        fd = (
            _fd(lambda m: ggd.nll_term(y, m, alpha, beta), mu),
            _fd(lambda a: ggd.nll_term(y, mu, a, beta), alpha),
            _fd(lambda b: ggd.nll_term(y, mu, alpha, b), beta),
        )
        for an, num in zip(g[:3], fd):
            worst = max(worst, abs(an - num) / max(abs(num), 1e-8))
    assert worst < 1e-4


def test_nll_grad_at_mode():
    g = ggd.ggd_nll_grad(0.5, GGDParams(0.5, 1.3, 2.0))
    assert g.d_mu == 0.0
    assert g.d_alpha == pytest.approx(1 / 1.3)
    assert not g.at_mode
    g = ggd.ggd_nll_grad(0.5, GGDParams(0.5, 1.3, 0.7))
    assert g.d_mu == 0.0 and g.at_mode
    assert g.d_alpha == pytest.approx(1 / 1.3)


def test_nll_grad_broadcasts():
    y = np.linspace(-1, 1, 6)
    g = ggd.nll_grad(y, 0.0, np.full(6, 0.5), 1.5)
    assert g.d_mu.shape == g.d_alpha.shape == g.d_beta.shape == (6,)


@settings(max_examples=50)
@given(alpha=st.floats(1e-3, 1e3), beta=st.floats(0.2, 10))
def test_variance_positive_finite(alpha, beta):
    v = ggd.variance(alpha, beta)
    assert np.isfinite(v) and v > 0
