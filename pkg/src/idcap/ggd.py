"""Heteroscedastic generalized Gaussian distribution (GGD).

Density::

    p(y; mu, alpha, beta) = beta / (2 alpha Gamma(1/beta)) * exp(-(|y - mu| / alpha)^beta)

Every function here broadcasts over numpy arrays. The training loss uses the
three-term negative log-likelihood that drops the constant ``log 2`` of the
full density (see :func:`nll_term`).
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .special import digamma, log_gamma

LN2 = float(np.log(2.0))
# residuals below this count as "at the mode" for the subgradient rule
MODE_EPS = 1e-12


@dataclass(frozen=True)
class GGDParams:
    mu: float
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("mu", "alpha", "beta"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
        if np.any(np.asarray(self.alpha) <= 0) or np.any(np.asarray(self.beta) <= 0):
            raise ValueError("alpha and beta must be positive")


class GGDGrad(NamedTuple):
    d_mu: np.ndarray
    d_alpha: np.ndarray
    d_beta: np.ndarray
    at_mode: np.ndarray  # True where the subgradient 0 was substituted for d_mu


def _validate(alpha, beta):
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
        raise ValueError("alpha and beta must be finite")
    if np.any(alpha <= 0) or np.any(beta <= 0):
        raise ValueError("alpha and beta must be positive")
    return alpha, beta


def log_pdf(y, mu, alpha, beta):
    alpha, beta = _validate(alpha, beta)
    z = np.abs(np.asarray(y, dtype=np.float64) - mu) / alpha
    return np.log(beta / (2.0 * alpha)) - log_gamma(1.0 / beta) - z**beta


def ggd_log_pdf(y, p: GGDParams):
    return log_pdf(y, p.mu, p.alpha, p.beta)


def variance(alpha, beta):
    """``alpha^2 Gamma(3/beta) / Gamma(1/beta)``, evaluated in log space."""
    alpha, beta = _validate(alpha, beta)
    return np.exp(2.0 * np.log(alpha) + log_gamma(3.0 / beta) - log_gamma(1.0 / beta))


def sample(mu, alpha, beta, rng, size=None):
    """Draw ``mu + s * alpha * G^(1/beta)`` with ``G ~ Gamma(1/beta, 1)`` and a random sign ``s``."""
    alpha, beta = _validate(alpha, beta)
    if size is None:
        size = np.broadcast(np.asarray(mu), alpha, beta).shape
    g = rng.gamma(1.0 / beta, 1.0, size=size)
    sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
    return mu + sign * alpha * g ** (1.0 / beta)


def ggd_sample(p: GGDParams, rng, size=None):
    return sample(p.mu, p.alpha, p.beta, rng, size)


def nll_term(y, mu, alpha, beta):
    """Per-element ``(|y-mu|/alpha)^beta - log(beta/alpha) + log Gamma(1/beta)``.

    Equals ``-log_pdf - log 2``.
    """
    alpha, beta = _validate(alpha, beta)
    z = np.abs(np.asarray(y, dtype=np.float64) - mu) / alpha
    return z**beta - np.log(beta / alpha) + log_gamma(1.0 / beta)


def ggd_nll_term(y, p: GGDParams):
    return nll_term(y, p.mu, p.alpha, p.beta)


def nll_grad(y, mu, alpha, beta) -> GGDGrad:
    """Analytic partials of :func:`nll_term` with respect to ``mu``, ``alpha``, ``beta``.

    At the mode with ``beta <= 1`` the ``mu`` derivative does not exist; the
    subgradient 0 is returned there and ``at_mode`` is set.
    """
    alpha, beta = _validate(alpha, beta)
    r = np.asarray(y, dtype=np.float64) - mu
    absr = np.abs(r)
    z = absr / alpha
    at_mode = np.broadcast_to((absr < MODE_EPS) & (beta <= 1.0), np.broadcast(r, alpha, beta).shape)
    zb = z**beta
    with np.errstate(divide="ignore", invalid="ignore"):
        # d/dmu z^beta = -beta z^(beta-1) sign(r) / alpha = -beta zb sign(r) / |r|
        d_mu = np.where(absr > 0, -beta * zb * np.sign(r) / np.where(absr > 0, absr, 1.0), 0.0)
        zlog = np.where(z > 0, zb * np.log(np.where(z > 0, z, 1.0)), 0.0)
    d_mu = np.where(at_mode, 0.0, d_mu)
    d_alpha = (1.0 - beta * zb) / alpha
    d_beta = zlog - 1.0 / beta - digamma(1.0 / beta) / beta**2
    if np.ndim(d_mu) == 0:
        return GGDGrad(float(d_mu), float(d_alpha), float(d_beta), bool(at_mode))
    return GGDGrad(d_mu, np.broadcast_to(d_alpha, d_mu.shape), np.broadcast_to(d_beta, d_mu.shape), at_mode)


def ggd_nll_grad(y, p: GGDParams) -> GGDGrad:
    return nll_grad(y, p.mu, p.alpha, p.beta)
