"""Negative-binomial log-probability, batch negative log-likelihood and gradients.

The NB distribution is parameterised by its mean ``mu`` and dispersion
``theta`` (variance ``mu + mu**2 / theta``).  ``log_gamma`` and ``digamma``
are implemented here (argument shift + asymptotic series) so the likelihood
does not depend on any special-function library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

#: Means below this floor are clamped before likelihood evaluation.
MU_FLOOR = 1e-8

_SHIFT_TO = 10.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Stirling series coefficients B_2k / (2k (2k - 1)), k = 1..7
_LGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)
# leading Stirling-error coefficients for arguments above 15
_STIRLERR = (1.0 / 12.0, 1.0 / 360.0, 1.0 / 1260.0, 1.0 / 1680.0, 1.0 / 1188.0)
# B_2k / (2k), k = 1..7
_DIGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    5.0 / 660.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)


@dataclass(frozen=True)
class NbParams:
    """Mean and dispersion of a negative-binomial distribution."""

    mu: float
    theta: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.theta)):
            raise ValueError("NB parameters must be finite")
        if self.mu <= 0 or self.theta <= 0:
            raise ValueError(f"NB parameters must be positive, got mu={self.mu}, theta={self.theta}")


def _as_positive(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    if np.any(arr <= 0):
        raise ValueError(f"{name} must be strictly positive")
    return arr


def _shift_count(x):
    """Number of unit steps that bring ``x`` to at least 10."""
    return np.ceil(np.maximum(_SHIFT_TO - x, 0.0))


def _shift_up(x):
    """Return (y, prod) with y = x + n >= 10 and prod = x (x+1) ... (x+n-1)."""
    n = _shift_count(x)
    prod = np.ones_like(x)
    for i in range(int(n.max(initial=0.0))):
        prod *= np.where(n > i, x + i, 1.0)
    return x + n, prod


def log_gamma(x):
    """Natural log of the Gamma function for positive arguments.

    Arguments below 10 are shifted up with the recurrence
    ``lgamma(x) = lgamma(x + n) - log(x (x+1) ... (x+n-1))`` and the Stirling
    series is evaluated at the shifted point.  Works elementwise on arrays.
    """
    arr = _as_positive(x, "log_gamma argument")
    y, prod = _shift_up(arr)
    inv = 1.0 / y
    inv2 = inv * inv
    series = 0.0
    for coef in reversed(_LGAMMA_SERIES):
        series = series * inv2 + coef
    out = (y - 0.5) * np.log(y) - y + _HALF_LOG_2PI + series * inv - np.log(prod)
    return float(out) if out.ndim == 0 else out


def digamma(x):
    """Derivative of ``log_gamma`` (recurrence + asymptotic expansion)."""
    arr = _as_positive(x, "digamma argument")
    n = _shift_count(arr)
    acc = np.zeros_like(arr)
    for i in range(int(n.max(initial=0.0))):
        acc -= np.where(n > i, 1.0 / (arr + i), 0.0)
    y = arr + n
    inv2 = 1.0 / (y * y)
    series = 0.0
    for coef in reversed(_DIGAMMA_SERIES):
        series = series * inv2 + coef
    out = np.log(y) - 0.5 / y - series * inv2 + acc
    return float(out) if out.ndim == 0 else out


def _stirlerr(n):
    """log(n!) - log(sqrt(2 pi n) (n/e)^n) for n > 0."""
    n = np.asarray(n, dtype=np.float64)
    big = n > 15.0
    nb = np.where(big, n, 16.0)
    nn = nb * nb
    series = (_STIRLERR[0] - (_STIRLERR[1] - (_STIRLERR[2] - (_STIRLERR[3] - _STIRLERR[4] / nn) / nn) / nn) / nn) / nb
    ns = np.where(big, 1.0, n)
    direct = log_gamma(ns + 1.0) - (ns + 0.5) * np.log(ns) + ns - _HALF_LOG_2PI
    return np.where(big, series, direct)


def _bd0(x, m):
    """Deviance term x log(x/m) + m - x, accurate when x is close to m."""
    d = x - m
    near = np.abs(d) < 0.1 * (x + m)
    v = np.where(near, d / (x + m), 0.0)
    acc = d * v
    ej = 2.0 * x * v
    v2 = v * v
    for j in range(1, 14):
        ej = ej * v2
        acc = acc + ej / (2 * j + 1)
    xs = np.where(x > 0, x, 1.0)
    far = np.where(x > 0, x * np.log(xs / m), 0.0) + m - x
    return np.where(near, acc, far)


def nb_log_pmf(k, mu, theta=None):
    """Log-probability of count ``k`` under NB(mu, theta).

    ``mu`` may also be an :class:`NbParams`, in which case ``theta`` is
    taken from it.  Broadcasts over array arguments.  Uses the saddle-point
    form (Stirling error plus deviance terms) so large, nearly cancelling
    terms never appear; values are accurate to a few ulps.
    """
    if isinstance(mu, NbParams):
        mu, theta = mu.mu, mu.theta
    k = np.asarray(k, dtype=np.float64)
    if np.any(k < 0) or not np.all(np.isfinite(k)):
        raise ValueError("counts must be finite and nonnegative")
    mu = np.maximum(_as_positive(mu, "mu"), MU_FLOOR)
    theta = _as_positive(theta, "theta")
    k, mu, theta = np.broadcast_arrays(k, mu, theta)

    # k = 0: theta * log(theta / (theta + mu))
    zero = np.where(theta < mu, theta * np.log(theta / (theta + mu)), theta * np.log1p(-mu / (theta + mu)))

    # k tiny relative to theta (Poisson-like regime)
    lp = np.where(theta < mu, np.log(theta / (1.0 + theta / mu)), np.log(mu / (1.0 + mu / theta)))
    tiny = k * lp - mu - log_gamma(k + 1.0) + np.log1p(k * (k - 1.0) / (2.0 * theta))

    # general case: binomial saddle-point form with n = k + theta trials
    kk = np.where(k > 0, k, 1.0)
    n = kk + theta
    p_fail = theta / (theta + mu)
    p_succ = mu / (theta + mu)
    lc = _stirlerr(n) - _stirlerr(theta) - _stirlerr(kk) - _bd0(theta, n * p_fail) - _bd0(kk, n * p_succ)
    lf = 2.0 * _HALF_LOG_2PI + np.log(theta) + np.log1p(-theta / n)
    general = np.log(theta / n) + lc - 0.5 * lf

    out = np.where(k == 0, zero, np.where(k < 1e-10 * theta, tiny, general))
    return float(out) if out.ndim == 0 else out


def _check_batch(E, Mu, theta):
    E = np.asarray(E, dtype=np.float64)
    Mu = np.asarray(Mu, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if E.ndim != 2 or Mu.shape != E.shape:
        raise ValueError(f"counts {E.shape} and means {Mu.shape} must be equal 2-d shapes")
    if theta.shape != (E.shape[1],):
        raise ValueError(f"theta must have shape ({E.shape[1]},), got {theta.shape}")
    if np.any(E < 0):
        raise ValueError("counts must be nonnegative")
    _as_positive(Mu, "mean")
    _as_positive(theta, "dispersion")
    return E, Mu, theta


def nb_nll_batch(E, Mu, theta):
    """Mean-over-rows NB negative log-likelihood, summed over genes.

    Evaluates the five-term expansion
    ``lgamma(k+theta) - lgamma(theta) - lgamma(k+1)
    + theta (log theta - log(theta+mu)) + k (log mu - log(theta+mu))``.
    """
    E, Mu, theta = _check_batch(E, Mu, theta)
    mu = np.maximum(Mu, MU_FLOOR)
    log_denom = np.log(theta + mu)
    ll = (
        log_gamma(E + theta)
        - log_gamma(theta)
        - log_gamma(E + 1.0)
        + theta * (np.log(theta) - log_denom)
        + E * (np.log(mu) - log_denom)
    )
    return -float(np.sum(ll)) / E.shape[0]


def nb_nll_grads(E, Mu, theta):
    """Analytic gradients of :func:`nb_nll_batch` w.r.t. ``Mu`` and ``theta``.

    Coordinates where ``Mu`` sits below the clamp floor get zero gradient.
    """
    E, Mu, theta = _check_batch(E, Mu, theta)
    n = E.shape[0]
    clamped = Mu < MU_FLOOR
    mu = np.maximum(Mu, MU_FLOOR)
    ratio = (E + theta) / (mu + theta)
    d_mu = -(E / mu - ratio) / n
    d_mu[clamped] = 0.0
    d_theta_terms = (
        digamma(E + theta) - digamma(theta) + np.log(theta) + 1.0 - np.log(mu + theta) - ratio
    )
    d_theta = -np.sum(d_theta_terms, axis=0) / n
    return d_mu, d_theta
