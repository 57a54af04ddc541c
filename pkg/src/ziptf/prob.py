"""Probability kernels: ZIP and Gamma log-densities, samplers, special functions.

All samplers take an explicit ``numpy.random.Generator``; there is no global
random state anywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

_EULER_MASCHERONI = 0.57721566490153286060


@dataclass(frozen=True)
class ZipParams:
    """Zero-inflated Poisson: rate ``lam`` and extra-zero probability ``p``."""

    lam: float
    p: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")


@dataclass(frozen=True)
class GammaParams:
    """Gamma distribution with shape and rate parameters."""

    shape: float
    rate: float

    def __post_init__(self):
        if not self.shape > 0:
            raise ValueError(f"shape must be positive, got {self.shape}")
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")

    @property
    def mean(self):
        return self.shape / self.rate


def poisson_log_pmf(x, lam):
    x = np.asarray(x, dtype=np.float64)
    return x * np.log(lam) - lam - gammaln(x + 1.0)


def zip_log_pmf(x, zp: ZipParams):
    """Log pmf of the zero-inflated Poisson mixture.

    ``log(p * 1{x=0} + (1-p) * Poisson(x; lam))``, evaluated stably.
    """
    x_arr = np.asarray(x)
    if np.any(x_arr < 0) or np.any(x_arr != np.floor(x_arr)):
        raise ValueError("x must be a non-negative integer")
    scalar = np.isscalar(x) or x_arr.ndim == 0
    x_arr = np.atleast_1d(x_arr).astype(np.float64)

    if zp.p == 1.0:
        out = np.where(x_arr == 0, 0.0, -np.inf)
    elif zp.p == 0.0:
        out = poisson_log_pmf(x_arr, zp.lam)
    else:
        pois = np.log1p(-zp.p) + poisson_log_pmf(x_arr, zp.lam)
        out = np.where(x_arr == 0, np.logaddexp(np.log(zp.p), pois), pois)
    return float(out[0]) if scalar else out


def sample_zip(zp: ZipParams, rng: np.random.Generator, size=None):
    """Draw Bernoulli(1-p) * Poisson(lam); deterministic given the stream."""
    keep = rng.random(size) >= zp.p
    counts = rng.poisson(zp.lam, size)
    return counts * keep


def gamma_log_pdf(x, gp: GammaParams):
    """Log density of Gamma(shape, rate) at x > 0."""
    x_arr = np.asarray(x, dtype=np.float64)
    if np.any(x_arr <= 0):
        raise ValueError("x must be positive")
    out = (
        gp.shape * np.log(gp.rate)
        - gammaln(gp.shape)
        + (gp.shape - 1.0) * np.log(x_arr)
        - gp.rate * x_arr
    )
    return float(out) if np.isscalar(x) else out


def sample_gamma(gp: GammaParams, rng: np.random.Generator, size=None):
    """Gamma(shape, rate) draws via the generator's squeeze-method sampler."""
    return rng.gamma(gp.shape, 1.0 / gp.rate, size)


# Bernoulli-number coefficients of the asymptotic expansion
# psi(x) ~ ln x - 1/(2x) - sum_n B_{2n} / (2n x^{2n}).
_DIGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
)


def digamma(x):
    """Digamma function, accurate to ~1e-10 for x >= 1e-3.

    Small arguments are shifted up with the recurrence psi(x) =
    psi(x+1) - 1/x until x >= 6, where the asymptotic series applies.
    """
    x_arr = np.asarray(x, dtype=np.float64)
    if np.any(x_arr <= 1e-300):
        raise ValueError("digamma requires x > 1e-300")
    scalar = np.isscalar(x) or x_arr.ndim == 0
    z = np.atleast_1d(x_arr).copy()
    acc = np.zeros_like(z)
    # six unit shifts take any positive argument past 6
    for _ in range(6):
        small = z < 6.0
        if not small.any():
            break
        acc[small] -= 1.0 / z[small]
        z[small] += 1.0
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    power = inv2.copy()
    for coeff in _DIGAMMA_SERIES:
        series += coeff * power
        power *= inv2
    out = acc + np.log(z) - 0.5 / z - series
    return float(out[0]) if scalar else out


def logistic_sigmoid(x):
    """Numerically stable 1 / (1 + exp(-x))."""
    x_arr = np.asarray(x, dtype=np.float64)
    scalar = np.isscalar(x) or x_arr.ndim == 0
    x_arr = np.atleast_1d(x_arr)
    out = np.empty_like(x_arr)
    pos = x_arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x_arr[pos]))
    ex = np.exp(x_arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out[0]) if scalar else out
