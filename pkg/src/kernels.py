"""Matérn-1/2 kernel, length-scale link and time-integrated covariances.

All functions are written against ``autograd.numpy`` so they can sit inside
the differentiable ELBO. Times are in minutes throughout and the kernel
variance is fixed at 1; signal amplitude is carried by the mixing weights.
"""
from dataclasses import dataclass

import numpy as np
from autograd import numpy as anp

from src.exceptions import IllConditionedKernelError


LENGTHSCALE_LO = 0.1
LENGTHSCALE_HI = 15000.0

JITTER_START = 1e-8
JITTER_MAX = 1e-4

# below this rate the history weight is uniform to double precision
SMALL_RATE = 1e-10
RESONANCE_RTOL = 1e-6


@dataclass
class LengthScaleLink:
    """Maps the log observation duration to a bounded kernel length-scale.

    Parameters
    ----------
    beta : float
        Slope on the log-duration.
    beta0 : float
        Offset.
    lo : float, optional
        Smallest length-scale in minutes, by default 0.1.
    hi : float, optional
        Width of the length-scale range in minutes, by default 15000.
    """

    beta: float
    beta0: float
    lo: float = LENGTHSCALE_LO
    hi: float = LENGTHSCALE_HI


@dataclass
class HistoryWeight:
    """Exponential weight over the history ``[0, t]`` with rate ``c``.

    Parameters
    ----------
    c : float
        Rate in 1/minutes; larger values concentrate weight on recent history.
    t : float
        Prediction time in minutes.
    """

    c: float
    t: float

    def __post_init__(self):
        if self.t <= 0:
            raise ValueError(f"history weight needs t > 0, got {self.t}")
        if self.c < 0:
            raise ValueError(f"history weight needs c >= 0, got {self.c}")


def matern12(t, t2, l):
    """Evaluate the Matérn-1/2 kernel ``exp(-|t - t2| / (2 l))``.

    Parameters
    ----------
    t, t2 : float or array_like
        Times in minutes; arrays broadcast against each other.
    l : float
        Length-scale in minutes.

    Returns
    -------
    float or numpy.ndarray
        Covariance values in ``(0, 1]``.
    """
    if anp.any(l <= 0):
        raise ValueError(f"length-scale must be positive, got {l}")
    return anp.exp(-0.5 * anp.abs(t - t2) / l)


def gram(times_a, times_b, l):
    """Kernel matrix between two sets of times."""
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    return matern12(times_a[:, None], times_b[None, :], l)


def jittered_cholesky(kmat):
    """Lower Cholesky factor of ``kmat`` plus the smallest working jitter.

    Jitter starts at 1e-8 and grows by a factor of ten up to 1e-4.

    Raises
    ------
    IllConditionedKernelError
        If the factorization fails at every jitter level.
    """
    eye = np.eye(kmat.shape[0])
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return anp.linalg.cholesky(kmat + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise IllConditionedKernelError(
        f"kernel matrix of size {kmat.shape[0]} is not positive definite "
        f"even with jitter {JITTER_MAX:g}"
    )


def sigmoid(x):
    """Numerically stable logistic function."""
    return anp.exp(-anp.logaddexp(0.0, -x))


def link_lengthscale(beta, beta0, t_max, lo=LENGTHSCALE_LO, hi=LENGTHSCALE_HI):
    """Array form of :func:`map_lengthscale` used inside the ELBO."""
    return lo + hi * sigmoid(beta * anp.log(t_max) + beta0)


def map_lengthscale(link: LengthScaleLink, t_max: float) -> float:
    """Length-scale implied by ``link`` for an individual observed ``t_max`` minutes.

    Parameters
    ----------
    link : LengthScaleLink
        Population-level link coefficients.
    t_max : float
        Duration of the individual's observations in minutes.

    Returns
    -------
    float
        ``lo + hi / (1 + exp(-(beta * log(t_max) + beta0)))``.
    """
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    return link_lengthscale(link.beta, link.beta0, t_max, link.lo, link.hi)


def _normalizer(c, t):
    # c / (1 - exp(-c t)), with the uniform limit 1/t as c -> 0
    if c < SMALL_RATE:
        return 1.0 / t + 0.5 * c
    return c / -anp.expm1(-c * t)


def _decay_integral(x, t):
    # (1 - exp(-x t)) / x, with limit t as x -> 0
    if x < SMALL_RATE:
        return t - 0.5 * x * t**2
    return -anp.expm1(-x * t) / x


def _is_resonant(c, l):
    return anp.abs(c - 0.5 / l) < RESONANCE_RTOL * c


def rho(w: HistoryWeight, t_prime):
    """History weight density ``rho_c(t'; t)`` in 1/minutes.

    Parameters
    ----------
    w : HistoryWeight
        Rate and prediction time.
    t_prime : float or array_like
        Past time(s) in ``[0, w.t]``.

    Returns
    -------
    float or numpy.ndarray
        Weight density; integrates to one over ``[0, t]``.
    """
    t_prime = anp.asarray(t_prime, dtype=float)
    if anp.any(t_prime < 0) or anp.any(t_prime > w.t):
        raise ValueError(f"t_prime must lie in [0, {w.t}]")
    return _normalizer(w.c, w.t) * anp.exp(-w.c * (w.t - t_prime))


def integrated_cross_cov(w: HistoryWeight, l, z):
    """Covariance between the weighted history integral and the process at ``z``.

    Computes ``Cov(int_0^t rho_c(t'; t) g(t') dt', g(z))`` under the unit
    variance Matérn-1/2 prior, for ``z`` before or after ``t``.

    Parameters
    ----------
    w : HistoryWeight
        Rate and prediction time.
    l : float
        Kernel length-scale in minutes.
    z : float or array_like
        Inducing time(s), ``z >= 0``.

    Returns
    -------
    float or numpy.ndarray
        One covariance per entry of ``z``.
    """
    if l <= 0:
        raise ValueError(f"length-scale must be positive, got {l}")
    c, t = w.c, w.t
    g = 0.5 / l
    z = np.asarray(z, dtype=float)
    # clamp so that the branch not selected by `where` stays finite
    z_lo = np.minimum(z, t)
    z_hi = np.maximum(z, t)

    before = (anp.exp(c * (z_lo - t)) - anp.exp(-c * t - g * z_lo)) / (c + g)
    if _is_resonant(c, l):
        after_peak = (t - z_lo) * anp.exp(-g * (t - z_lo))
    else:
        after_peak = (anp.exp(-g * (t - z_lo)) - anp.exp(c * (z_lo - t))) / (c - g)
    future = (anp.exp(-g * (z_hi - t)) - anp.exp(-c * t - g * z_hi)) / (c + g)

    return _normalizer(c, t) * anp.where(z <= t, before + after_peak, future)


def integrated_variance(w: HistoryWeight, l):
    """Prior variance of the weighted history integral ``int_0^t rho_c g``.

    Parameters
    ----------
    w : HistoryWeight
        Rate and prediction time.
    l : float
        Kernel length-scale in minutes.

    Returns
    -------
    float
        Variance in ``(0, 1]``.
    """
    if l <= 0:
        raise ValueError(f"length-scale must be positive, got {l}")
    c, t = w.c, w.t
    g = 0.5 / l
    norm_sq = _normalizer(c, t) ** 2
    if _is_resonant(c, l):
        inner = (1.0 - anp.exp(-2.0 * c * t) * (1.0 + 2.0 * c * t)) / (2.0 * c**2)
        return norm_sq * inner
    bracket = -anp.expm1(-(c + g) * t) / (c + g) - _decay_integral(2.0 * c, t)
    return 2.0 * norm_sq * bracket / (c - g)
