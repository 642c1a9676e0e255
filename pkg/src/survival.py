"""Dynamic hazard, event probability and censored time-to-event likelihood.

The hazard at time ``s`` for a prediction made at landmark ``t`` is
``exp(b + a (s - t) + gamma^T x_t + fbar(t))`` where ``fbar`` is the
exponentially weighted history of the signal trajectories. Under the
variational posterior ``fbar`` is Gaussian, so the expected log-likelihood
is closed form except for the interval-censored term, which uses frozen
standard-normal draws.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np
from autograd import numpy as anp
from autograd.scipy.linalg import solve_triangular

from src.kernels import (
    HistoryWeight,
    gram,
    integrated_cross_cov,
    integrated_variance,
    jittered_cholesky,
    matern12,
)
from src.longitudinal import safe_sqrt
from src.policy import EventProbDist


SMALL_SLOPE = 1e-10


class EventKind(str, Enum):
    OBSERVED = "observed"
    RIGHT_CENSORED = "right"
    INTERVAL_CENSORED = "interval"


@dataclass
class EventRecord:
    """Possibly censored event time of one individual.

    Parameters
    ----------
    kind : EventKind
        Observed event, right censoring or interval censoring.
    t_left : float
        Event time (observed), censoring time (right) or interval start.
    t_right : float, optional
        Interval end, only for interval censoring.
    """

    kind: EventKind
    t_left: float
    t_right: float | None = None

    def __post_init__(self):
        self.kind = EventKind(self.kind)
        if self.t_left < 0:
            raise ValueError(f"event times must be nonnegative, got {self.t_left}")
        if self.kind is EventKind.INTERVAL_CENSORED:
            if self.t_right is None or not self.t_left < self.t_right:
                raise ValueError(
                    f"interval censoring needs t_left < t_right, got "
                    f"[{self.t_left}, {self.t_right}]"
                )

    @property
    def t_event(self) -> float | None:
        return self.t_left if self.kind is EventKind.OBSERVED else None


@dataclass
class HazardParams:
    """Time-to-event coefficients.

    Parameters
    ----------
    a : float
        Slope of the log baseline hazard in 1/minutes.
    b : float
        Log baseline hazard at the landmark.
    gamma : numpy.ndarray
        Covariate coefficients.
    alpha : numpy.ndarray
        Length-``D`` coefficients on the weighted signal histories.
    c : float
        History weight rate in 1/minutes, positive.
    """

    a: float
    b: float
    gamma: np.ndarray
    alpha: np.ndarray
    c: float


@dataclass
class HistoryFeatureDist:
    """Gaussian distribution ``N(mu, var)`` of the weighted history feature."""

    mu: float
    var: float


@dataclass
class CovariateVector:
    """Covariates in effect at the prediction time."""

    x: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if not np.all(np.isfinite(self.x)):
            raise ValueError("covariates must be finite")


def _covariates(x):
    return x.x if isinstance(x, CovariateVector) else np.asarray(x, dtype=float)


def _linear_offset(params: HazardParams, x):
    x = _covariates(x)
    if x.size == 0:
        return params.b
    return params.b + anp.dot(params.gamma, x)


def expm1_ratio(a, delta):
    """``(exp(a delta) - 1) / a`` with the series limit near ``a = 0``."""
    if anp.abs(a) < SMALL_SLOPE:
        return delta + 0.5 * a * delta**2
    return anp.expm1(a * delta) / a


def log1mexp(x):
    """Stable ``log(1 - exp(-x))`` for ``x > 0``."""
    x = anp.maximum(x, 1e-300)
    return anp.where(
        x < np.log(2.0),
        anp.log(-anp.expm1(-anp.minimum(x, np.log(2.0)))),
        anp.log1p(-anp.exp(-anp.maximum(x, np.log(2.0)))),
    )


def hazard_at(params: HazardParams, x, fbar_sample, s, t):
    """Hazard rate ``lambda(s; t)`` in 1/minutes.

    Raises
    ------
    ValueError
        If ``s < t``.
    """
    if anp.any(s < t):
        raise ValueError(f"hazard is defined for s >= t, got s={s}, t={t}")
    return anp.exp(_linear_offset(params, x) + params.a * (s - t) + fbar_sample)


def cumulative_hazard(params: HazardParams, x, fbar_sample, s, t):
    """Integrated hazard ``Lambda(t, s) = int_t^s lambda(u; t) du``."""
    return anp.exp(_linear_offset(params, x) + fbar_sample) * expm1_ratio(params.a, s - t)


def event_probability(params: HazardParams, x, fbar_sample, t, delta):
    """Probability of the event within ``delta`` minutes after ``t``.

    Parameters
    ----------
    params : HazardParams
        Time-to-event coefficients.
    x : CovariateVector or array_like
        Covariates at ``t``.
    fbar_sample : float
        Realization of the weighted history feature.
    t : float
        Landmark time in minutes.
    delta : float
        Horizon in minutes, nonnegative.

    Returns
    -------
    float
        ``1 - exp(-lambda(t; t) (exp(a delta) - 1) / a)``.
    """
    if delta < 0:
        raise ValueError(f"horizon must be nonnegative, got {delta}")
    return -anp.expm1(-cumulative_hazard(params, x, fbar_sample, t + delta, t))


def survival_curve(params: HazardParams, x, fbar_sample, t, deltas):
    """``S(t + delta | t) = 1 - H(delta)`` over an array of horizons."""
    deltas = np.asarray(deltas, dtype=float)
    return np.array(
        [1.0 - event_probability(params, x, fbar_sample, t, float(d)) for d in deltas]
    )


def censored_loglik(params: HazardParams, x, fbar_sample, record: EventRecord, t):
    """Log-likelihood of a (censored) event record for the landmark at ``t``.

    Observed events contribute ``log lambda(T; t) - Lambda(t, T)``, right
    censoring ``-Lambda(t, T_l)`` and interval censoring
    ``-Lambda(t, T_l) + log(1 - exp(-(Lambda(t, T_r) - Lambda(t, T_l))))``.
    """
    if record.t_left < t:
        raise ValueError(f"record time {record.t_left} precedes landmark {t}")
    loglik = -cumulative_hazard(params, x, fbar_sample, record.t_left, t)
    if record.kind is EventKind.OBSERVED:
        loglik = loglik + anp.log(hazard_at(params, x, fbar_sample, record.t_left, t))
    elif record.kind is EventKind.INTERVAL_CENSORED:
        at_left = hazard_at(params, x, fbar_sample, record.t_left, t)
        inside = at_left * expm1_ratio(params.a, record.t_right - record.t_left)
        loglik = loglik + log1mexp(inside)
    return loglik


def expected_t2e_loglik(
    params: HazardParams,
    x,
    fd: HistoryFeatureDist,
    record: EventRecord,
    t,
    noise,
):
    """Expected censored log-likelihood under ``fbar ~ N(fd.mu, fd.var)``.

    Survival and log-hazard terms use the lognormal mean identity; the
    interval term averages over the frozen standard-normal draws ``noise``
    with the reparameterized hazard ``exp(... + mu + sigma * eps)``.
    """
    if record.t_left < t:
        raise ValueError(f"record time {record.t_left} precedes landmark {t}")
    offset = _linear_offset(params, x)
    elapsed = record.t_left - t
    mean_log_hazard = offset + params.a * elapsed + fd.mu
    loglik = -anp.exp(offset + fd.mu + 0.5 * fd.var) * expm1_ratio(params.a, elapsed)
    if record.kind is EventKind.OBSERVED:
        loglik = loglik + mean_log_hazard
    elif record.kind is EventKind.INTERVAL_CENSORED:
        noise = np.asarray(noise, dtype=float)
        if noise.size < 1:
            raise ValueError("interval censoring needs at least one noise draw")
        hazard_left = anp.exp(mean_log_hazard + safe_sqrt(fd.var) * noise)
        inside = hazard_left * expm1_ratio(params.a, record.t_right - record.t_left)
        loglik = loglik + anp.mean(log1mexp(inside))
    return loglik


def history_moments(blocks, chols, lengthscales, weights, alpha, c, t):
    """Mean and variance of ``alpha^T int_0^t rho_c f`` under the variational posterior.

    ``blocks`` and ``chols`` hold the ``R`` shared latent functions followed
    by the ``D`` signal-specific ones. For ``t <= 0`` the weight collapses
    onto the process value at time zero.
    """
    r_shared = weights.w.shape[1]
    omega = anp.dot(alpha, weights.w)
    kappa = weights.kappa * alpha
    coefs = [omega[r] for r in range(r_shared)] + [kappa[d] for d in range(kappa.shape[0])]

    mu, var = 0.0, 0.0
    for block, chol, l, coef in zip(blocks, chols, lengthscales, coefs):
        if t > 0:
            w = HistoryWeight(c, t)
            kbar = integrated_cross_cov(w, l, block.z)
            prior = integrated_variance(w, l)
        else:
            kbar = matern12(0.0, block.z, l)
            prior = 1.0
        a = solve_triangular(chol, kbar, lower=True)
        kinv_kbar = solve_triangular(chol, a, lower=True, trans="T")
        s_part = anp.dot(block.s_chol.T, kinv_kbar)
        mu = mu + coef * anp.dot(kinv_kbar, block.m)
        var = var + coef**2 * (prior - anp.sum(a**2) + anp.sum(s_part**2))
    return mu, anp.maximum(var, 0.0)


def fbar_distribution(local, params: HazardParams, t: float) -> HistoryFeatureDist:
    """Distribution of the weighted history feature of a local state at ``t``."""
    chols = [jittered_cholesky(gram(b.z, b.z, l)) for b, l in zip(local.blocks, local.lengthscales)]
    mu, var = history_moments(
        local.blocks, chols, local.lengthscales, local.weights, params.alpha, params.c, t
    )
    return HistoryFeatureDist(float(mu), float(var))


def event_prob_distribution(
    params: HazardParams, x, fd: HistoryFeatureDist, delta: float
) -> EventProbDist:
    """Distribution of the event probability within ``delta`` minutes."""
    if delta < 0:
        raise ValueError(f"horizon must be nonnegative, got {delta}")
    return EventProbDist(
        loc=float(_linear_offset(params, x) + fd.mu),
        scale=float(np.sqrt(max(fd.var, 0.0))),
        k=float(-expm1_ratio(params.a, delta)),
    )
