"""Sparse variational multi-output GP for irregular longitudinal signals.

Each signal is a linear combination of ``R`` shared latent functions and one
signal-specific latent function (linear model of coregionalization). Every
latent function has its own Gaussian variational distribution over ``M``
inducing values on a regular time grid; observations carry Student-t noise
with three degrees of freedom.
"""
from dataclasses import dataclass, field

import numpy as np
from autograd import numpy as anp
from autograd.scipy.linalg import solve_triangular
from numpy.polynomial.hermite import hermgauss
from scipy.special import gammaln

from src.kernels import gram, jittered_cholesky


STUDENT_T_DOF = 3.0
GH_NODES = 20

_T3_LOG_NORM = gammaln(2.0) - gammaln(1.5) - 0.5 * np.log(STUDENT_T_DOF * np.pi)


@dataclass
class ObservationSeries:
    """Observations of one signal for one individual.

    Parameters
    ----------
    signal_id : int
        Zero-based signal index.
    times : numpy.ndarray
        Strictly increasing observation times in minutes.
    values : numpy.ndarray
        Observed values, same length as ``times``.
    """

    signal_id: int
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape:
            raise ValueError(
                f"signal {self.signal_id}: {self.times.size} times but "
                f"{self.values.size} values"
            )
        if np.any(np.diff(self.times) <= 0):
            raise ValueError(f"signal {self.signal_id}: times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"signal {self.signal_id}: values must be finite")

    def __len__(self) -> int:
        return self.times.size

    def up_to(self, t: float) -> "ObservationSeries":
        """Return the observations recorded at or before ``t``."""
        keep = self.times <= t
        return ObservationSeries(self.signal_id, self.times[keep], self.values[keep])


@dataclass
class InducingBlock:
    """Variational distribution ``N(m, S)`` over inducing values at times ``z``."""

    z: np.ndarray
    m: np.ndarray
    s_chol: np.ndarray

    @property
    def s(self):
        return self.s_chol @ self.s_chol.T


@dataclass
class LMCWeights:
    """Mixing weights and noise scales of one individual.

    Parameters
    ----------
    w : numpy.ndarray
        ``D x R`` weights on the shared latent functions.
    kappa : numpy.ndarray
        Length-``D`` weights on the signal-specific latent functions.
    noise_scale : numpy.ndarray
        Length-``D`` Student-t scales, positive.
    """

    w: np.ndarray
    kappa: np.ndarray
    noise_scale: np.ndarray


@dataclass
class SignalPosterior:
    """Gaussian marginal of a latent or signal function at query times."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self):
        """Marginal variances; ``cov`` may already be a vector of them."""
        if anp.ndim(self.cov) == 1:
            return self.cov
        return anp.diagonal(self.cov)


@dataclass
class Standardizer:
    """Per-signal affine standardization fitted on a training population."""

    means: np.ndarray
    stds: np.ndarray

    @classmethod
    def fit(cls, series_by_signal: list[list[np.ndarray]]) -> "Standardizer":
        """Fit from the values of every individual, grouped by signal."""
        means, stds = [], []
        for chunks in series_by_signal:
            values = np.concatenate(chunks) if chunks else np.zeros(0)
            if values.size < 2:
                means.append(0.0 if values.size == 0 else float(values.mean()))
                stds.append(1.0)
                continue
            std = float(values.std(ddof=1))
            means.append(float(values.mean()))
            stds.append(std if std > 1e-12 else 1.0)
        return cls(np.asarray(means), np.asarray(stds))

    def apply(self, series: ObservationSeries) -> ObservationSeries:
        d = series.signal_id
        return ObservationSeries(
            d, series.times, (series.values - self.means[d]) / self.stds[d]
        )


def latent_marginals(block: InducingBlock, chol_kzz, l, times):
    """Marginal mean and variance of one variational latent function.

    Parameters
    ----------
    block : InducingBlock
        Variational parameters.
    chol_kzz : numpy.ndarray
        Lower Cholesky factor of ``K_ZZ`` (with jitter).
    l : float
        Length-scale in minutes.
    times : numpy.ndarray
        Query times.

    Returns
    -------
    tuple of numpy.ndarray
        ``(mean, var)`` at ``times``; variances clamped at zero.
    """
    kzn = gram(block.z, times, l)
    a = solve_triangular(chol_kzz, kzn, lower=True)
    # K_ZZ^-1 K_ZN = L^-T a
    kinv_kzn = solve_triangular(chol_kzz, a, lower=True, trans="T")
    mean = anp.dot(kinv_kzn.T, block.m)
    s_part = anp.dot(block.s_chol.T, kinv_kzn)
    var = 1.0 - anp.sum(a**2, axis=0) + anp.sum(s_part**2, axis=0)
    return mean, anp.maximum(var, 0.0)


def predict_latent(block: InducingBlock, l: float, query_times) -> SignalPosterior:
    """Variational posterior of one latent function at ``query_times``.

    ``mean = K_NZ K_ZZ^-1 m`` and
    ``cov = K_NN - K_NZ K_ZZ^-1 (I - S K_ZZ^-1) K_ZN``.

    Raises
    ------
    IllConditionedKernelError
        If ``K_ZZ`` cannot be factorized.
    """
    query_times = np.asarray(query_times, dtype=float)
    chol = jittered_cholesky(gram(block.z, block.z, l))
    kzn = gram(block.z, query_times, l)
    a = solve_triangular(chol, kzn, lower=True)
    kinv_kzn = solve_triangular(chol, a, lower=True, trans="T")
    s_part = anp.dot(block.s_chol.T, kinv_kzn)
    mean = anp.dot(kinv_kzn.T, block.m)
    cov = gram(query_times, query_times, l) - anp.dot(a.T, a) + anp.dot(s_part.T, s_part)
    return SignalPosterior(mean, cov)


def combine_signal(shared, specific, w_row, kappa) -> SignalPosterior:
    """Linear combination of independent latent posteriors for one signal."""
    mean = kappa * specific.mean
    cov = kappa**2 * specific.cov
    for r, post in enumerate(shared):
        mean = mean + w_row[r] * post.mean
        cov = cov + w_row[r] ** 2 * post.cov
    return SignalPosterior(mean, cov)


def predict_signal(local, d: int, query_times) -> SignalPosterior:
    """Variational posterior of signal ``d`` of a local state at ``query_times``."""
    r_shared = local.weights.w.shape[1]
    shared = [
        predict_latent(local.blocks[r], local.lengthscales[r], query_times)
        for r in range(r_shared)
    ]
    specific = predict_latent(
        local.blocks[r_shared + d], local.lengthscales[r_shared + d], query_times
    )
    return combine_signal(shared, specific, local.weights.w[d], local.weights.kappa[d])


def student_t_logpdf(y, f, scale):
    """Log-density of a Student-t with 3 degrees of freedom, location ``f``."""
    if anp.any(scale <= 0):
        raise ValueError("Student-t scale must be positive")
    z2 = (y - f) ** 2 / (STUDENT_T_DOF * scale**2)
    return _T3_LOG_NORM - anp.log(scale) - 0.5 * (STUDENT_T_DOF + 1.0) * anp.log1p(z2)


def safe_sqrt(x):
    """Square root whose gradient is zero, not infinite, at exactly zero."""
    positive = x > 0
    return anp.sqrt(anp.where(positive, x, 1.0)) * positive


def expected_loglik_terms(mean, var, values, noise_scale, n_nodes: int = GH_NODES):
    """Per-observation ``E_q log t(y | f, sigma)`` by Gauss-Hermite quadrature."""
    if n_nodes < 5:
        raise ValueError(f"need at least 5 quadrature nodes, got {n_nodes}")
    nodes, weights = hermgauss(n_nodes)
    f = mean[:, None] + np.sqrt(2.0) * safe_sqrt(var)[:, None] * nodes[None, :]
    logp = student_t_logpdf(values[:, None], f, noise_scale)
    return anp.dot(logp, weights) / np.sqrt(np.pi)


def expected_loglik_gh(post: SignalPosterior, values, noise_scale, n_nodes: int = GH_NODES):
    """Expected Student-t log-likelihood of ``values`` under ``post``.

    Parameters
    ----------
    post : SignalPosterior
        Posterior at the observation times; only the diagonal is used.
    values : numpy.ndarray
        Observations.
    noise_scale : float
        Student-t scale of this signal.
    n_nodes : int, optional
        Gauss-Hermite order, by default 20.

    Returns
    -------
    float
        Sum over observations.
    """
    values = np.asarray(values, dtype=float)
    return anp.sum(expected_loglik_terms(post.mean, post.var, values, noise_scale, n_nodes))


def gaussian_expected_loglik_terms(mean, var, values, noise_scale):
    """Closed-form ``E_q log N(y | f, sigma^2)`` per observation."""
    return (
        -0.5 * np.log(2.0 * np.pi)
        - anp.log(noise_scale)
        - 0.5 * ((values - mean) ** 2 + var) / noise_scale**2
    )
