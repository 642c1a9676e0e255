"""Variational fitting of the joint model.

Per-individual (local) parameters are fitted by L-BFGS-B on the
individual's evidence lower bound summed over its training grid points.
Population (global) parameters follow minibatch AdaGrad ascent on the
gradient of the ELBO at the fitted local optima.
"""
import json
import logging
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields, replace
from multiprocessing import Pool

import numpy as np
import pandas as pd
from autograd import grad, value_and_grad
from autograd import numpy as anp
from autograd.misc import flatten
from autograd.scipy.linalg import solve_triangular
from scipy.optimize import minimize

from src.datasets import IndividualRecord, covariate_names, observation_horizons
from src.exceptions import (
    ConvergenceWarning,
    IllConditionedKernelError,
    NumericalError,
    ValidationError,
)
from src.kernels import (
    LENGTHSCALE_HI,
    LENGTHSCALE_LO,
    LengthScaleLink,
    gram,
    jittered_cholesky,
    link_lengthscale,
    map_lengthscale,
)
from src.longitudinal import (
    InducingBlock,
    LMCWeights,
    Standardizer,
    expected_loglik_terms,
    gaussian_expected_loglik_terms,
    latent_marginals,
)
from src.policy import EventProbDist
from src.settings import individual_key, substream
from src.survival import (
    EventKind,
    EventRecord,
    HazardParams,
    HistoryFeatureDist,
    event_prob_distribution,
    expected_t2e_loglik,
    fbar_distribution,
    history_moments,
)


logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "jointgp-checkpoint"
CHECKPOINT_VERSION = 2

GRID_POINTS = 5
GRID_SPAN = 2880.0
GRID_LEAD = 15.0

ADAGRAD_EPS = 1e-8

# (beta, beta0) of the first shared latent function and of all others
SLOW_LINK_INIT = (1.0, -12.0)
FAST_LINK_INIT = (1e-5, -5.0)
C_INIT = 1.0 / 720.0
S_CHOL_INIT = 0.1
W_INIT_RANGE = 0.1


@dataclass
class TrainConfig:
    """Optimization settings.

    Parameters
    ----------
    lr : float
        AdaGrad learning rate.
    max_global_iters : int
        Cap on global iterations.
    minibatch : int
        Individuals per global iteration.
    n_mc : int
        Frozen standard-normal draws for the interval-censoring term.
    local_max_iters : int
        Cap on L-BFGS-B iterations per local solve.
    gh_nodes : int
        Gauss-Hermite order for the observation likelihood.
    m_inducing : int
        Inducing points per latent function.
    r_shared : int
        Number of shared latent functions.
    rel_tol : float
        Stop when the largest relative change of a global parameter falls below this.
    seed : int
        Root seed of every random substream.
    likelihood : str
        ``"student_t"`` or ``"gaussian"`` observation noise.
    event_weight : float
        Multiplier of the time-to-event term; 0 fits the signals only.
    threads : int
        Worker processes for local solves.
    log_every : int
        Global iterations between progress log lines.
    """

    lr: float = 0.025
    max_global_iters: int = 1500
    minibatch: int = 2
    n_mc: int = 1000
    local_max_iters: int = 500
    gh_nodes: int = 20
    m_inducing: int = 20
    r_shared: int = 2
    rel_tol: float = 1e-4
    seed: int = 0
    likelihood: str = "student_t"
    event_weight: float = 1.0
    threads: int = 1
    log_every: int = 50

    def __post_init__(self):
        for name in ("lr", "max_global_iters", "minibatch", "n_mc", "local_max_iters", "rel_tol", "threads", "log_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.gh_nodes < 5:
            raise ValueError(f"gh_nodes must be at least 5, got {self.gh_nodes}")
        if self.m_inducing < 2:
            raise ValueError(f"m_inducing must be at least 2, got {self.m_inducing}")
        if self.r_shared < 0:
            raise ValueError(f"r_shared must be nonnegative, got {self.r_shared}")
        if self.likelihood not in ("student_t", "gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.event_weight < 0:
            raise ValueError("event_weight must be nonnegative")

    @classmethod
    def from_settings(cls, settings: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in settings.items() if k in names})


@dataclass
class GlobalParams:
    """Population parameters: hazard coefficients and one length-scale link per latent function."""

    hazard: HazardParams
    links: list[LengthScaleLink]

    @property
    def n_signals(self) -> int:
        return len(self.hazard.alpha)

    @property
    def r_shared(self) -> int:
        return len(self.links) - self.n_signals

    def lengthscales(self, horizons) -> list[float]:
        """Length-scale of each latent function given its observation horizon."""
        if len(horizons) != len(self.links):
            raise ValueError(f"expected {len(self.links)} horizons, got {len(horizons)}")
        return [float(map_lengthscale(link, h)) for link, h in zip(self.links, horizons)]


def latent_horizons(times_by_signal, r_shared: int) -> list[float]:
    """Length-scale link inputs in latent order.

    Shared latent functions take the last observation time over all signals;
    the signal-specific one of signal ``d`` takes the last observation of ``d``.
    """
    overall, per_signal = observation_horizons(times_by_signal)
    return [overall] * r_shared + per_signal


def record_horizons(record: IndividualRecord, r_shared: int) -> list[float]:
    return latent_horizons([s.times for s in record.series], r_shared)


@dataclass
class LocalState:
    """Variational parameters of one individual.

    ``blocks`` holds the ``R`` shared latent functions followed by the
    ``D`` signal-specific ones, all on the same inducing grid. ``horizons``
    are the length-scale link inputs of the latent functions in that order.
    """

    blocks: list[InducingBlock]
    weights: LMCWeights
    horizons: list[float]
    lengthscales: list[float]
    elbo: float = float("nan")


@dataclass
class Checkpoint:
    """Everything needed to predict for new individuals."""

    global_params: GlobalParams
    locals: dict[str, LocalState]
    standardizer: Standardizer
    covariate_names: list[str]
    config: TrainConfig


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: pd.DataFrame
    n_iterations: int
    converged: bool


def softplus(x):
    return anp.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


# raw (unconstrained) parameter dictionaries

def global_to_raw(gp: GlobalParams) -> dict:
    h = gp.hazard
    return {
        "alpha": np.asarray(h.alpha, dtype=float),
        "gamma": np.asarray(h.gamma, dtype=float),
        "a": np.array([h.a], dtype=float),
        "b": np.array([h.b], dtype=float),
        "c_raw": np.array([softplus_inv(h.c)], dtype=float).ravel(),
        "beta": np.array([link.beta for link in gp.links], dtype=float),
        "beta0": np.array([link.beta0 for link in gp.links], dtype=float),
    }


def _hazard_from_raw(raw) -> HazardParams:
    return HazardParams(
        a=raw["a"][0],
        b=raw["b"][0],
        gamma=raw["gamma"],
        alpha=raw["alpha"],
        c=softplus(raw["c_raw"][0]),
    )


def global_from_raw(raw: dict) -> GlobalParams:
    hazard = _hazard_from_raw({k: np.asarray(v, dtype=float) for k, v in raw.items()})
    hazard.a, hazard.b, hazard.c = float(hazard.a), float(hazard.b), float(hazard.c)
    links = [
        LengthScaleLink(float(b), float(b0), LENGTHSCALE_LO, LENGTHSCALE_HI)
        for b, b0 in zip(raw["beta"], raw["beta0"])
    ]
    return GlobalParams(hazard, links)


def _s_chol_from_raw(s_raw):
    return anp.tril(s_raw, -1) + anp.diag(softplus(anp.diag(s_raw)))


def local_to_raw(local: LocalState) -> dict:
    s_raw = []
    for block in local.blocks:
        lower = np.tril(block.s_chol, -1)
        s_raw.append(lower + np.diag(softplus_inv(np.maximum(np.diag(block.s_chol), 1e-12))))
    return {
        "m": np.array([block.m for block in local.blocks], dtype=float),
        "s_raw": np.array(s_raw, dtype=float),
        "w": np.asarray(local.weights.w, dtype=float),
        "kappa": np.asarray(local.weights.kappa, dtype=float),
        "noise_raw": softplus_inv(local.weights.noise_scale),
    }


def local_from_raw(raw: dict, z, horizons, lengthscales, elbo=float("nan")) -> LocalState:
    blocks = [
        InducingBlock(np.asarray(z, dtype=float), np.asarray(m, dtype=float), np.asarray(_s_chol_from_raw(s), dtype=float))
        for m, s in zip(raw["m"], raw["s_raw"])
    ]
    weights = LMCWeights(
        np.asarray(raw["w"], dtype=float),
        np.asarray(raw["kappa"], dtype=float),
        np.asarray(softplus(raw["noise_raw"]), dtype=float),
    )
    return LocalState(blocks, weights, [float(h) for h in horizons], [float(l) for l in lengthscales], float(elbo))


def init_global(population: list[IndividualRecord], n_signals: int, r_shared: int, n_covariates: int) -> GlobalParams:
    """Starting point of the global parameters.

    The baseline log hazard starts at the crude event rate of the population.
    """
    n_events = sum(1 for r in population if r.event.kind is not EventKind.RIGHT_CENSORED)
    exposure = sum(r.duration for r in population)
    b = float(np.log(max(n_events, 1) / max(exposure, 1.0)))
    links = []
    for k in range(r_shared + n_signals):
        beta, beta0 = SLOW_LINK_INIT if k == 0 and r_shared > 0 else FAST_LINK_INIT
        links.append(LengthScaleLink(beta, beta0))
    hazard = HazardParams(
        a=0.0, b=b, gamma=np.zeros(n_covariates), alpha=np.zeros(n_signals), c=C_INIT
    )
    return GlobalParams(hazard, links)


def init_local(record: IndividualRecord, gp: GlobalParams, cfg: TrainConfig, rng=None) -> LocalState:
    """Starting point of an individual's variational parameters.

    The inducing grid spans ``[0, t]`` with ``t`` the last observation time,
    which is also the link input of the shared latent functions.
    """
    if rng is None:
        rng = substream(cfg.seed, "train", individual_key(record.individual_id))
    n_signals, r_shared = gp.n_signals, gp.r_shared
    horizons = record_horizons(record, r_shared)
    z = np.linspace(0.0, max(horizons), cfg.m_inducing)
    blocks = [
        InducingBlock(z.copy(), np.zeros(cfg.m_inducing), S_CHOL_INIT * np.eye(cfg.m_inducing))
        for _ in range(r_shared + n_signals)
    ]
    noise = []
    for series in record.series:
        noise.append(float(np.std(series.values, ddof=1)) if len(series) >= 2 else 1.0)
    noise = np.maximum(np.asarray(noise), 1e-3)
    weights = LMCWeights(
        rng.uniform(-W_INIT_RANGE, W_INIT_RANGE, size=(n_signals, r_shared)),
        np.ones(n_signals),
        noise,
    )
    return LocalState(blocks, weights, horizons, gp.lengthscales(horizons))


def grid_schedule(record: EventRecord, end_time: float) -> list[float]:
    """Training and prediction times for one individual.

    Five equally spaced points over the two days ending 15 minutes before
    the event, censoring or end of stay; points before time 0 are dropped.

    Parameters
    ----------
    record : EventRecord
        Event or censoring of the individual.
    end_time : float
        Last recorded time in minutes.

    Returns
    -------
    list of float
        Increasing, possibly empty.
    """
    if not end_time > 0:
        raise ValueError(f"end_time must be positive, got {end_time}")
    anchor = min(record.t_left, end_time) - GRID_LEAD
    points = np.linspace(anchor - GRID_SPAN, anchor, GRID_POINTS)
    return sorted({float(p) for p in points if p >= 0})


def event_noise(cfg: TrainConfig, individual_id: str) -> np.ndarray:
    """Frozen standard-normal draws of one individual."""
    rng = substream(cfg.seed, "mc", individual_key(individual_id))
    return rng.standard_normal(cfg.n_mc)


@dataclass
class _Prepared:
    """Arrays of one individual laid out for the objective."""

    z: np.ndarray
    horizons: list[float]
    grid: np.ndarray
    all_times: np.ndarray
    slices: list[slice]
    values: list[np.ndarray]
    obs_weights: list[np.ndarray]
    covariates: np.ndarray
    event: EventRecord
    noise: np.ndarray
    n_signals: int
    r_shared: int


def _prepare(record: IndividualRecord, grid, cfg: TrainConfig, names, r_shared, noise=None, z=None) -> _Prepared:
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError(f"individual {record.individual_id!r} has no grid points")
    if cfg.event_weight > 0 and np.any(grid > record.event.t_left):
        raise ValueError(
            f"individual {record.individual_id!r}: grid point after event time {record.event.t_left}"
        )
    times, values, weights, slices = [], [], [], []
    start = 0
    for series in record.series:
        # observation n counts once per grid point at or after it
        counts = np.sum(series.times[:, None] <= grid[None, :], axis=1).astype(float)
        keep = counts > 0
        times.append(series.times[keep])
        values.append(series.values[keep])
        weights.append(counts[keep])
        slices.append(slice(start, start + int(keep.sum())))
        start += int(keep.sum())
    horizons = record_horizons(record, r_shared)
    if z is None:
        z = np.linspace(0.0, max(horizons), cfg.m_inducing)
    if noise is None:
        noise = event_noise(cfg, record.individual_id)
    return _Prepared(
        z=np.asarray(z, dtype=float),
        horizons=horizons,
        grid=grid,
        all_times=np.concatenate(times) if times else np.zeros(0),
        slices=slices,
        values=values,
        obs_weights=weights,
        covariates=np.array([record.covariate_vector(t, names) for t in grid]).reshape(grid.size, len(names)),
        event=record.event,
        noise=np.asarray(noise, dtype=float),
        n_signals=record.n_signals,
        r_shared=r_shared,
    )


def _kl(m, s_chol, chol):
    a = solve_triangular(chol, s_chol, lower=True)
    b = solve_triangular(chol, m, lower=True)
    return 0.5 * (
        anp.sum(a**2)
        + anp.sum(b**2)
        - m.shape[0]
        + 2.0 * anp.sum(anp.log(anp.diag(chol)))
        - 2.0 * anp.sum(anp.log(anp.abs(anp.diag(s_chol))))
    )


def kl_inducing(block: InducingBlock, kzz) -> float:
    """``KL(N(m, S) || N(0, K_ZZ))`` of one inducing block.

    Raises
    ------
    IllConditionedKernelError
        If ``kzz`` cannot be factorized.
    """
    return float(_kl(np.asarray(block.m), np.asarray(block.s_chol), jittered_cholesky(np.asarray(kzz, dtype=float))))


def _elbo_terms(local_raw, global_raw, data: _Prepared, cfg: TrainConfig):
    """Return the signal, per-grid event and KL parts of the ELBO."""
    n_signals, r_shared = data.n_signals, data.r_shared
    n_latent = r_shared + n_signals
    lengthscales = [
        link_lengthscale(global_raw["beta"][k], global_raw["beta0"][k], data.horizons[k])
        for k in range(n_latent)
    ]
    chols = [jittered_cholesky(gram(data.z, data.z, l)) for l in lengthscales]
    blocks = [
        InducingBlock(data.z, local_raw["m"][k], _s_chol_from_raw(local_raw["s_raw"][k]))
        for k in range(n_latent)
    ]
    weights = LMCWeights(local_raw["w"], local_raw["kappa"], softplus(local_raw["noise_raw"]))

    shared = [
        latent_marginals(blocks[r], chols[r], lengthscales[r], data.all_times)
        for r in range(r_shared)
    ]
    signal_term = 0.0
    for d in range(n_signals):
        sl = data.slices[d]
        if sl.stop == sl.start:
            continue
        k = r_shared + d
        mean_v, var_v = latent_marginals(blocks[k], chols[k], lengthscales[k], data.all_times[sl])
        mean = weights.kappa[d] * mean_v
        var = weights.kappa[d] ** 2 * var_v
        for r in range(r_shared):
            mean = mean + weights.w[d, r] * shared[r][0][sl]
            var = var + weights.w[d, r] ** 2 * shared[r][1][sl]
        if cfg.likelihood == "gaussian":
            terms = gaussian_expected_loglik_terms(mean, var, data.values[d], weights.noise_scale[d])
        else:
            terms = expected_loglik_terms(mean, var, data.values[d], weights.noise_scale[d], cfg.gh_nodes)
        signal_term = signal_term + anp.dot(terms, data.obs_weights[d])

    kl = 0.0
    for k in range(n_latent):
        kl = kl + _kl(blocks[k].m, blocks[k].s_chol, chols[k])

    event_terms = []
    if cfg.event_weight > 0:
        hazard = _hazard_from_raw(global_raw)
        for g, t in enumerate(data.grid):
            mu, var = history_moments(blocks, chols, lengthscales, weights, hazard.alpha, hazard.c, t)
            event_terms.append(
                expected_t2e_loglik(hazard, data.covariates[g], HistoryFeatureDist(mu, var), data.event, t, data.noise)
            )
    return signal_term, event_terms, kl


def _elbo(local_raw, global_raw, data: _Prepared, cfg: TrainConfig):
    signal_term, event_terms, kl = _elbo_terms(local_raw, global_raw, data, cfg)
    total = signal_term - data.grid.size * kl
    for term in event_terms:
        total = total + cfg.event_weight * term
    return total


def elbo_individual(
    global_params: GlobalParams,
    local: LocalState,
    data: IndividualRecord,
    grid_t,
    cfg: TrainConfig,
    names: list[str] | None = None,
    noise=None,
) -> float:
    """Evidence lower bound of one individual.

    Parameters
    ----------
    global_params : GlobalParams
        Population parameters.
    local : LocalState
        Variational parameters; its inducing grid is used as is.
    data : IndividualRecord
        Observations and event record.
    grid_t : float or list of float
        Landmark time(s); several times give the sum of the per-time bounds.
    cfg : TrainConfig
        Likelihood, quadrature and event-weight settings.
    names : list of str, optional
        Covariate names in the order of ``gamma``.
    noise : numpy.ndarray, optional
        Frozen standard-normal draws; drawn from the ``mc`` substream if omitted.

    Returns
    -------
    float
        Expected log-likelihood of the observations up to each landmark plus
        the weighted expected event log-likelihood minus the KL divergence.
    """
    grid = np.atleast_1d(np.asarray(grid_t, dtype=float))
    prepared = _prepare(
        data, grid, cfg, names or [], global_params.r_shared, noise=noise, z=local.blocks[0].z
    )
    prepared.horizons = local.horizons
    return float(_elbo(local_to_raw(local), global_to_raw(global_params), prepared, cfg))


def fit_local(
    global_params: GlobalParams,
    data: IndividualRecord,
    grid,
    cfg: TrainConfig,
    init: LocalState | None = None,
    names: list[str] | None = None,
    noise=None,
) -> LocalState:
    """Fit one individual's variational parameters with the globals held fixed.

    Parameters
    ----------
    global_params : GlobalParams
        Population parameters.
    data : IndividualRecord
        Observations and event record, standardized.
    grid : list of float
        Training landmarks of the individual, nonempty.
    cfg : TrainConfig
        Optimization settings.
    init : LocalState, optional
        Warm start; the initialization rule is used when omitted.
    names : list of str, optional
        Covariate names in the order of ``gamma``.
    noise : numpy.ndarray, optional
        Frozen standard-normal draws.

    Returns
    -------
    LocalState
        Last iterate of L-BFGS-B; a ConvergenceWarning is issued if the
        optimizer did not report success.

    Raises
    ------
    NumericalError
        If the ELBO is not finite at the start or at the end of the solve.
    """
    if init is None:
        init = init_local(data, global_params, cfg)
    prepared = _prepare(data, grid, cfg, names or [], global_params.r_shared, noise=noise, z=init.blocks[0].z)
    prepared.horizons = init.horizons
    global_raw = global_to_raw(global_params)
    x0, unflatten = flatten(local_to_raw(init))

    def objective(x):
        return -_elbo(unflatten(x), global_raw, prepared, cfg)

    value_grad = value_and_grad(objective)

    def fun(x):
        value, gradient = value_grad(x)
        if not np.isfinite(value) or not np.all(np.isfinite(gradient)):
            return np.inf, np.zeros_like(x)
        return value, gradient

    start = objective(x0)
    if not np.isfinite(start):
        raise NumericalError(f"individual {data.individual_id!r}: ELBO is not finite at the starting point")
    result = minimize(
        fun, x0, jac=True, method="L-BFGS-B", options={"maxiter": cfg.local_max_iters}
    )
    if not np.isfinite(result.fun):
        raise NumericalError(f"individual {data.individual_id!r}: ELBO diverged ({result.message})")
    if not result.success:
        warnings.warn(
            f"local fit of {data.individual_id!r} stopped early: {result.message}",
            ConvergenceWarning,
        )
    logger.debug(
        "local fit %s: elbo %.4f -> %.4f in %d iterations",
        data.individual_id, -start, -result.fun, result.nit,
    )
    lengthscales = global_params.lengthscales(init.horizons)
    return local_from_raw(unflatten(result.x), prepared.z, init.horizons, lengthscales, -result.fun)


def global_gradient(
    global_params: GlobalParams,
    local: LocalState,
    data: IndividualRecord,
    grid,
    cfg: TrainConfig,
    names: list[str] | None = None,
    noise=None,
) -> dict:
    """Gradient of an individual's ELBO with respect to the raw global parameters."""
    prepared = _prepare(data, grid, cfg, names or [], global_params.r_shared, noise=noise, z=local.blocks[0].z)
    prepared.horizons = local.horizons
    local_raw = local_to_raw(local)
    return grad(lambda g: _elbo(local_raw, g, prepared, cfg))(global_to_raw(global_params))


class AdaGrad:
    """AdaGrad ascent on a flat parameter vector.

    Parameters
    ----------
    lr : float
        Learning rate.
    eps : float, optional
        Added to the root of the accumulated squared gradients.
    """

    def __init__(self, lr: float, eps: float = ADAGRAD_EPS):
        self.lr = lr
        self.eps = eps
        self.accum = None

    def step(self, theta, gradient):
        gradient = np.asarray(gradient, dtype=float)
        if self.accum is None:
            self.accum = np.zeros_like(gradient)
        self.accum = self.accum + gradient**2
        return theta + self.lr * gradient / (np.sqrt(self.accum) + self.eps)


def relative_change(old, new) -> float:
    """Largest absolute change relative to ``max(|old|, 1)``."""
    old, new = np.asarray(old, dtype=float), np.asarray(new, dtype=float)
    if old.size == 0:
        return 0.0
    return float(np.max(np.abs(new - old) / np.maximum(np.abs(old), 1.0)))


def _local_task(task):
    """Fit one local state and return it with its global gradient; runs in a worker."""
    global_params, record, grid, cfg, init, names, with_gradient = task
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            local = fit_local(global_params, record, grid, cfg, init=init, names=names)
        gradient = None
        if with_gradient:
            gradient, _ = flatten(global_gradient(global_params, local, record, grid, cfg, names=names))
            if not np.all(np.isfinite(gradient)):
                raise NumericalError("non-finite global gradient")
        return record.individual_id, local, gradient, None
    except (NumericalError, IllConditionedKernelError) as err:
        return record.individual_id, None, None, str(err)


@contextmanager
def worker_map(threads: int):
    """Yield a ``map`` over a process pool, or the builtin one for a single thread."""
    if threads <= 1:
        yield lambda fn, items: list(map(fn, items))
        return
    with Pool(processes=threads) as pool:
        yield pool.map


def _history_row(iteration, elbo, change, raw):
    row = {"iteration": iteration, "elbo": elbo, "rel_change": change}
    for name, value in raw.items():
        values = np.ravel(value)
        if name == "c_raw":
            row["c"] = float(softplus(values[0]))
        elif values.size == 1 and name in ("a", "b"):
            row[name] = float(values[0])
        else:
            for j, v in enumerate(values):
                row[f"{name}_{j}"] = float(v)
    return row


def standardize_population(records: list[IndividualRecord], standardizer: Standardizer) -> list[IndividualRecord]:
    return [replace(r, series=[standardizer.apply(s) for s in r.series]) for r in records]


def fit_global(population: list[IndividualRecord], cfg: TrainConfig) -> FitResult:
    """Fit the joint model to a population.

    Each iteration draws a minibatch of individuals, refits their local
    states against the current globals (warm-started), and takes an AdaGrad
    step along the minibatch gradient scaled to the population size. A final
    pass refits every local state.

    Parameters
    ----------
    population : list of IndividualRecord
        Training individuals with a common number of signals.
    cfg : TrainConfig
        Optimization settings.

    Returns
    -------
    FitResult
        Checkpoint, per-iteration history and convergence flag.

    Raises
    ------
    ValidationError
        If the population is empty or no individual has a training landmark.
    """
    if not population:
        raise ValidationError("cannot train on an empty population")
    n_signals = population[0].n_signals
    if any(r.n_signals != n_signals for r in population):
        raise ValidationError("individuals disagree on the number of signals")

    standardizer = Standardizer.fit([[r.series[d].values for r in population] for d in range(n_signals)])
    records = standardize_population(population, standardizer)
    names = covariate_names(records)

    schedules = {}
    for record in records:
        schedule = grid_schedule(record.event, record.duration)
        if schedule:
            schedules[record.individual_id] = schedule
        else:
            logger.info("individual %s has no training landmark, skipped", record.individual_id)
    eligible = [r for r in records if r.individual_id in schedules]
    if not eligible:
        raise ValidationError("no individual has a training landmark")
    if cfg.minibatch > len(eligible):
        raise ValidationError(f"minibatch {cfg.minibatch} exceeds {len(eligible)} trainable individuals")

    global_params = init_global(eligible, n_signals, cfg.r_shared, len(names))
    theta, unflatten = flatten(global_to_raw(global_params))
    optimizer = AdaGrad(cfg.lr)
    rng = substream(cfg.seed, "train")
    cache: dict[str, LocalState] = {}
    history = []
    converged = False
    scale = len(eligible) / cfg.minibatch
    logger.info(
        "training on %d individuals (%d signals, %d covariates), minibatch %d",
        len(eligible), n_signals, len(names), cfg.minibatch,
    )

    iteration = 0
    with worker_map(cfg.threads) as mapper:
        for iteration in range(1, cfg.max_global_iters + 1):
            batch = [eligible[i] for i in rng.choice(len(eligible), size=cfg.minibatch, replace=False)]
            tasks = [
                (global_params, r, schedules[r.individual_id], cfg, cache.get(r.individual_id), names, True)
                for r in batch
            ]
            gradient = np.zeros_like(theta)
            elbo = 0.0
            for iid, local, g, error in mapper(_local_task, tasks):
                if local is None:
                    logger.warning("individual %s diverged (%s); reset and skipped this round", iid, error)
                    cache.pop(iid, None)
                    continue
                cache[iid] = local
                gradient += scale * g
                elbo += local.elbo
            new_theta = optimizer.step(theta, gradient)
            change = relative_change(theta, new_theta)
            theta = new_theta
            global_params = global_from_raw(unflatten(theta))
            history.append(_history_row(iteration, elbo, change, unflatten(theta)))
            if iteration % cfg.log_every == 0 or iteration == 1:
                logger.info("iteration %d: minibatch elbo %.3f, max relative change %.2e", iteration, elbo, change)
            if change < cfg.rel_tol:
                converged = True
                logger.info("converged after %d iterations", iteration)
                break
        if not converged:
            logger.warning("stopped at max_global_iters=%d without converging", cfg.max_global_iters)

        tasks = [
            (global_params, r, schedules[r.individual_id], cfg, cache.get(r.individual_id), names, False)
            for r in eligible
        ]
        locals_ = {}
        for iid, local, _, error in mapper(_local_task, tasks):
            if local is None:
                logger.warning("final local fit of %s failed (%s)", iid, error)
                continue
            locals_[iid] = local

    checkpoint = Checkpoint(global_params, locals_, standardizer, names, cfg)
    return FitResult(checkpoint, pd.DataFrame(history), iteration, converged)


def predict_distribution(checkpoint: Checkpoint, record: IndividualRecord, t: float, delta: float) -> EventProbDist:
    """Event probability distribution of an individual at landmark ``t``.

    The record is standardized with the training statistics and truncated
    to the data recorded up to ``t``, so length-scales follow the last
    observations at or before ``t`` exactly as in training. The local state
    is fitted to the signals alone because the outcome is unknown at
    prediction time.
    """
    if t < 0:
        raise ValueError(f"prediction time must be nonnegative, got {t}")
    cfg = replace(checkpoint.config, event_weight=0.0)
    standardized = replace(record, series=[checkpoint.standardizer.apply(s) for s in record.series])
    truncated = standardized.up_to(t)
    truncated = replace(truncated, event=EventRecord(EventKind.RIGHT_CENSORED, float(t)))
    gp = checkpoint.global_params
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        local = fit_local(gp, truncated, [t], cfg, names=checkpoint.covariate_names)
    fd = fbar_distribution(local, gp.hazard, t)
    x = truncated.covariate_vector(t, checkpoint.covariate_names)
    return event_prob_distribution(gp.hazard, x, fd, delta)


def _predict_task(task):
    checkpoint, record, times, delta = task
    rows = []
    for t in times:
        try:
            rows.append((record.individual_id, t, predict_distribution(checkpoint, record, t, delta)))
        except (NumericalError, IllConditionedKernelError) as err:
            logger.warning("prediction for %s at %s failed: %s", record.individual_id, t, err)
    return rows


def predict_population(
    checkpoint: Checkpoint,
    records: list[IndividualRecord],
    schedule: dict[str, list[float]],
    delta: float,
    threads: int = 1,
) -> list[tuple[str, float, EventProbDist]]:
    """Event probability distributions for every scheduled landmark, in schedule order."""
    tasks = [(checkpoint, r, schedule.get(r.individual_id, []), delta) for r in records]
    with worker_map(threads) as mapper:
        results = mapper(_predict_task, tasks)
    return [row for rows in results for row in rows]


# checkpoint archive

def _local_to_json(local: LocalState) -> dict:
    return {
        "z": local.blocks[0].z.tolist(),
        "m": [b.m.tolist() for b in local.blocks],
        "s_chol": [b.s_chol.tolist() for b in local.blocks],
        "w": local.weights.w.tolist(),
        "kappa": local.weights.kappa.tolist(),
        "noise_scale": local.weights.noise_scale.tolist(),
        "horizons": local.horizons,
        "lengthscales": local.lengthscales,
        "elbo": local.elbo,
    }


def _local_from_json(content: dict) -> LocalState:
    z = np.asarray(content["z"], dtype=float)
    blocks = [
        InducingBlock(z.copy(), np.asarray(m, dtype=float), np.asarray(s, dtype=float))
        for m, s in zip(content["m"], content["s_chol"])
    ]
    w = np.asarray(content["w"], dtype=float).reshape(len(content["kappa"]), -1)
    weights = LMCWeights(w, np.asarray(content["kappa"], dtype=float), np.asarray(content["noise_scale"], dtype=float))
    return LocalState(blocks, weights, [float(h) for h in content["horizons"]], [float(l) for l in content["lengthscales"]], float(content["elbo"]))


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    """Write a checkpoint as self-describing JSON; floats round-trip exactly."""
    h = checkpoint.global_params.hazard
    content = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "global": {
            "a": float(h.a),
            "b": float(h.b),
            "c": float(h.c),
            "gamma": np.asarray(h.gamma, dtype=float).tolist(),
            "alpha": np.asarray(h.alpha, dtype=float).tolist(),
            "links": [asdict(link) for link in checkpoint.global_params.links],
        },
        "standardizer": {
            "means": checkpoint.standardizer.means.tolist(),
            "stds": checkpoint.standardizer.stds.tolist(),
        },
        "covariate_names": list(checkpoint.covariate_names),
        "config": asdict(checkpoint.config),
        "locals": {iid: _local_to_json(local) for iid, local in sorted(checkpoint.locals.items())},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(content, f, indent=1)


def load_checkpoint(path: str) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises
    ------
    ValidationError
        If the file is not a checkpoint or has another format version.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            content = json.load(f)
    except (OSError, json.JSONDecodeError) as err:
        raise ValidationError(f"{path}: cannot read checkpoint: {err}") from err
    if not isinstance(content, dict) or content.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a checkpoint file")
    if content.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(
            f"{path}: checkpoint format version {content.get('format_version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    try:
        g = content["global"]
        hazard = HazardParams(
            a=float(g["a"]),
            b=float(g["b"]),
            gamma=np.asarray(g["gamma"], dtype=float),
            alpha=np.asarray(g["alpha"], dtype=float),
            c=float(g["c"]),
        )
        links = [LengthScaleLink(**link) for link in g["links"]]
        standardizer = Standardizer(
            np.asarray(content["standardizer"]["means"], dtype=float),
            np.asarray(content["standardizer"]["stds"], dtype=float),
        )
        locals_ = {iid: _local_from_json(v) for iid, v in content["locals"].items()}
        config = TrainConfig(**content["config"])
    except (KeyError, TypeError, ValueError) as err:
        raise ValidationError(f"{path}: malformed checkpoint: {err}") from err
    return Checkpoint(GlobalParams(hazard, links), locals_, standardizer, list(content["covariate_names"]), config)
