"""Synthetic populations drawn from the joint model's generative process.

Latent functions are Matérn-1/2 (Ornstein-Uhlenbeck) paths sampled exactly on
the union of a one-minute grid and the observation times. Signals mix the
latents, observations carry Student-t noise, and event times come from
inverting the integrated hazard driven by the weighted signal history.
"""
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from src.datasets import IndividualRecord, write_population
from src.inference import GlobalParams, latent_horizons
from src.kernels import HistoryWeight, LengthScaleLink, rho
from src.longitudinal import STUDENT_T_DOF, LMCWeights, ObservationSeries
from src.settings import substream
from src.survival import EventKind, EventRecord, HazardParams


logger = logging.getLogger(__name__)

FINE_STEP = 1.0
INTERVAL_WIDTH = (60.0, 720.0)
TRUTH_ARRAYS = "truth.npz"
TRUTH_PARAMS = "truth.json"


@dataclass
class SimSpec:
    """Population to simulate.

    Parameters
    ----------
    n_individuals : int
        Population size.
    d_signals : int
        Number of signals.
    r_shared : int
        Number of shared latent functions.
    truth : GlobalParams
        Generating hazard coefficients and length-scale links.
    obs_per_hour : list of float
        Poisson observation rate of each signal.
    duration_range : tuple of float
        Bounds of the uniformly drawn stay length in minutes.
    right_fraction : float
        Share of events hidden behind right (intervention) censoring.
    interval_fraction : float
        Share of events only known up to an interval.
    seed : int
        Root seed.
    noise_scale : float, optional
        Student-t scale of every signal.
    weight_scale : float, optional
        Standard deviation of the mixing weights.
    """

    n_individuals: int
    d_signals: int
    r_shared: int
    truth: GlobalParams
    obs_per_hour: list[float]
    duration_range: tuple[float, float] = (1440.0, 7200.0)
    right_fraction: float = 0.2
    interval_fraction: float = 0.1
    seed: int = 0
    noise_scale: float = 0.1
    weight_scale: float = 1.0

    def __post_init__(self):
        if self.n_individuals < 1 or self.d_signals < 1 or self.r_shared < 0:
            raise ValueError("need at least one individual and one signal")
        if len(self.obs_per_hour) != self.d_signals or any(r <= 0 for r in self.obs_per_hour):
            raise ValueError("obs_per_hour needs one positive rate per signal")
        if len(self.truth.links) != self.r_shared + self.d_signals:
            raise ValueError("truth needs one length-scale link per latent function")
        if len(self.truth.hazard.alpha) != self.d_signals:
            raise ValueError("truth needs one alpha per signal")
        if not 0 < self.duration_range[0] <= self.duration_range[1]:
            raise ValueError(f"bad duration range {self.duration_range}")
        if min(self.right_fraction, self.interval_fraction) < 0 or self.right_fraction + self.interval_fraction > 1:
            raise ValueError("censoring fractions must be nonnegative and sum to at most 1")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")

    @classmethod
    def from_settings(cls, settings: dict) -> "SimSpec":
        hazard = HazardParams(
            a=float(settings["sim_a"]),
            b=float(settings["sim_b"]),
            gamma=np.asarray(settings["sim_gamma"], dtype=float),
            alpha=np.asarray(settings["sim_alpha"], dtype=float),
            c=float(settings["sim_c"]),
        )
        links = [LengthScaleLink(b, b0) for b, b0 in zip(settings["sim_beta"], settings["sim_beta0"])]
        return cls(
            n_individuals=settings["sim_n_individuals"],
            d_signals=settings["sim_d_signals"],
            r_shared=settings["sim_r_shared"],
            truth=GlobalParams(hazard, links),
            obs_per_hour=[float(r) for r in settings["sim_obs_per_hour"]],
            duration_range=(float(settings["sim_duration_min"]), float(settings["sim_duration_max"])),
            right_fraction=float(settings["sim_right_fraction"]),
            interval_fraction=float(settings["sim_interval_fraction"]),
            seed=settings["seed"],
            noise_scale=float(settings["sim_noise_scale"]),
            weight_scale=float(settings["sim_weight_scale"]),
        )


@dataclass
class GroundTruth:
    """Generating quantities of one simulated individual."""

    individual_id: str
    duration: float
    grid: np.ndarray
    latents: np.ndarray
    weights: LMCWeights
    covariates: np.ndarray
    fbar: float
    event_time: float
    lengthscales: list[float] = field(default_factory=list)

    @property
    def signals(self) -> np.ndarray:
        """``D x n_grid`` noise-free signal paths."""
        r_shared = self.weights.w.shape[1]
        return self.weights.w @ self.latents[:r_shared] + self.weights.kappa[:, None] * self.latents[r_shared:]


def sample_ou_path(times, l: float, rng: np.random.Generator) -> np.ndarray:
    """Exact draw of a unit-variance Matérn-1/2 process at sorted ``times``."""
    times = np.asarray(times, dtype=float)
    path = np.empty(times.size)
    if times.size == 0:
        return path
    decay = np.exp(-0.5 * np.diff(times) / l)
    innovations = np.sqrt(-np.expm1(-np.diff(times) / l)) * rng.standard_normal(times.size - 1)
    x = rng.standard_normal()
    path[0] = x
    for i in range(times.size - 1):
        x = decay[i] * x + innovations[i]
        path[i + 1] = x
    return path


def student_t_noise(scale: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Student-t draws with three degrees of freedom as a Gaussian scale mixture."""
    mixing = rng.chisquare(STUDENT_T_DOF, size=size) / STUDENT_T_DOF
    return scale * rng.standard_normal(size) / np.sqrt(mixing)


def history_feature(times, path, c: float, t: float) -> float:
    """Trapezoid approximation of ``int_0^t rho_c(t'; t) path(t') dt'``."""
    times = np.asarray(times, dtype=float)
    keep = times <= t
    if t <= 0 or keep.sum() < 2:
        return float(path[0])
    return float(trapezoid(rho(HistoryWeight(c, t), times[keep]) * path[keep], times[keep]))


def draw_event_time(params: HazardParams, x, fbar: float, rng: np.random.Generator) -> float:
    """Invert ``Lambda(0, T) = E`` with ``E ~ Exp(1)``; ``inf`` if the hazard never accumulates ``E``."""
    eta = params.b + float(np.dot(params.gamma, x)) + fbar if np.size(x) else params.b + fbar
    target = rng.exponential() * np.exp(-eta)
    if abs(params.a) < 1e-10:
        return float(target)
    inner = params.a * target
    if inner <= -1.0:
        return float("inf")
    return float(np.log1p(inner) / params.a)


def sample_event_time(
    params: HazardParams,
    x,
    fbar: float,
    rng: np.random.Generator,
    right_fraction: float = 0.0,
    interval_fraction: float = 0.0,
) -> EventRecord:
    """Draw an event time and apply censoring."""
    return censor_event(draw_event_time(params, x, fbar, rng), rng, right_fraction, interval_fraction)


def censor_event(t_event: float, rng: np.random.Generator, right_fraction: float, interval_fraction: float) -> EventRecord:
    """Apply censoring to a drawn event time.

    With probability ``right_fraction`` the event is hidden behind a
    uniformly placed right censoring, with probability ``interval_fraction``
    it is only known to lie in a bracket of uniform width in [60, 720]
    minutes. An infinite event time is returned uncensored.
    """
    u = rng.uniform()
    if not np.isfinite(t_event):
        return EventRecord(EventKind.OBSERVED, t_event)
    if u < right_fraction:
        return EventRecord(EventKind.RIGHT_CENSORED, float(rng.uniform() * t_event))
    if u < right_fraction + interval_fraction:
        width = rng.uniform(*INTERVAL_WIDTH)
        t_left = max(0.0, t_event - rng.uniform() * width)
        return EventRecord(EventKind.INTERVAL_CENSORED, float(t_left), float(t_left + width))
    return EventRecord(EventKind.OBSERVED, t_event)


def sample_individual(spec: SimSpec, rng: np.random.Generator, individual_id: str = "sim0000"):
    """Draw one individual and its generating quantities.

    Returns
    -------
    tuple of (IndividualRecord, GroundTruth)
        Record as it would be read back from the dataset files.
    """
    truth = spec.truth
    duration = float(rng.uniform(*spec.duration_range))

    obs_times = []
    for rate in spec.obs_per_hour:
        n = rng.poisson(rate / 60.0 * duration)
        obs_times.append(np.unique(rng.uniform(0.0, duration, size=n)))
    # link inputs come from the scheduled observations, before the event cuts them short
    lengthscales = truth.lengthscales(latent_horizons(obs_times, spec.r_shared))
    fine = np.append(np.arange(0.0, duration, FINE_STEP), duration)
    grid = np.unique(np.concatenate([fine] + obs_times))
    latents = np.array([sample_ou_path(grid, l, rng) for l in lengthscales])

    weights = LMCWeights(
        spec.weight_scale * rng.standard_normal((spec.d_signals, spec.r_shared)),
        np.full(spec.d_signals, spec.weight_scale),
        np.full(spec.d_signals, spec.noise_scale),
    )
    covariates = rng.standard_normal(len(truth.hazard.gamma))
    draft = GroundTruth(individual_id, duration, grid, latents, weights, covariates, 0.0, 0.0, lengthscales)
    signals = draft.signals
    combined = truth.hazard.alpha @ signals
    fbar = history_feature(grid, combined, truth.hazard.c, duration)

    true_time = draw_event_time(truth.hazard, covariates, fbar, rng)
    event_free = true_time > duration
    event = censor_event(true_time, rng, spec.right_fraction, spec.interval_fraction)
    if event_free:
        cutoff = duration
    elif event.kind is EventKind.RIGHT_CENSORED:
        cutoff = event.t_left
    else:
        cutoff = min(event.t_left, duration)

    series = []
    for d, times in enumerate(obs_times):
        times = times[times <= cutoff]
        idx = np.searchsorted(grid, times)
        values = signals[d, idx] + student_t_noise(spec.noise_scale, times.size, rng)
        series.append(ObservationSeries(d, times, values))

    cov_frame = pd.DataFrame({
        "time_min": np.zeros(covariates.size),
        "name": [f"x{j}" for j in range(covariates.size)],
        "value": covariates,
    })
    last_obs = max([s.times[-1] for s in series if len(s)], default=0.0)
    if event_free:
        end_time = last_obs
        record_event = EventRecord(EventKind.RIGHT_CENSORED, end_time)
    else:
        record_event = event
        end_time = max(last_obs, event.t_right if event.t_right is not None else event.t_left)
    record = IndividualRecord(
        individual_id=individual_id,
        series=series,
        event=record_event,
        end_time=float(end_time),
        covariates=cov_frame,
        event_free=event_free,
    )
    ground = GroundTruth(individual_id, duration, grid, latents, weights, covariates, fbar, true_time, lengthscales)
    return record, ground


def simulate_population(spec: SimSpec):
    """Draw ``spec.n_individuals`` individuals from per-individual substreams."""
    records, truths = [], []
    for i in range(spec.n_individuals):
        rng = substream(spec.seed, "simulate", i)
        record, truth = sample_individual(spec, rng, f"sim{i:04d}")
        records.append(record)
        truths.append(truth)
    n_events = sum(not r.event_free for r in records)
    logger.info("simulated %d individuals, %d with events", len(records), n_events)
    return records, truths


def write_truth(spec: SimSpec, truths: list[GroundTruth], directory: str) -> None:
    """Write the ground-truth sidecar: latent paths as npz, parameters as JSON."""
    os.makedirs(directory, exist_ok=True)
    arrays = {}
    individuals = {}
    for truth in truths:
        arrays[f"{truth.individual_id}_grid"] = truth.grid
        arrays[f"{truth.individual_id}_latents"] = truth.latents
        individuals[truth.individual_id] = {
            "duration": truth.duration,
            "fbar": truth.fbar,
            "event_time": None if not np.isfinite(truth.event_time) else truth.event_time,
            "covariates": truth.covariates.tolist(),
            "w": truth.weights.w.tolist(),
            "kappa": truth.weights.kappa.tolist(),
            "lengthscales": truth.lengthscales,
        }
    np.savez_compressed(os.path.join(directory, TRUTH_ARRAYS), **arrays)
    h = spec.truth.hazard
    params = {
        "a": h.a,
        "b": h.b,
        "c": h.c,
        "gamma": np.asarray(h.gamma).tolist(),
        "alpha": np.asarray(h.alpha).tolist(),
        "beta": [link.beta for link in spec.truth.links],
        "beta0": [link.beta0 for link in spec.truth.links],
        "individuals": individuals,
    }
    with open(os.path.join(directory, TRUTH_PARAMS), "w", encoding="utf-8") as f:
        json.dump(params, f, indent=2)


def simulate_to_directory(spec: SimSpec, directory: str) -> list[IndividualRecord]:
    """Simulate a population and write its dataset files and truth sidecar."""
    records, truths = simulate_population(spec)
    write_population(records, directory)
    write_truth(spec, truths, directory)
    return records
