"""Distribution of the event probability and the quantile-risk decision rule.

With ``fbar ~ N(mu, sigma^2)`` the event probability within the horizon is
``H = 1 - exp(k exp(loc + sigma eps))``, a monotone transform of a Gaussian,
so its quantiles and density are closed form. Costs are expressed relative
to the false-negative cost: ``l1`` is the false-positive cost and ``l2`` the
cost of abstaining.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.stats import norm


class Verdict(str, Enum):
    NEGATIVE = "0"
    POSITIVE = "1"
    ABSTAIN = "a"


@dataclass(frozen=True)
class EventProbDist:
    """Distribution of ``H = 1 - exp(k exp(f))`` with ``f ~ N(loc, scale^2)``.

    Parameters
    ----------
    loc : float
        ``b + gamma^T x_t + mu``, the mean log hazard at the landmark.
    scale : float
        Standard deviation of the history feature, nonnegative.
    k : float
        Horizon constant ``(1 - exp(a delta)) / a``, nonpositive.
    """

    loc: float
    scale: float
    k: float

    def __post_init__(self):
        if not (np.isfinite(self.loc) and np.isfinite(self.scale) and np.isfinite(self.k)):
            raise ValueError(f"non-finite event probability distribution {self}")
        if self.scale < 0:
            raise ValueError(f"scale must be nonnegative, got {self.scale}")
        if self.k > 0:
            raise ValueError(f"k must be nonpositive, got {self.k}")


@dataclass(frozen=True)
class CostSpec:
    """Relative misclassification and abstention costs plus the risk quantile.

    Parameters
    ----------
    l1 : float
        False-positive cost over false-negative cost.
    l2 : float
        Abstention cost over false-negative cost.
    q : float
        Risk quantile in ``(0.5, 1)``.
    """

    l1: float
    l2: float
    q: float

    def __post_init__(self):
        if not self.l1 > 0:
            raise ValueError(f"l1 must be positive, got {self.l1}")
        if not self.l2 > 0:
            raise ValueError(f"l2 must be positive, got {self.l2}")
        if not 0.5 < self.q < 1.0:
            raise ValueError(f"q must lie in (0.5, 1), got {self.q}")


@dataclass(frozen=True)
class Decision:
    """Verdict with the quantiles and thresholds that produced it."""

    verdict: Verdict
    h_lo: float
    h_hi: float
    tau_lo: float
    tau_hi: float
    high_uncertainty: bool = False

    @property
    def c_q(self) -> float:
        return self.h_hi - self.h_lo


def point_value(dist: EventProbDist) -> float:
    """Event probability at the mean of the history feature."""
    return float(-np.expm1(dist.k * np.exp(dist.loc)))


def ph_density(dist: EventProbDist, h):
    """Density of the event probability at ``h``.

    Parameters
    ----------
    dist : EventProbDist
        Distribution with ``scale > 0`` and ``k < 0``.
    h : float or array_like
        Probabilities strictly inside ``(0, 1)``.

    Returns
    -------
    float or numpy.ndarray
        ``N(log(log(1 - h) / k); loc, scale^2) / ((h - 1) log(1 - h))``.
    """
    h = np.asarray(h, dtype=float)
    if np.any(h <= 0) or np.any(h >= 1):
        raise ValueError("h must lie strictly inside (0, 1)")
    if dist.scale <= 0 or dist.k >= 0:
        raise ValueError("density needs scale > 0 and k < 0")
    log_survival = np.log1p(-h)
    v = np.log(log_survival / dist.k)
    return norm.pdf(v, loc=dist.loc, scale=dist.scale) / ((h - 1.0) * log_survival)


def quantile(dist: EventProbDist, q: float) -> float:
    """Closed-form ``q``-quantile of the event probability."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    v = dist.loc + dist.scale * norm.ppf(q)
    return float(-np.expm1(dist.k * np.exp(v)))


def risk_quantile(dist: EventProbDist, costs: CostSpec, verdict: Verdict) -> float:
    """``q``-quantile of the loss of ``verdict`` in false-negative cost units.

    A negative verdict risks ``H``, a positive one ``(1 - H) l1`` whose
    ``q``-quantile is ``(1 - h^(1-q)) l1``, and abstention costs ``l2``.
    """
    verdict = Verdict(verdict)
    if verdict is Verdict.ABSTAIN:
        return costs.l2
    if verdict is Verdict.NEGATIVE:
        return quantile(dist, costs.q)
    return (1.0 - quantile(dist, 1.0 - costs.q)) * costs.l1


def _choose(risk_negative, risk_positive, risk_abstain) -> Verdict:
    # ties go to negative, then positive
    if risk_negative <= risk_positive and risk_negative <= risk_abstain:
        return Verdict.NEGATIVE
    if risk_positive <= risk_abstain:
        return Verdict.POSITIVE
    return Verdict.ABSTAIN


def _is_high_uncertainty(c_q: float, costs: CostSpec) -> bool:
    return c_q >= costs.l2 * (1.0 + costs.l1) / costs.l1 - 1.0


def abstention_width(c_q: float, costs: CostSpec) -> float:
    """Length of the abstention interval in ``h^(q)`` for a quantile spread ``c_q``."""
    return max(0.0, 1.0 + c_q - costs.l2 * (1.0 + costs.l1) / costs.l1)


def point_decide(h0: float, costs: CostSpec) -> Decision:
    """Decision for a known event probability ``h0``.

    Negative below ``min(l2, l1 / (1 + l1))``, positive above
    ``max(1 - l2 / l1, l1 / (1 + l1))`` and abstain in between.
    """
    if not 0.0 <= h0 <= 1.0:
        raise ValueError(f"h0 must lie in [0, 1], got {h0}")
    balance = costs.l1 / (1.0 + costs.l1)
    verdict = _choose(h0, (1.0 - h0) * costs.l1, costs.l2)
    return Decision(
        verdict=verdict,
        h_lo=h0,
        h_hi=h0,
        tau_lo=min(costs.l2, balance),
        tau_hi=max(1.0 - costs.l2 / costs.l1, balance),
        high_uncertainty=_is_high_uncertainty(0.0, costs),
    )


def robust_decide(dist: EventProbDist, costs: CostSpec) -> Decision:
    """Verdict minimizing the ``q``-quantile of the loss.

    Parameters
    ----------
    dist : EventProbDist
        Event probability distribution at the landmark.
    costs : CostSpec
        Relative costs and risk quantile.

    Returns
    -------
    Decision
        Negative if ``h^(q) <= tau_lo``, positive if ``h^(q) >= tau_hi``,
        abstain otherwise, with ``c_q = h^(q) - h^(1-q)``,
        ``tau_lo = min(l1 (1 + c_q) / (1 + l1), l2)`` and
        ``tau_hi = max(l1 (1 + c_q) / (1 + l1), 1 + c_q - l2 / l1)``.
    """
    if dist.scale == 0:
        return point_decide(point_value(dist), costs)
    h_hi = quantile(dist, costs.q)
    h_lo = quantile(dist, 1.0 - costs.q)
    c_q = h_hi - h_lo
    balance = costs.l1 * (1.0 + c_q) / (1.0 + costs.l1)
    verdict = _choose(h_hi, (1.0 - h_lo) * costs.l1, costs.l2)
    return Decision(
        verdict=verdict,
        h_lo=h_lo,
        h_hi=h_hi,
        tau_lo=min(balance, costs.l2),
        tau_hi=max(balance, 1.0 + c_q - costs.l2 / costs.l1),
        high_uncertainty=_is_high_uncertainty(c_q, costs),
    )


def expected_event_probability(dist: EventProbDist, n_nodes: int = 20) -> float:
    """Mean event probability by Gauss-Hermite quadrature over the history feature."""
    if n_nodes < 10:
        raise ValueError(f"need at least 10 quadrature nodes, got {n_nodes}")
    if dist.scale == 0:
        return point_value(dist)
    nodes, weights = hermgauss(n_nodes)
    f = dist.loc + np.sqrt(2.0) * dist.scale * nodes
    h = -np.expm1(dist.k * np.exp(f))
    return float(np.clip(np.dot(weights, h) / np.sqrt(np.pi), 0.0, 1.0))


def decide(dist: EventProbDist, costs: CostSpec, mode: str = "robust", point_estimate: str = "plugin") -> Decision:
    """Dispatch to the robust rule or to the point rule on a point estimate.

    ``point_estimate`` is ``"plugin"`` (probability at the mean feature) or
    ``"mean"`` (expected probability); it only matters in ``"point"`` mode.
    """
    if mode == "robust":
        return robust_decide(dist, costs)
    if mode != "point":
        raise ValueError(f"unknown decision mode {mode!r}")
    if point_estimate == "plugin":
        return point_decide(point_value(dist), costs)
    if point_estimate == "mean":
        return point_decide(expected_event_probability(dist), costs)
    raise ValueError(f"unknown point estimate {point_estimate!r}")
