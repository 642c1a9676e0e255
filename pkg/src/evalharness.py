"""Evaluation protocol: prediction schedules, labels, metrics and cost sweeps."""
import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy.stats import norm
from sklearn.metrics import roc_auc_score

from src.datasets import IndividualRecord
from src.inference import grid_schedule
from src.policy import CostSpec, Decision, EventProbDist, Verdict, decide, expected_event_probability
from src.survival import EventKind


logger = logging.getLogger(__name__)

HORIZON = 720.0


@dataclass
class PredictionInstance:
    """One landmark prediction of one individual.

    ``label`` is ``None`` when censoring hides whether the event fell
    inside the horizon; such instances are excluded from the metrics.
    """

    individual_id: str
    t: float
    label: bool | None
    decision: Decision | None = None
    dist: EventProbDist | None = None


@dataclass
class MetricRow:
    """Detection metrics of a set of decisions; undefined ratios are ``None``."""

    tpr: float | None
    fpr: float | None
    ppv: float | None
    decision_rate: float | None
    n_excluded: int
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    n_abstain: int = 0
    mode: str = ""
    l1: float = float("nan")
    l2: float = float("nan")
    q: float = float("nan")

    @property
    def positives(self) -> int:
        return self.tp + self.fn


def label_instance(record: IndividualRecord, t: float, delta: float = HORIZON) -> bool | None:
    """Whether the event happens in ``(t, t + delta]``; ``None`` if indeterminable."""
    if record.event_free:
        return False
    event = record.event
    horizon_end = t + delta
    if event.kind is EventKind.OBSERVED:
        if event.t_left <= t:
            return None
        return event.t_left <= horizon_end
    if event.kind is EventKind.INTERVAL_CENSORED:
        if event.t_right <= horizon_end:
            return True
        if event.t_left > horizon_end:
            return False
        return None
    # intervention censoring: event unknown after t_left
    if event.t_left >= horizon_end:
        return False
    return None


def schedule_predictions(record: IndividualRecord, end_time: float | None = None, delta: float = HORIZON) -> list[PredictionInstance]:
    """Labelled landmark instances of an individual.

    Parameters
    ----------
    record : IndividualRecord
        Individual with its event data.
    end_time : float, optional
        End of stay; the record's ``end_time`` when omitted.
    delta : float, optional
        Horizon in minutes, by default 720.

    Returns
    -------
    list of PredictionInstance
        Up to five instances, without decisions.
    """
    end_time = record.duration if end_time is None else end_time
    return [
        PredictionInstance(record.individual_id, t, label_instance(record, t, delta))
        for t in grid_schedule(record.event, end_time)
    ]


def _row(verdicts, labels, n_excluded: int, **costs) -> MetricRow:
    predicted_pos = verdicts == Verdict.POSITIVE.value
    predicted_neg = verdicts == Verdict.NEGATIVE.value
    tp = int(np.sum(predicted_pos & labels))
    fp = int(np.sum(predicted_pos & ~labels))
    tn = int(np.sum(predicted_neg & ~labels))
    fn = int(np.sum(predicted_neg & labels))
    positives = int(np.sum(labels))
    negatives = int(labels.size - positives)
    decided = tp + fp + tn + fn
    return MetricRow(
        tpr=tp / positives if positives else None,
        fpr=fp / negatives if negatives else None,
        ppv=tp / (tp + fp) if tp + fp else None,
        decision_rate=decided / labels.size if labels.size else None,
        n_excluded=n_excluded,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        n_abstain=int(labels.size - decided),
        **costs,
    )


def compute_metrics(instances: list[PredictionInstance]) -> MetricRow:
    """TPR, FPR, PPV and decision rate over all labelled instances.

    Abstentions stay in the TPR and FPR denominators; instances without a
    label are counted in ``n_excluded``.

    Raises
    ------
    ValueError
        If ``instances`` is empty or a labelled instance has no decision.
    """
    if not instances:
        raise ValueError("no prediction instances")
    labelled = [inst for inst in instances if inst.label is not None]
    if any(inst.decision is None for inst in labelled):
        raise ValueError("every labelled instance needs a decision")
    verdicts = np.array([inst.decision.verdict.value for inst in labelled], dtype=object)
    labels = np.array([bool(inst.label) for inst in labelled], dtype=bool)
    return _row(verdicts, labels, len(instances) - len(labelled))


def decide_instances(instances: list[PredictionInstance], costs: CostSpec, mode: str = "robust", point_estimate: str = "plugin"):
    """Copies of ``instances`` carrying the decision for their distribution."""
    return [replace(inst, decision=decide(inst.dist, costs, mode, point_estimate)) for inst in instances]


def _quantiles(loc, scale, k, q):
    return -np.expm1(k * np.exp(loc + scale * norm.ppf(q)))


def _verdicts(h_lo, h_hi, l1, l2):
    # ties resolve as in the policy module: negative, then positive
    risk_neg = h_hi
    risk_pos = (1.0 - h_lo) * l1
    out = np.full(h_hi.shape, Verdict.ABSTAIN.value, dtype=object)
    pos = risk_pos <= l2
    out[pos] = Verdict.POSITIVE.value
    neg = (risk_neg <= risk_pos) & (risk_neg <= l2)
    out[neg] = Verdict.NEGATIVE.value
    return out


def sweep(
    instances: list[PredictionInstance],
    l1_grid,
    l2_grid,
    q_grid,
    mode: str = "robust",
    point_estimate: str = "plugin",
) -> pd.DataFrame:
    """Metrics for every cost triple of the grids.

    Parameters
    ----------
    instances : list of PredictionInstance
        Instances carrying their event probability distribution.
    l1_grid, l2_grid, q_grid : sequence of float
        Relative false-positive costs, abstention costs and risk quantiles.
    mode : str, optional
        ``"robust"`` or ``"point"`` (uncertainty discarded).
    point_estimate : str, optional
        ``"plugin"`` or ``"mean"``, used in point mode.

    Returns
    -------
    pandas.DataFrame
        One row per ``(L1, L2, q)`` with the metric columns and counts.
    """
    if not (len(l1_grid) and len(l2_grid) and len(q_grid)):
        raise ValueError("sweep grids must be nonempty")
    if mode not in ("robust", "point"):
        raise ValueError(f"unknown mode {mode!r}")
    labelled = [inst for inst in instances if inst.label is not None]
    n_excluded = len(instances) - len(labelled)
    if any(inst.dist is None for inst in labelled):
        raise ValueError("every labelled instance needs a distribution")
    labels = np.array([bool(inst.label) for inst in labelled], dtype=bool)
    loc = np.array([inst.dist.loc for inst in labelled], dtype=float)
    scale = np.array([inst.dist.scale for inst in labelled], dtype=float)
    k = np.array([inst.dist.k for inst in labelled], dtype=float)

    if mode == "point" and point_estimate == "mean":
        point = np.array([expected_event_probability(inst.dist) for inst in labelled])
    else:
        point = -np.expm1(k * np.exp(loc))

    rows = []
    for q in q_grid:
        if mode == "robust":
            h_hi = np.where(scale > 0, _quantiles(loc, scale, k, q), point)
            h_lo = np.where(scale > 0, _quantiles(loc, scale, k, 1.0 - q), point)
        else:
            h_hi = h_lo = point
        for l1 in l1_grid:
            for l2 in l2_grid:
                costs = CostSpec(float(l1), float(l2), float(q))
                verdicts = _verdicts(h_lo, h_hi, costs.l1, costs.l2)
                row = _row(verdicts, labels, n_excluded, mode=mode, l1=float(l1), l2=float(l2), q=float(q))
                rows.append(row)
    logger.debug("swept %d cost triples over %d labelled instances", len(rows), labels.size)
    return metrics_frame(rows)


def metrics_frame(rows: list[MetricRow]) -> pd.DataFrame:
    """Table with the ``metrics.csv`` columns followed by the raw counts."""
    return pd.DataFrame([
        {
            "mode": r.mode,
            "L1": r.l1,
            "L2": r.l2,
            "q": r.q,
            "tpr": r.tpr,
            "fpr": r.fpr,
            "ppv": r.ppv,
            "decision_rate": r.decision_rate,
            "n_excluded": r.n_excluded,
            "tp": r.tp,
            "fp": r.fp,
            "tn": r.tn,
            "fn": r.fn,
            "n_abstain": r.n_abstain,
        }
        for r in rows
    ])


def roc_frontier(metrics: pd.DataFrame) -> pd.DataFrame:
    """Maximum TPR obtained at each FPR, per mode."""
    defined = metrics.dropna(subset=["tpr", "fpr"])
    frontier = defined.groupby(["mode", "fpr"], as_index=False)["tpr"].max()
    return frontier.sort_values(["mode", "fpr"], kind="stable").reset_index(drop=True)


def ppv_frontier(metrics: pd.DataFrame) -> pd.DataFrame:
    """Maximum TPR obtained at each PPV, per mode."""
    defined = metrics.dropna(subset=["tpr", "ppv"])
    frontier = defined.groupby(["mode", "ppv"], as_index=False)["tpr"].max()
    return frontier.sort_values(["mode", "ppv"], kind="stable").reset_index(drop=True)


def max_tpr_at_ppv(metrics: pd.DataFrame, min_ppv: float) -> float:
    """Largest TPR among rows whose PPV is at least ``min_ppv``; 0 if there is none."""
    eligible = metrics.dropna(subset=["tpr", "ppv"])
    eligible = eligible[eligible["ppv"] >= min_ppv]
    return float(eligible["tpr"].max()) if len(eligible) else 0.0


def bootstrap_auc(scores, labels, groups, n_boot: int = 10, rng: np.random.Generator | None = None):
    """AUC of ``scores`` with individuals resampled with replacement.

    Parameters
    ----------
    scores : array_like
        Risk scores, e.g. mean event probabilities.
    labels : array_like of bool
        Instance labels.
    groups : array_like
        Individual of each instance; whole individuals are resampled.
    n_boot : int, optional
        Number of resamples, by default 10.
    rng : numpy.random.Generator, optional
        Source of the resampling.

    Returns
    -------
    tuple of float
        Mean and standard deviation of the AUC over resamples that contain
        both classes; ``(nan, nan)`` if none does.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    groups = np.asarray(groups)
    rng = np.random.default_rng() if rng is None else rng
    unique = np.unique(groups)
    members = {g: np.flatnonzero(groups == g) for g in unique}
    aucs = []
    for _ in range(n_boot):
        chosen = rng.choice(unique, size=unique.size, replace=True)
        idx = np.concatenate([members[g] for g in chosen])
        if labels[idx].all() or not labels[idx].any():
            continue
        aucs.append(roc_auc_score(labels[idx], scores[idx]))
    if not aucs:
        return float("nan"), float("nan")
    return float(np.mean(aucs)), float(np.std(aucs))
