"""Individual records and the CSV files that carry them between commands.

File layout of a dataset directory::

    observations.csv   individual_id,signal_id,time_min,value
    covariates.csv     individual_id,time_min,name,value        (optional)
    events.csv         individual_id,kind,t_event,t_left,t_right

Signal ids are zero-based. Individuals without a row in ``events.csv`` are
event-free: they are right-censored at the last recorded time and every
prediction for them is labelled negative.
"""
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from src.exceptions import ValidationError
from src.longitudinal import ObservationSeries
from src.policy import Decision, EventProbDist, Verdict
from src.survival import EventKind, EventRecord


logger = logging.getLogger(__name__)

OBSERVATIONS_FILE = "observations.csv"
COVARIATES_FILE = "covariates.csv"
EVENTS_FILE = "events.csv"

OBSERVATION_COLUMNS = ["individual_id", "signal_id", "time_min", "value"]
COVARIATE_COLUMNS = ["individual_id", "time_min", "name", "value"]
EVENT_COLUMNS = ["individual_id", "kind", "t_event", "t_left", "t_right"]
DIST_COLUMNS = ["individual_id", "time_min", "loc", "scale", "k"]
LABEL_COLUMNS = ["individual_id", "time_min", "label"]
DECISION_COLUMNS = ["individual_id", "time_min", "verdict", "h_lo", "h_hi", "tau_lo", "tau_hi"]
METRIC_COLUMNS = ["mode", "L1", "L2", "q", "tpr", "fpr", "ppv", "decision_rate", "n_excluded"]
TIMES_COLUMNS = ["individual_id", "time_min"]

MIN_HORIZON = 1.0


def observation_horizons(times_by_signal) -> tuple[float, list[float]]:
    """Last observation time of an individual overall and per signal.

    Both are floored at one minute; a signal without observations takes the
    overall value.
    """
    lasts = [float(np.max(times)) if len(times) else None for times in times_by_signal]
    overall = max([t for t in lasts if t is not None], default=MIN_HORIZON)
    overall = max(overall, MIN_HORIZON)
    return overall, [overall if t is None else max(t, MIN_HORIZON) for t in lasts]


@dataclass
class IndividualRecord:
    """Everything recorded about one individual.

    Parameters
    ----------
    individual_id : str
        Identifier, unique within a dataset.
    series : list of ObservationSeries
        One entry per signal, possibly empty.
    event : EventRecord
        Observed or censored event time.
    end_time : float
        Last recorded time in minutes.
    covariates : pandas.DataFrame, optional
        Long table ``time_min,name,value`` of covariate changes.
    event_free : bool, optional
        Whether the individual never had the event during the stay.
    """

    individual_id: str
    series: list[ObservationSeries]
    event: EventRecord
    end_time: float
    covariates: pd.DataFrame = field(
        default_factory=lambda: pd.DataFrame(columns=["time_min", "name", "value"])
    )
    event_free: bool = False

    @property
    def n_signals(self) -> int:
        return len(self.series)

    @property
    def duration(self) -> float:
        """Recorded span in minutes, at least one minute."""
        return max(float(self.end_time), MIN_HORIZON)

    def observation_horizons(self) -> tuple[float, list[float]]:
        return observation_horizons([s.times for s in self.series])

    @property
    def n_observations(self) -> int:
        return sum(len(s) for s in self.series)

    def up_to(self, t: float) -> "IndividualRecord":
        """Copy holding only the data recorded at or before ``t``."""
        covariates = self.covariates[self.covariates["time_min"] <= t]
        return replace(
            self,
            series=[s.up_to(t) for s in self.series],
            covariates=covariates.reset_index(drop=True),
            end_time=float(t),
        )

    def covariate_vector(self, t: float, names: list[str]) -> np.ndarray:
        """Covariates in effect at ``t``, last value carried forward (0 before the first)."""
        x = np.zeros(len(names))
        if self.covariates.empty:
            return x
        known = self.covariates[self.covariates["time_min"] <= t].sort_values(
            "time_min", kind="stable"
        )
        latest = known.groupby("name", sort=False)["value"].last()
        for j, name in enumerate(names):
            if name in latest.index:
                x[j] = float(latest[name])
        return x


def _line(position: int) -> int:
    # header is line 1
    return position + 2


def _read_table(path: str, columns: list[str]) -> pd.DataFrame:
    if not os.path.exists(path):
        raise ValidationError(f"{path}: file not found")
    try:
        frame = pd.read_csv(
            path, dtype=str, keep_default_na=False, encoding="utf-8"
        )
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as err:
        raise ValidationError(f"{path}: {err}") from err
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}", line=1)
    return frame[columns]


def _to_float(frame: pd.DataFrame, column: str, path: str, allow_empty: bool = False) -> np.ndarray:
    out = np.full(len(frame), np.nan)
    for i, raw in enumerate(frame[column]):
        if raw == "":
            if allow_empty:
                continue
            raise ValidationError(f"{path}: empty {column}", line=_line(i))
        try:
            out[i] = float(raw)
        except ValueError:
            raise ValidationError(f"{path}: {column}={raw!r} is not a number", line=_line(i))
        if not np.isfinite(out[i]):
            raise ValidationError(f"{path}: {column}={raw!r} is not finite", line=_line(i))
    return out


def _to_int(frame: pd.DataFrame, column: str, path: str) -> np.ndarray:
    out = np.zeros(len(frame), dtype=int)
    for i, raw in enumerate(frame[column]):
        try:
            out[i] = int(raw)
        except ValueError:
            raise ValidationError(f"{path}: {column}={raw!r} is not an integer", line=_line(i))
        if out[i] < 0:
            raise ValidationError(f"{path}: negative {column}", line=_line(i))
    return out


def _check_ids(frame: pd.DataFrame, path: str) -> None:
    for i, raw in enumerate(frame["individual_id"]):
        if raw == "":
            raise ValidationError(f"{path}: empty individual_id", line=_line(i))


def read_observations(path: str) -> pd.DataFrame:
    """Read ``observations.csv`` into a typed frame, keeping the file order."""
    frame = _read_table(path, OBSERVATION_COLUMNS)
    _check_ids(frame, path)
    times = _to_float(frame, "time_min", path)
    negative = np.flatnonzero(times < 0)
    if negative.size:
        raise ValidationError(f"{path}: negative time", line=_line(int(negative[0])))
    return pd.DataFrame({
        "individual_id": frame["individual_id"],
        "signal_id": _to_int(frame, "signal_id", path),
        "time_min": times,
        "value": _to_float(frame, "value", path),
        "line": [_line(i) for i in range(len(frame))],
    })


def read_covariates(path: str) -> pd.DataFrame:
    """Read ``covariates.csv``; a missing file means no covariates."""
    if not os.path.exists(path):
        return pd.DataFrame(columns=COVARIATE_COLUMNS)
    frame = _read_table(path, COVARIATE_COLUMNS)
    _check_ids(frame, path)
    for i, raw in enumerate(frame["name"]):
        if raw == "":
            raise ValidationError(f"{path}: empty covariate name", line=_line(i))
    return pd.DataFrame({
        "individual_id": frame["individual_id"],
        "time_min": _to_float(frame, "time_min", path),
        "name": frame["name"],
        "value": _to_float(frame, "value", path),
    })


def read_events(path: str) -> dict[str, EventRecord]:
    """Read ``events.csv`` into one EventRecord per individual."""
    frame = _read_table(path, EVENT_COLUMNS)
    _check_ids(frame, path)
    t_event = _to_float(frame, "t_event", path, allow_empty=True)
    t_left = _to_float(frame, "t_left", path, allow_empty=True)
    t_right = _to_float(frame, "t_right", path, allow_empty=True)
    events = {}
    for i, (iid, kind) in enumerate(zip(frame["individual_id"], frame["kind"])):
        if iid in events:
            raise ValidationError(f"{path}: duplicate individual {iid!r}", line=_line(i))
        try:
            kind = EventKind(kind)
        except ValueError:
            raise ValidationError(f"{path}: unknown event kind {kind!r}", line=_line(i))
        left = t_event[i] if kind is EventKind.OBSERVED and np.isnan(t_left[i]) else t_left[i]
        if np.isnan(left):
            raise ValidationError(f"{path}: t_left is required", line=_line(i))
        if kind is EventKind.OBSERVED and not np.isnan(t_event[i]) and t_event[i] != left:
            raise ValidationError(f"{path}: observed events need t_event == t_left", line=_line(i))
        right = None if np.isnan(t_right[i]) else float(t_right[i])
        if kind is not EventKind.INTERVAL_CENSORED:
            right = None
        try:
            events[iid] = EventRecord(kind, float(left), right)
        except ValueError as err:
            raise ValidationError(f"{path}: {err}", line=_line(i)) from err
    return events


def load_population(directory: str, n_signals: int | None = None) -> list[IndividualRecord]:
    """Assemble the individual records of a dataset directory.

    Parameters
    ----------
    directory : str
        Directory holding the dataset CSV files.
    n_signals : int, optional
        Number of signals; inferred from the largest signal id when omitted.

    Returns
    -------
    list of IndividualRecord
        Sorted by individual id.

    Raises
    ------
    ValidationError
        On malformed rows, unsorted or duplicate times, or an empty dataset.
    """
    obs_path = os.path.join(directory, OBSERVATIONS_FILE)
    observations = read_observations(obs_path)
    covariates = read_covariates(os.path.join(directory, COVARIATES_FILE))
    events = read_events(os.path.join(directory, EVENTS_FILE))

    ids = sorted(set(observations["individual_id"]) | set(covariates["individual_id"]) | set(events))
    if not ids:
        raise ValidationError(f"{directory}: dataset holds no individuals")
    if n_signals is None:
        n_signals = int(observations["signal_id"].max()) + 1 if len(observations) else 1
    too_high = observations[observations["signal_id"] >= n_signals]
    if len(too_high):
        row = too_high.iloc[0]
        raise ValidationError(
            f"{obs_path}: signal_id {row['signal_id']} >= {n_signals}", line=int(row["line"])
        )

    obs_groups = dict(tuple(observations.groupby("individual_id", sort=False)))
    cov_groups = dict(tuple(covariates.groupby("individual_id", sort=False)))
    records = []
    for iid in ids:
        rows = obs_groups.get(iid, observations.iloc[0:0])
        series = []
        for d in range(n_signals):
            sig = rows[rows["signal_id"] == d].sort_values("time_min", kind="stable")
            try:
                series.append(ObservationSeries(d, sig["time_min"].to_numpy(), sig["value"].to_numpy()))
            except ValueError as err:
                dupes = sig[sig["time_min"].duplicated()]
                line = int(dupes["line"].iloc[0]) if len(dupes) else None
                raise ValidationError(f"{obs_path}: individual {iid!r}: {err}", line=line) from err
        cov = cov_groups.get(iid, covariates.iloc[0:0])[["time_min", "name", "value"]]
        last_seen = [rows["time_min"].max() if len(rows) else 0.0]
        if len(cov):
            last_seen.append(cov["time_min"].max())
        event = events.get(iid)
        event_free = event is None
        if event_free:
            end_time = float(max(last_seen))
            event = EventRecord(EventKind.RIGHT_CENSORED, end_time)
        else:
            last_seen.append(event.t_right if event.t_right is not None else event.t_left)
            end_time = float(max(last_seen))
        records.append(IndividualRecord(
            individual_id=iid,
            series=series,
            event=event,
            end_time=end_time,
            covariates=cov.reset_index(drop=True),
            event_free=event_free,
        ))
    logger.debug("loaded %d individuals with %d signals from %s", len(records), n_signals, directory)
    return records


def covariate_names(records: list[IndividualRecord]) -> list[str]:
    """Sorted union of covariate names over a population."""
    names = set()
    for record in records:
        names.update(record.covariates["name"])
    return sorted(names)


def _write(frame: pd.DataFrame, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")


def write_population(records: list[IndividualRecord], directory: str) -> None:
    """Write records as ``observations.csv``, ``covariates.csv`` and ``events.csv``."""
    obs_rows, cov_rows, event_rows = [], [], []
    for record in records:
        for series in record.series:
            for t, y in zip(series.times, series.values):
                obs_rows.append((record.individual_id, series.signal_id, float(t), float(y)))
        for t, name, value in record.covariates[["time_min", "name", "value"]].itertuples(index=False):
            cov_rows.append((record.individual_id, float(t), name, float(value)))
        if record.event_free:
            continue
        ev = record.event
        event_rows.append((
            record.individual_id,
            ev.kind.value,
            ev.t_left if ev.kind is EventKind.OBSERVED else None,
            ev.t_left,
            ev.t_right,
        ))
    _write(pd.DataFrame(obs_rows, columns=OBSERVATION_COLUMNS), os.path.join(directory, OBSERVATIONS_FILE))
    _write(pd.DataFrame(cov_rows, columns=COVARIATE_COLUMNS), os.path.join(directory, COVARIATES_FILE))
    _write(pd.DataFrame(event_rows, columns=EVENT_COLUMNS), os.path.join(directory, EVENTS_FILE))


def write_dists(rows: list[tuple[str, float, EventProbDist]], path: str) -> None:
    frame = pd.DataFrame(
        [(iid, t, d.loc, d.scale, d.k) for iid, t, d in rows], columns=DIST_COLUMNS
    )
    _write(frame, path)


def read_dists(path: str) -> list[tuple[str, float, EventProbDist]]:
    frame = _read_table(path, DIST_COLUMNS)
    _check_ids(frame, path)
    times = _to_float(frame, "time_min", path)
    loc = _to_float(frame, "loc", path)
    scale = _to_float(frame, "scale", path)
    k = _to_float(frame, "k", path)
    rows = []
    for i, iid in enumerate(frame["individual_id"]):
        try:
            rows.append((iid, float(times[i]), EventProbDist(float(loc[i]), float(scale[i]), float(k[i]))))
        except ValueError as err:
            raise ValidationError(f"{path}: {err}", line=_line(i)) from err
    return rows


def write_labels(rows: list[tuple[str, float, bool | None]], path: str) -> None:
    """Write prediction labels; indeterminable labels are left empty."""
    frame = pd.DataFrame(
        [(iid, t, "" if label is None else int(label)) for iid, t, label in rows],
        columns=LABEL_COLUMNS,
    )
    _write(frame, path)


def read_labels(path: str) -> dict[tuple[str, float], bool | None]:
    frame = _read_table(path, LABEL_COLUMNS)
    _check_ids(frame, path)
    times = _to_float(frame, "time_min", path)
    labels = {}
    for i, (iid, raw) in enumerate(zip(frame["individual_id"], frame["label"])):
        if raw not in ("", "0", "1"):
            raise ValidationError(f"{path}: label must be 0, 1 or empty, got {raw!r}", line=_line(i))
        labels[(iid, float(times[i]))] = None if raw == "" else raw == "1"
    return labels


def read_times(path: str) -> dict[str, list[float]]:
    """Read requested landmarks ``individual_id,time_min``, grouped by individual in file order."""
    frame = _read_table(path, TIMES_COLUMNS)
    _check_ids(frame, path)
    times = _to_float(frame, "time_min", path)
    negative = np.flatnonzero(times < 0)
    if negative.size:
        raise ValidationError(f"{path}: negative time", line=_line(int(negative[0])))
    schedule = {}
    for iid, t in zip(frame["individual_id"], times):
        schedule.setdefault(iid, []).append(float(t))
    return schedule


def write_decisions(rows: list[tuple[str, float, Decision]], path: str) -> None:
    frame = pd.DataFrame(
        [
            (iid, t, d.verdict.value, d.h_lo, d.h_hi, d.tau_lo, d.tau_hi)
            for iid, t, d in rows
        ],
        columns=DECISION_COLUMNS,
    )
    _write(frame, path)


def read_decisions(path: str) -> list[tuple[str, float, Decision]]:
    frame = _read_table(path, DECISION_COLUMNS)
    _check_ids(frame, path)
    times = _to_float(frame, "time_min", path)
    values = {c: _to_float(frame, c, path) for c in ["h_lo", "h_hi", "tau_lo", "tau_hi"]}
    rows = []
    for i, (iid, raw) in enumerate(zip(frame["individual_id"], frame["verdict"])):
        try:
            verdict = Verdict(raw)
        except ValueError:
            raise ValidationError(f"{path}: verdict must be 0, 1 or a, got {raw!r}", line=_line(i))
        decision = Decision(verdict, *(float(values[c][i]) for c in ["h_lo", "h_hi", "tau_lo", "tau_hi"]))
        rows.append((iid, float(times[i]), decision))
    return rows


def write_metrics(frame: pd.DataFrame, path: str) -> None:
    _write(frame[METRIC_COLUMNS], path)
