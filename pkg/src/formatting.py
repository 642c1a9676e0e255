"""Formatting utilities for durations, probabilities and metric rows in log output."""


def format_minutes(value: float) -> str:
    """Format a duration in minutes as days, hours and minutes.

    Parameters
    ----------
    value : float
        Duration in minutes; negative values keep their sign.

    Returns
    -------
    str
        E.g. ``"2d 03h 15m"``, ``"5h 00m"`` or ``"42m"``.
    """
    sign = "-" if value < 0 else ""
    total = int(round(abs(value)))
    days, rest = divmod(total, 1440)
    hours, minutes = divmod(rest, 60)
    if days:
        return f"{sign}{days}d {hours:02d}h {minutes:02d}m"
    if hours:
        return f"{sign}{hours}h {minutes:02d}m"
    return f"{sign}{minutes}m"


def format_probability(value: float | None, digits: int = 1) -> str:
    """Format a probability as a percentage; ``None`` renders as ``"n/a"``."""
    if value is None or value != value:
        return "n/a"
    return f"{100.0 * value:.{digits}f}%"


def format_metric_row(row) -> str:
    """One-line summary of a metric row for log output.

    Parameters
    ----------
    row : MetricRow or mapping
        Metrics with ``tpr``, ``fpr``, ``ppv`` and ``decision_rate``.

    Returns
    -------
    str
        E.g. ``"TPR 75.0% FPR 20.0% PPV n/a decided 90.0%"``.
    """
    get = row.get if hasattr(row, "get") else lambda key: getattr(row, key)
    return (
        f"TPR {format_probability(get('tpr'))} "
        f"FPR {format_probability(get('fpr'))} "
        f"PPV {format_probability(get('ppv'))} "
        f"decided {format_probability(get('decision_rate'))}"
    )


def parse_minutes(text: str, default: float = 0.0) -> float:
    """Parse a duration such as ``"12h"``, ``"2d"``, ``"90m"`` or ``"720"`` into minutes.

    Parameters
    ----------
    text : str
        Number with an optional ``m``, ``h`` or ``d`` suffix.
    default : float, optional
        Value to return if parsing fails, by default 0.0.

    Returns
    -------
    float
        Minutes, or default if parsing fails.
    """
    units = {"m": 1.0, "h": 60.0, "d": 1440.0}
    try:
        cleaned = text.strip().lower()
        factor = units.get(cleaned[-1:], None)
        if factor is not None:
            cleaned = cleaned[:-1]
        return float(cleaned) * (factor or 1.0)
    except (ValueError, AttributeError):
        return default
