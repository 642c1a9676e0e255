"""Run configurations.

Named presets are JSON files under ``saved_settings/run``. A file given by
path to ``--config`` may also be a flat ``key=value`` text file::

    # comments and blank lines are skipped
    lr = 0.05
    likelihood = gaussian
    q_grid = [0.6, 0.8]

Values are read as JSON where they parse and as plain strings otherwise.
"""
import json
import logging
import os
import zlib

import numpy as np

from src.exceptions import ValidationError


logger = logging.getLogger(__name__)

SETTINGS_DIR = os.path.join("saved_settings", "run")

# Default values for every run
RUN_DEFAULTS = {
    # training
    "lr": 0.025,
    "max_global_iters": 1500,
    "minibatch": 2,
    "n_mc": 1000,
    "local_max_iters": 500,
    "gh_nodes": 20,
    "m_inducing": 20,
    "r_shared": 2,
    "rel_tol": 1e-4,
    "seed": 0,
    "likelihood": "student_t",
    "event_weight": 1.0,
    "threads": 1,
    "log_every": 50,
    # prediction and decisions
    "horizon": 720.0,
    "mode": "robust",
    "point_estimate": "plugin",
    "l1": 1.0,
    "l2": 0.4,
    "q": 0.75,
    "l1_grid": [0.25, 0.5, 1.0, 2.0, 4.0],
    "l2_grid": None,
    "l2_points": 20,
    "l2_min": 0.01,
    "l2_max": 1.0,
    "q_grid": [0.55, 0.75, 0.9, 0.95],
    "bootstrap_size": 10,
    # simulation
    "sim_n_individuals": 60,
    "sim_d_signals": 3,
    "sim_r_shared": 2,
    "sim_obs_per_hour": [0.5, 0.5, 0.5],
    "sim_duration_min": 1440.0,
    "sim_duration_max": 7200.0,
    "sim_right_fraction": 0.2,
    "sim_interval_fraction": 0.1,
    "sim_alpha": [1.0, -1.0, 0.0],
    "sim_gamma": [0.3],
    "sim_a": 0.0002,
    "sim_b": -8.0,
    "sim_c": 0.002,
    "sim_beta": [1.0, 1.0, 1e-5, 1e-5, 1e-5],
    "sim_beta0": [-12.0, -12.0, -5.0, -5.0, -5.0],
    "sim_noise_scale": 0.1,
    "sim_weight_scale": 1.0,
}

_POSITIVE_INT = (
    "max_global_iters", "minibatch", "n_mc", "local_max_iters", "gh_nodes",
    "m_inducing", "threads", "log_every", "l2_points", "bootstrap_size",
    "sim_n_individuals", "sim_d_signals",
)
_POSITIVE_FLOAT = (
    "lr", "rel_tol", "horizon", "l1", "l2", "l2_min", "l2_max",
    "sim_duration_min", "sim_duration_max", "sim_c", "sim_noise_scale",
)
_CHOICES = {
    "likelihood": ("student_t", "gaussian"),
    "mode": ("robust", "point"),
    "point_estimate": ("plugin", "mean"),
}

STREAMS = {"simulate": 0, "train": 1, "mc": 2, "bootstrap": 3}


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate_settings(settings: dict) -> dict:
    """Check keys, types and ranges of a merged configuration.

    Raises
    ------
    ValidationError
        On unknown keys or out-of-range values.
    """
    unknown = sorted(set(settings) - set(RUN_DEFAULTS))
    if unknown:
        raise ValidationError(f"unknown configuration keys {unknown}")
    for key in _POSITIVE_INT:
        value = settings[key]
        if not (isinstance(value, int) and not isinstance(value, bool) and value > 0):
            raise ValidationError(f"{key} must be a positive integer, got {value!r}")
    for key in _POSITIVE_FLOAT:
        value = settings[key]
        if not (_is_number(value) and value > 0):
            raise ValidationError(f"{key} must be positive, got {value!r}")
    for key, choices in _CHOICES.items():
        if settings[key] not in choices:
            raise ValidationError(f"{key} must be one of {choices}, got {settings[key]!r}")
    if not (isinstance(settings["r_shared"], int) and settings["r_shared"] >= 0):
        raise ValidationError(f"r_shared must be a nonnegative integer, got {settings['r_shared']!r}")
    if not isinstance(settings["seed"], int) or settings["seed"] < 0:
        raise ValidationError(f"seed must be a nonnegative integer, got {settings['seed']!r}")
    if not (_is_number(settings["event_weight"]) and settings["event_weight"] >= 0):
        raise ValidationError("event_weight must be nonnegative")
    if not 0.5 < settings["q"] < 1.0:
        raise ValidationError(f"q must lie in (0.5, 1), got {settings['q']!r}")
    if settings["gh_nodes"] < 5:
        raise ValidationError("gh_nodes must be at least 5")
    if settings["m_inducing"] < 2:
        raise ValidationError("m_inducing must be at least 2")
    for key in ("l1_grid", "q_grid") + (("l2_grid",) if settings["l2_grid"] is not None else ()):
        grid = settings[key]
        if not (isinstance(grid, list) and grid and all(_is_number(v) and v > 0 for v in grid)):
            raise ValidationError(f"{key} must be a nonempty list of positive numbers")
    if any(not 0.5 < q < 1.0 for q in settings["q_grid"]):
        raise ValidationError("q_grid entries must lie in (0.5, 1)")
    if settings["sim_duration_min"] > settings["sim_duration_max"]:
        raise ValidationError("sim_duration_min exceeds sim_duration_max")
    fractions = (settings["sim_right_fraction"], settings["sim_interval_fraction"])
    if any(not _is_number(f) or f < 0 for f in fractions) or sum(fractions) > 1:
        raise ValidationError("censoring fractions must be nonnegative and sum to at most 1")
    d = settings["sim_d_signals"]
    k = settings["sim_r_shared"] + d
    for key, size in (("sim_obs_per_hour", d), ("sim_alpha", d), ("sim_beta", k), ("sim_beta0", k)):
        if not (isinstance(settings[key], list) and len(settings[key]) == size):
            raise ValidationError(f"{key} must be a list of length {size}")
    if any(v <= 0 for v in settings["sim_obs_per_hour"]):
        raise ValidationError("sim_obs_per_hour entries must be positive")
    return settings


def l2_grid(settings: dict) -> list[float]:
    """Abstention cost grid, log-spaced between ``l2_min`` and ``l2_max`` unless given."""
    if settings["l2_grid"] is not None:
        return [float(v) for v in settings["l2_grid"]]
    grid = np.geomspace(settings["l2_min"], settings["l2_max"], settings["l2_points"])
    return [float(v) for v in grid]


def get_saved_settings(settings_dir: str = SETTINGS_DIR) -> list[str]:
    """Get list of saved settings names (without .json extension)."""
    if not os.path.exists(settings_dir):
        return []
    files = [f[:-5] for f in os.listdir(settings_dir) if f.endswith(".json")]
    return sorted(files)


def _read_json(filepath: str) -> dict:
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            content = json.load(f)
    except json.JSONDecodeError as err:
        raise ValidationError(f"{filepath}: {err.msg}", line=err.lineno) from err
    if not isinstance(content, dict):
        raise ValidationError(f"{filepath}: expected a JSON object")
    return content


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _read_key_values(filepath: str) -> dict:
    """Read a flat ``key=value`` file; unknown and repeated keys are errors."""
    content = {}
    with open(filepath, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ValidationError(f"{filepath}: expected key=value, got {line!r}", line=lineno)
            if key not in RUN_DEFAULTS:
                raise ValidationError(f"{filepath}: unknown configuration key {key!r}", line=lineno)
            if key in content:
                raise ValidationError(f"{filepath}: key {key!r} given twice", line=lineno)
            content[key] = _parse_value(value.strip())
    return content


def read_settings_file(filepath: str) -> dict:
    """Read a JSON object, or a ``key=value`` file when the content is not JSON."""
    with open(filepath, "r", encoding="utf-8") as f:
        head = f.read().lstrip()
    if head.startswith("{"):
        return _read_json(filepath)
    return _read_key_values(filepath)


def load_settings(path_or_name: str | None = None, settings_dir: str = SETTINGS_DIR, **overrides) -> dict:
    """Load a run configuration.

    Built-in defaults are overlaid with ``defaults.json`` from
    ``settings_dir`` (if present), then with the named or given file, then
    with ``overrides``.

    Parameters
    ----------
    path_or_name : str, optional
        Path to a JSON or ``key=value`` file, or the name of a JSON file in
        ``settings_dir``.
    settings_dir : str, optional
        Directory of named settings.
    **overrides
        Final key overrides, e.g. from command-line flags.

    Returns
    -------
    dict
        Validated configuration.
    """
    settings = dict(RUN_DEFAULTS)
    defaults_path = os.path.join(settings_dir, "defaults.json")
    if os.path.exists(defaults_path):
        settings.update(_read_json(defaults_path))
    if path_or_name:
        filepath = path_or_name
        if not os.path.isfile(filepath):
            filepath = os.path.join(settings_dir, f"{path_or_name}.json")
        if not os.path.isfile(filepath):
            saved = ", ".join(get_saved_settings(settings_dir)) or "none"
            raise ValidationError(f"settings {path_or_name!r} not found (saved settings: {saved})")
        settings.update(read_settings_file(filepath))
        logger.debug("loaded settings from %s", filepath)
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return validate_settings(settings)


def save_settings(settings: dict, settings_name: str, settings_dir: str = SETTINGS_DIR) -> str:
    """Save a configuration to ``<settings_dir>/<settings_name>.json`` and return the path."""
    name = (settings_name or "").strip()
    if not name:
        raise ValidationError("settings name must not be empty")
    validate_settings({**RUN_DEFAULTS, **settings})
    os.makedirs(settings_dir, exist_ok=True)
    filepath = os.path.join(settings_dir, f"{name}.json")
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(settings, f, indent=2)
    return filepath


def individual_key(individual_id: str) -> int:
    """Stable integer key of an individual for seeding its random substream."""
    return zlib.crc32(str(individual_id).encode("utf-8"))


def substream(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Random generator for a named substream of the run seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, STREAMS[stream], *keys]))
