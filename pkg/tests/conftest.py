"""Pytest configuration and shared fixtures."""
import os
import sys
from pathlib import Path

import hypothesis
import numpy as np
import pandas as pd
import pytest


# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.datasets import IndividualRecord  # noqa: E402
from src.inference import GlobalParams, LocalState, TrainConfig, init_global, init_local  # noqa: E402
from src.kernels import LengthScaleLink  # noqa: E402
from src.longitudinal import InducingBlock, LMCWeights, ObservationSeries  # noqa: E402
from src.survival import EventKind, EventRecord, HazardParams  # noqa: E402


hypothesis.settings.register_profile("fast", max_examples=25, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=500, deadline=None)
# HYPOTHESIS_PROFILE=thorough selects the longer runs
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow acceptance experiments"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance experiment")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def hazard_params():
    """Provide time-to-event coefficients with one covariate and two signals.

    Returns
    -------
    HazardParams
        Moderate hazard around exp(-6) per minute.
    """
    return HazardParams(
        a=1e-4,
        b=-6.0,
        gamma=np.array([0.5]),
        alpha=np.array([0.8, -0.4]),
        c=0.01,
    )


@pytest.fixture
def tiny_record():
    """Provide a two-signal individual with six observations and an interval-censored event.

    Returns
    -------
    IndividualRecord
        Observations over the first 300 minutes, event inside [400, 520].
    """
    return IndividualRecord(
        individual_id="tiny",
        series=[
            ObservationSeries(0, np.array([10.0, 80.0, 200.0]), np.array([0.3, -0.1, 0.8])),
            ObservationSeries(1, np.array([30.0, 150.0, 290.0]), np.array([-0.5, 0.2, 0.1])),
        ],
        event=EventRecord(EventKind.INTERVAL_CENSORED, 400.0, 520.0),
        end_time=520.0,
        covariates=pd.DataFrame({"time_min": [0.0], "name": ["x0"], "value": [0.7]}),
    )


@pytest.fixture
def tiny_config():
    """Provide a training configuration small enough for finite-difference checks.

    Returns
    -------
    TrainConfig
        One shared latent, four inducing points, 50 frozen draws.
    """
    return TrainConfig(
        m_inducing=4,
        r_shared=1,
        n_mc=50,
        gh_nodes=10,
        local_max_iters=100,
        max_global_iters=5,
        minibatch=1,
        seed=3,
    )


@pytest.fixture
def tiny_global(tiny_record, tiny_config):
    """Provide global parameters with nonzero hazard coefficients for the tiny individual.

    Returns
    -------
    GlobalParams
        Links initialized as in training, hazard coefficients perturbed.
    """
    gp = init_global([tiny_record], n_signals=2, r_shared=tiny_config.r_shared, n_covariates=1)
    gp.hazard.alpha = np.array([0.6, -0.3])
    gp.hazard.gamma = np.array([0.2])
    gp.hazard.a = 2e-4
    gp.hazard.c = 0.02
    return gp


@pytest.fixture
def tiny_local(tiny_record, tiny_global, tiny_config):
    """Provide a local state with random variational parameters.

    Returns
    -------
    LocalState
        Means and Cholesky factors drawn from a fixed seed.
    """
    rng = np.random.default_rng(11)
    local = init_local(tiny_record, tiny_global, tiny_config, rng=rng)
    m = tiny_config.m_inducing
    for block in local.blocks:
        block.m = rng.normal(scale=0.5, size=m)
        block.s_chol = np.tril(rng.normal(scale=0.1, size=(m, m)), -1) + np.diag(rng.uniform(0.2, 0.6, size=m))
    local.weights.kappa = np.array([0.9, 1.2])
    return local


def make_block(z, rng, m_scale=0.5):
    """Random inducing block on times ``z``."""
    m = z.size
    s_chol = np.tril(rng.normal(scale=0.1, size=(m, m)), -1) + np.diag(rng.uniform(0.2, 0.6, size=m))
    return InducingBlock(np.asarray(z, dtype=float), rng.normal(scale=m_scale, size=m), s_chol)


def make_local(blocks, w, kappa, noise, horizon, lengthscales):
    """Assemble a LocalState from its parts, with one horizon for every latent function."""
    weights = LMCWeights(np.asarray(w), np.asarray(kappa), np.asarray(noise))
    return LocalState(blocks, weights, [float(horizon)] * len(blocks), list(lengthscales))


def make_global(hazard, links):
    return GlobalParams(hazard, [LengthScaleLink(b, b0) for b, b0 in links])
