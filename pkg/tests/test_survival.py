"""Tests for hazard, event probability and censored likelihood module."""
import numpy as np
import pytest
from numpy.polynomial.hermite import hermgauss
from scipy.integrate import quad

from src.kernels import HistoryWeight, gram, integrated_variance, jittered_cholesky, rho
from src.longitudinal import InducingBlock, predict_latent
from src.policy import quantile
from src.survival import (
    EventKind,
    EventRecord,
    HazardParams,
    HistoryFeatureDist,
    censored_loglik,
    cumulative_hazard,
    event_prob_distribution,
    event_probability,
    expected_t2e_loglik,
    expm1_ratio,
    fbar_distribution,
    hazard_at,
    log1mexp,
    survival_curve,
)
from tests.conftest import make_block, make_local


X = np.array([0.7])


def _gh_expectation(fn, mu, var, n_nodes=40):
    nodes, weights = hermgauss(n_nodes)
    values = [fn(mu + np.sqrt(2.0 * var) * node) for node in nodes]
    return float(np.dot(weights, values) / np.sqrt(np.pi))


class TestEventRecord:
    """Tests for EventRecord class."""

    def test_interval_needs_ordered_bounds(self):
        """Test that an empty interval raises.

        # GIVEN / WHEN / THEN
        t_left = t_right should raise ValueError.
        """
        with pytest.raises(ValueError):
            EventRecord(EventKind.INTERVAL_CENSORED, 100.0, 100.0)

    def test_negative_time_rejected(self):
        """Test that a negative event time raises.

        # GIVEN / WHEN / THEN
        t_left = -1 should raise ValueError.
        """
        with pytest.raises(ValueError):
            EventRecord(EventKind.OBSERVED, -1.0)

    def test_kind_from_string(self):
        """Test construction from the file representation of the kind.

        # GIVEN / WHEN
        kind = "right".

        # THEN
        The kind should be RIGHT_CENSORED and there should be no event time.
        """
        record = EventRecord("right", 50.0)
        assert record.kind is EventKind.RIGHT_CENSORED
        assert record.t_event is None


class TestHazard:
    """Tests for hazard_at and cumulative_hazard functions."""

    def test_constant_hazard(self):
        """Test the exponential special case.

        # GIVEN
        a = 0, no covariates and a zero history feature.

        # WHEN
        Evaluating the hazard at several times.

        # THEN
        It should be exp(b) everywhere.
        """
        # GIVEN
        params = HazardParams(0.0, -5.0, np.zeros(0), np.zeros(2), 0.01)

        # WHEN
        values = [hazard_at(params, [], 0.0, s, 100.0) for s in (100.0, 500.0, 5000.0)]

        # THEN
        np.testing.assert_allclose(values, np.exp(-5.0), rtol=1e-14)

    def test_at_landmark_independent_of_slope(self, hazard_params):
        """Test that the slope does not act at s = t.

        # GIVEN
        Two slopes.

        # WHEN
        Evaluating the hazard at the landmark.

        # THEN
        Both should equal exp(b + gamma x + fbar).
        """
        # GIVEN
        other = HazardParams(-3e-3, hazard_params.b, hazard_params.gamma, hazard_params.alpha, hazard_params.c)

        # WHEN
        first = hazard_at(hazard_params, X, 0.3, 200.0, 200.0)
        second = hazard_at(other, X, 0.3, 200.0, 200.0)

        # THEN
        expected = np.exp(-6.0 + 0.5 * 0.7 + 0.3)
        assert first == pytest.approx(expected, rel=1e-14)
        assert second == pytest.approx(expected, rel=1e-14)

    def test_before_landmark_rejected(self, hazard_params):
        """Test that s < t raises.

        # GIVEN / WHEN / THEN
        s = 99, t = 100 should raise ValueError.
        """
        with pytest.raises(ValueError):
            hazard_at(hazard_params, X, 0.0, 99.0, 100.0)

    @pytest.mark.parametrize("a", [-2e-4, 0.0, 1e-12, 3e-4])
    def test_cumulative_matches_quadrature(self, hazard_params, a):
        """Test the integrated hazard against quadrature.

        # GIVEN
        Slopes of both signs, zero and tiny.

        # WHEN
        Integrating the hazard from t = 100 to 900.

        # THEN
        The closed form should agree to 1e-10 relative.
        """
        # GIVEN
        params = HazardParams(a, hazard_params.b, hazard_params.gamma, hazard_params.alpha, hazard_params.c)

        # WHEN
        closed = cumulative_hazard(params, X, -0.2, 900.0, 100.0)

        # THEN
        expected = quad(lambda s: hazard_at(params, X, -0.2, s, 100.0), 100.0, 900.0, epsabs=0, epsrel=1e-13)[0]
        assert closed == pytest.approx(expected, rel=1e-10)

    def test_hazard_is_instantaneous_event_rate(self, hazard_params):
        """Test the hazard against a finite-difference survival ratio.

        # GIVEN
        The survival function exp(-Lambda).

        # WHEN
        Taking (S(s) - S(s + h)) / (h S(s)) with h = 1e-4.

        # THEN
        It should match the hazard within 1e-3 relative.
        """
        # GIVEN
        t, s, h = 50.0, 400.0, 1e-4
        survival = lambda u: np.exp(-cumulative_hazard(hazard_params, X, 0.1, u, t))

        # WHEN
        rate = (survival(s) - survival(s + h)) / (h * survival(s))

        # THEN
        assert rate == pytest.approx(hazard_at(hazard_params, X, 0.1, s, t), rel=1e-3)


class TestEventProbability:
    """Tests for event_probability and survival_curve functions."""

    def test_zero_horizon(self, hazard_params):
        """Test that nothing happens within zero minutes.

        # GIVEN / WHEN / THEN
        delta = 0 should give probability 0.
        """
        assert event_probability(hazard_params, X, 0.4, 300.0, 0.0) == 0.0

    def test_constant_hazard_example(self):
        """Test the exponential case with rate 0.01 over 100 minutes.

        # GIVEN
        a = 0 and hazard 0.01 per minute.

        # WHEN
        Computing the probability within 100 minutes.

        # THEN
        It should be 1 - exp(-1).
        """
        # GIVEN
        params = HazardParams(0.0, np.log(0.01), np.zeros(0), np.zeros(1), 0.01)

        # WHEN
        result = event_probability(params, [], 0.0, 0.0, 100.0)

        # THEN
        assert result == pytest.approx(1.0 - np.exp(-1.0), abs=1e-12)

    def test_matches_integrated_hazard(self, hazard_params):
        """Test against quadrature of the hazard.

        # GIVEN
        A positive slope.

        # WHEN
        Computing the probability within 720 minutes.

        # THEN
        It should equal 1 - exp(-int hazard).
        """
        # GIVEN
        t, delta = 1000.0, 720.0

        # WHEN
        result = event_probability(hazard_params, X, 0.5, t, delta)

        # THEN
        area = quad(lambda s: hazard_at(hazard_params, X, 0.5, s, t), t, t + delta, epsrel=1e-13)[0]
        assert result == pytest.approx(1.0 - np.exp(-area), rel=1e-10)

    def test_negative_horizon_rejected(self, hazard_params):
        """Test that a negative horizon raises.

        # GIVEN / WHEN / THEN
        delta = -1 should raise ValueError.
        """
        with pytest.raises(ValueError):
            event_probability(hazard_params, X, 0.0, 0.0, -1.0)

    def test_survival_curve_decreases_to_zero(self, hazard_params):
        """Test the shape of the survival curve.

        # GIVEN
        A nonnegative slope.

        # WHEN
        Evaluating the survival curve on a growing horizon grid.

        # THEN
        It should start at 1, never increase and end near 0.
        """
        # GIVEN
        deltas = np.concatenate([[0.0], np.geomspace(1.0, 1e6, 60)])

        # WHEN
        curve = survival_curve(hazard_params, X, 0.0, 10.0, deltas)

        # THEN
        assert curve[0] == 1.0
        assert np.all(np.diff(curve) <= 0)
        assert curve[-1] < 1e-6


class TestCensoredLoglik:
    """Tests for censored_loglik function."""

    def test_observed_matches_density(self, hazard_params):
        """Test the observed-event likelihood against the hazard times survival.

        # GIVEN
        An event at 800 and landmark 200.

        # WHEN
        Evaluating the log-likelihood.

        # THEN
        It should equal log hazard(800) minus the integrated hazard.
        """
        # GIVEN
        record = EventRecord(EventKind.OBSERVED, 800.0)

        # WHEN
        result = censored_loglik(hazard_params, X, 0.2, record, 200.0)

        # THEN
        area = quad(lambda s: hazard_at(hazard_params, X, 0.2, s, 200.0), 200.0, 800.0, epsrel=1e-13)[0]
        expected = np.log(hazard_at(hazard_params, X, 0.2, 800.0, 200.0)) - area
        assert result == pytest.approx(expected, abs=1e-10)

    def test_right_censored_is_log_survival(self, hazard_params):
        """Test the right-censored likelihood.

        # GIVEN
        Censoring at 1500 and landmark 0.

        # WHEN
        Evaluating the log-likelihood.

        # THEN
        It should be minus the integrated hazard.
        """
        record = EventRecord(EventKind.RIGHT_CENSORED, 1500.0)
        result = censored_loglik(hazard_params, X, -0.1, record, 0.0)
        assert result == pytest.approx(-cumulative_hazard(hazard_params, X, -0.1, 1500.0, 0.0), rel=1e-14)

    @pytest.mark.parametrize("t_right", [460.0, 400.0 + 1e-6, 3000.0])
    def test_interval_matches_density_integral(self, hazard_params, t_right):
        """Test the interval-censored likelihood against the event-time density.

        # GIVEN
        Intervals starting at 400, including a near-empty one.

        # WHEN
        Evaluating the log-likelihood.

        # THEN
        It should equal log of the density integrated over the interval.
        """
        # GIVEN
        t = 100.0
        record = EventRecord(EventKind.INTERVAL_CENSORED, 400.0, t_right)
        density = lambda s: hazard_at(hazard_params, X, 0.0, s, t) * np.exp(
            -cumulative_hazard(hazard_params, X, 0.0, s, t)
        )

        # WHEN
        result = censored_loglik(hazard_params, X, 0.0, record, t)

        # THEN
        mass = quad(density, 400.0, t_right, epsabs=0, epsrel=1e-12)[0]
        assert np.isfinite(result)
        assert result == pytest.approx(np.log(mass), abs=1e-6)

    def test_record_before_landmark_rejected(self, hazard_params):
        """Test that a record preceding the landmark raises.

        # GIVEN / WHEN / THEN
        Event at 50 with landmark 100 should raise ValueError.
        """
        with pytest.raises(ValueError):
            censored_loglik(hazard_params, X, 0.0, EventRecord(EventKind.OBSERVED, 50.0), 100.0)


class TestLog1mexp:
    """Tests for log1mexp and expm1_ratio functions."""

    @pytest.mark.parametrize("x", [1e-20, 1e-5, 0.3, 0.7, 5.0, 50.0])
    def test_stable_values(self, x):
        """Test against a high-precision reference.

        # GIVEN
        Arguments from tiny to large.

        # WHEN
        Evaluating log(1 - exp(-x)).

        # THEN
        The result should be finite and accurate.
        """
        expected = np.log(-np.expm1(-x)) if x < 1 else np.log1p(-np.exp(-x))
        assert log1mexp(x) == pytest.approx(expected, rel=1e-12)

    def test_expm1_ratio_continuous_at_switch(self):
        """Test the series limit on both sides of the slope threshold.

        # GIVEN
        Slopes just below and above 1e-10.

        # WHEN
        Evaluating the ratio for delta = 720.

        # THEN
        Both should be within 1e-9 relative of 720.
        """
        assert expm1_ratio(0.9e-10, 720.0) == pytest.approx(720.0, rel=1e-9)
        assert expm1_ratio(1.1e-10, 720.0) == pytest.approx(720.0, rel=1e-9)


class TestExpectedT2ELoglik:
    """Tests for expected_t2e_loglik function."""

    @pytest.mark.parametrize(
        "record",
        [
            EventRecord(EventKind.OBSERVED, 900.0),
            EventRecord(EventKind.RIGHT_CENSORED, 900.0),
            EventRecord(EventKind.INTERVAL_CENSORED, 900.0, 1300.0),
        ],
    )
    def test_zero_variance_is_plugin(self, hazard_params, record):
        """Test the degenerate history feature for all kinds of records.

        # GIVEN
        var = 0.

        # WHEN
        Computing the expected log-likelihood.

        # THEN
        It should equal the log-likelihood at fbar = mu.
        """
        # GIVEN
        fd = HistoryFeatureDist(0.35, 0.0)
        noise = np.random.default_rng(0).standard_normal(30)

        # WHEN
        result = expected_t2e_loglik(hazard_params, X, fd, record, 300.0, noise)

        # THEN
        assert result == pytest.approx(censored_loglik(hazard_params, X, 0.35, record, 300.0), abs=1e-12)

    @pytest.mark.parametrize("kind", [EventKind.OBSERVED, EventKind.RIGHT_CENSORED])
    def test_closed_form_expectation(self, hazard_params, kind):
        """Test the lognormal identity against Gauss-Hermite quadrature.

        # GIVEN
        fbar ~ N(0.2, 0.6).

        # WHEN
        Computing the expected log-likelihood.

        # THEN
        It should match the quadrature of the plug-in log-likelihood to 1e-8.
        """
        # GIVEN
        record = EventRecord(kind, 1200.0)
        fd = HistoryFeatureDist(0.2, 0.6)

        # WHEN
        result = expected_t2e_loglik(hazard_params, X, fd, record, 100.0, np.zeros(1))

        # THEN
        expected = _gh_expectation(lambda f: censored_loglik(hazard_params, X, f, record, 100.0), 0.2, 0.6)
        assert result == pytest.approx(expected, abs=1e-8)

    def test_interval_monte_carlo(self, hazard_params):
        """Test the reparameterized interval term against quadrature.

        # GIVEN
        fbar ~ N(-0.3, 0.5) and 20000 frozen draws.

        # WHEN
        Computing the expected log-likelihood of an interval record.

        # THEN
        It should match quadrature within 4 Monte Carlo standard errors.
        """
        # GIVEN
        record = EventRecord(EventKind.INTERVAL_CENSORED, 600.0, 700.0)
        fd = HistoryFeatureDist(-0.3, 0.5)
        noise = np.random.default_rng(12).standard_normal(20_000)

        # WHEN
        result = expected_t2e_loglik(hazard_params, X, fd, record, 200.0, noise)

        # THEN
        samples = censored_loglik(hazard_params, X, -0.3 + np.sqrt(0.5) * noise, record, 200.0)
        standard_error = np.std(samples) / np.sqrt(noise.size)
        expected = _gh_expectation(lambda f: censored_loglik(hazard_params, X, f, record, 200.0), -0.3, 0.5)
        assert abs(result - expected) < 4 * standard_error


class TestFbarDistribution:
    """Tests for fbar_distribution and event_prob_distribution functions."""

    def test_zero_coefficients(self, tiny_local, hazard_params):
        """Test that zero history coefficients give a point mass at zero.

        # GIVEN
        alpha = 0.

        # WHEN
        Computing the feature distribution.

        # THEN
        Mean and variance should be 0.
        """
        # GIVEN
        hazard_params.alpha = np.zeros(2)

        # WHEN
        fd = fbar_distribution(tiny_local, hazard_params, 300.0)

        # THEN
        assert fd.mu == 0.0
        assert fd.var == 0.0

    def test_prior_gives_integrated_variance(self, hazard_params):
        """Test the prior variational distribution on one shared latent.

        # GIVEN
        m = 0, S = K_ZZ, shared weight 0.7 and no signal-specific weight.

        # WHEN
        Computing the feature distribution.

        # THEN
        The mean should be 0 and the variance (0.7 alpha)^2 times the
        integrated prior variance.
        """
        # GIVEN
        z = np.linspace(0.0, 600.0, 6)
        l_shared, l_specific = 150.0, 90.0
        blocks = [
            InducingBlock(z, np.zeros(6), jittered_cholesky(gram(z, z, l_shared))),
            InducingBlock(z, np.zeros(6), jittered_cholesky(gram(z, z, l_specific))),
        ]
        local = make_local(blocks, [[0.7]], [0.0], [1.0], 600.0, [l_shared, l_specific])
        hazard_params.alpha = np.array([1.3])

        # WHEN
        fd = fbar_distribution(local, hazard_params, 500.0)

        # THEN
        expected = (0.7 * 1.3) ** 2 * integrated_variance(HistoryWeight(hazard_params.c, 500.0), l_shared)
        assert fd.mu == pytest.approx(0.0, abs=1e-12)
        assert fd.var == pytest.approx(expected, rel=1e-6)

    def test_matches_discretized_posterior(self, hazard_params):
        """Test the closed-form moments against a fine-grid discretization.

        # GIVEN
        A random two-signal local state.

        # WHEN
        Computing the feature distribution, and separately integrating the
        signal posteriors against rho with the trapezoid rule.

        # THEN
        Means and variances should agree to 1e-3.
        """
        # GIVEN
        rng = np.random.default_rng(21)
        z = np.linspace(0.0, 400.0, 6)
        blocks = [make_block(z, rng) for _ in range(3)]
        lengthscales = [120.0, 60.0, 200.0]
        local = make_local(blocks, [[0.8], [-0.5]], [1.1, 0.6], [1.0, 1.0], 400.0, lengthscales)
        t = 350.0
        grid = np.linspace(0.0, t, 1401)
        quad_weights = rho(HistoryWeight(hazard_params.c, t), grid) * np.gradient(grid)
        quad_weights[0] *= 0.5
        quad_weights[-1] *= 0.5

        # WHEN
        fd = fbar_distribution(local, hazard_params, t)

        # THEN
        coefs = [hazard_params.alpha @ local.weights.w[:, 0]] + list(hazard_params.alpha * local.weights.kappa)
        mean, var = 0.0, 0.0
        for block, l, coef in zip(blocks, lengthscales, coefs):
            post = predict_latent(block, l, grid)
            mean += coef * quad_weights @ post.mean
            var += coef**2 * quad_weights @ post.cov @ quad_weights
        assert fd.mu == pytest.approx(mean, abs=1e-3)
        assert fd.var == pytest.approx(var, abs=1e-3)

    def test_event_prob_median(self, hazard_params):
        """Test that the median of the event probability is the plug-in value at mu.

        # GIVEN
        A Gaussian history feature.

        # WHEN
        Building the event probability distribution for a 720-minute horizon.

        # THEN
        Its median should equal event_probability at fbar = mu.
        """
        # GIVEN
        fd = HistoryFeatureDist(0.4, 0.25)

        # WHEN
        dist = event_prob_distribution(hazard_params, X, fd, 720.0)

        # THEN
        assert dist.scale == pytest.approx(0.5)
        assert quantile(dist, 0.5) == pytest.approx(event_probability(hazard_params, X, 0.4, 0.0, 720.0), rel=1e-12)
