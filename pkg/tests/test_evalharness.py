"""Tests for evaluation harness module."""
import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy.stats import rankdata

from src.datasets import IndividualRecord
from src.evalharness import (
    PredictionInstance,
    bootstrap_auc,
    compute_metrics,
    decide_instances,
    label_instance,
    max_tpr_at_ppv,
    ppv_frontier,
    roc_frontier,
    schedule_predictions,
    sweep,
)
from src.inference import TrainConfig, fit_global, predict_population
from src.longitudinal import ObservationSeries
from src.policy import CostSpec, Decision, EventProbDist, Verdict, quantile
from src.settings import RUN_DEFAULTS, l2_grid
from src.simdata import SimSpec, simulate_population
from src.survival import EventKind, EventRecord, HazardParams, HistoryFeatureDist, event_prob_distribution


def _record(event, end_time, event_free=False):
    return IndividualRecord("p1", [], event, end_time, event_free=event_free)


def _decided(label, verdict):
    return PredictionInstance("p", 0.0, label, Decision(verdict, 0.5, 0.5, 0.3, 0.7))


def _random_instances(n, seed, scale_zero=False):
    rng = np.random.default_rng(seed)
    instances = []
    for i in range(n):
        scale = 0.0 if scale_zero else float(rng.uniform(0.05, 1.5))
        dist = EventProbDist(float(rng.uniform(-9.0, -4.0)), scale, -720.0)
        label = None if i % 7 == 0 else bool(rng.random() < 0.3)
        instances.append(PredictionInstance(f"p{i // 5}", float(i), label, dist=dist))
    return instances


class TestLabelInstance:
    """Tests for label_instance function."""

    def test_event_free_is_negative(self):
        """Test that event-free individuals are always labelled negative.

        # GIVEN / WHEN / THEN
        An event-free stay should give False at any time.
        """
        record = _record(EventRecord(EventKind.RIGHT_CENSORED, 3000.0), 3000.0, event_free=True)
        assert label_instance(record, 2800.0) is False
        assert label_instance(record, 0.0) is False

    @pytest.mark.parametrize(
        "t, expected",
        [(400.0, True), (0.0, True), (500.0, None), (600.0, None)],
    )
    def test_observed_event(self, t, expected):
        """Test labels of an event observed at minute 500.

        # GIVEN
        An observed event at 500.

        # WHEN
        Labelling at time t with a 720 minute horizon.

        # THEN
        Earlier times are positive and times at or after the event have no label.
        """
        record = _record(EventRecord(EventKind.OBSERVED, 500.0), 500.0)
        assert label_instance(record, t) is expected

    def test_observed_event_beyond_horizon(self):
        """Test that an event far after the horizon gives a negative label.

        # GIVEN / WHEN / THEN
        An event at 2000 labelled at 100 should be False.
        """
        record = _record(EventRecord(EventKind.OBSERVED, 2000.0), 2000.0)
        assert label_instance(record, 100.0) is False

    @pytest.mark.parametrize(
        "t_left, t_right, expected",
        [(400.0, 520.0, True), (1000.0, 1200.0, False), (700.0, 900.0, None)],
    )
    def test_interval_censored(self, t_left, t_right, expected):
        """Test labels under interval censoring.

        # GIVEN
        An event known to lie in [t_left, t_right].

        # WHEN
        Labelling at 100, so the horizon ends at 820.

        # THEN
        Intervals inside the horizon are positive, intervals after it
        negative and straddling intervals have no label.
        """
        record = _record(EventRecord(EventKind.INTERVAL_CENSORED, t_left, t_right), t_right)
        assert label_instance(record, 100.0) is expected

    def test_right_censored(self):
        """Test labels under intervention censoring.

        # GIVEN
        Censoring at 2000.

        # WHEN
        Labelling at 100 and at 1500.

        # THEN
        The first horizon ends before censoring and is negative; the second
        has no label.
        """
        record = _record(EventRecord(EventKind.RIGHT_CENSORED, 2000.0), 2000.0)
        assert label_instance(record, 100.0) is False
        assert label_instance(record, 1500.0) is None


class TestSchedulePredictions:
    """Tests for schedule_predictions function."""

    def test_event_anchored_schedule(self):
        """Test the schedule before an observed event.

        # GIVEN
        An event at minute 4000.

        # WHEN
        Scheduling predictions.

        # THEN
        Five instances ending at 3985 and spaced 720 apart; only the last
        horizon reaches the event.
        """
        # GIVEN
        record = _record(EventRecord(EventKind.OBSERVED, 4000.0), 4000.0)

        # WHEN
        instances = schedule_predictions(record)

        # THEN
        assert [inst.t for inst in instances] == pytest.approx([1105.0, 1825.0, 2545.0, 3265.0, 3985.0])
        assert [inst.label for inst in instances] == [False, False, False, False, True]
        assert all(inst.individual_id == "p1" for inst in instances)

    def test_event_free_stay(self):
        """Test the schedule of an event-free stay.

        # GIVEN
        An event-free stay of 10000 minutes.

        # WHEN
        Scheduling predictions.

        # THEN
        The last instance is at 9985 and every label is negative.
        """
        record = _record(EventRecord(EventKind.RIGHT_CENSORED, 10000.0), 10000.0, event_free=True)
        instances = schedule_predictions(record)
        assert instances[-1].t == pytest.approx(9985.0)
        assert len(instances) == 5
        assert all(inst.label is False for inst in instances)

    def test_short_stay(self):
        """Test that times before admission are dropped.

        # GIVEN / WHEN / THEN
        An event at 1000 should leave the instances at 265 and 985.
        """
        record = _record(EventRecord(EventKind.OBSERVED, 1000.0), 1000.0)
        assert [inst.t for inst in schedule_predictions(record)] == pytest.approx([265.0, 985.0])


class TestComputeMetrics:
    """Tests for compute_metrics function."""

    def test_hand_counted_table(self):
        """Test metrics of a hand-counted set of decisions.

        # GIVEN
        One TP, one FN, one abstained positive, one FP, two TN and one
        unlabelled instance.

        # WHEN
        Computing metrics.

        # THEN
        TPR = FPR = 1/3, PPV = 1/2, decided 5/6 and one exclusion.
        """
        # GIVEN
        instances = [
            _decided(True, Verdict.POSITIVE),
            _decided(True, Verdict.NEGATIVE),
            _decided(True, Verdict.ABSTAIN),
            _decided(False, Verdict.POSITIVE),
            _decided(False, Verdict.NEGATIVE),
            _decided(False, Verdict.NEGATIVE),
            PredictionInstance("p", 0.0, None),
        ]

        # WHEN
        row = compute_metrics(instances)

        # THEN
        assert row.tpr == pytest.approx(1 / 3)
        assert row.fpr == pytest.approx(1 / 3)
        assert row.ppv == pytest.approx(0.5)
        assert row.decision_rate == pytest.approx(5 / 6)
        assert (row.tp, row.fp, row.tn, row.fn, row.n_abstain, row.n_excluded) == (1, 1, 2, 1, 1, 1)
        assert row.positives == 3

    def test_all_positive(self):
        """Test metrics when every instance is called positive.

        # GIVEN
        Half of the labels positive and every verdict positive.

        # WHEN
        Computing metrics.

        # THEN
        TPR = FPR = 1, PPV = 0.5 and every instance decided.
        """
        instances = [_decided(i % 2 == 0, Verdict.POSITIVE) for i in range(10)]
        row = compute_metrics(instances)
        assert (row.tpr, row.fpr, row.ppv, row.decision_rate) == pytest.approx((1.0, 1.0, 0.5, 1.0))

    def test_all_abstain(self):
        """Test metrics when every instance is abstained on.

        # GIVEN
        Mixed labels and only abstentions.

        # WHEN
        Computing metrics.

        # THEN
        TPR = FPR = 0, no decisions and PPV undefined.
        """
        instances = [_decided(i % 3 == 0, Verdict.ABSTAIN) for i in range(9)]
        row = compute_metrics(instances)
        assert row.tpr == 0.0
        assert row.fpr == 0.0
        assert row.decision_rate == 0.0
        assert row.ppv is None

    def test_empty_and_undecided_raise(self):
        """Test the error cases.

        # GIVEN / WHEN / THEN
        No instances, or a labelled instance without decision, raise ValueError.
        """
        with pytest.raises(ValueError):
            compute_metrics([])
        with pytest.raises(ValueError):
            compute_metrics([PredictionInstance("p", 0.0, True)])


class TestSweep:
    """Tests for sweep function."""

    def test_matches_single_decisions(self):
        """Test that the vectorized sweep agrees with deciding one instance at a time.

        # GIVEN
        60 random distributions, a sixth of them unlabelled.

        # WHEN
        Sweeping a small cost grid in robust mode.

        # THEN
        Every row should equal compute_metrics over decide_instances.
        """
        # GIVEN
        instances = _random_instances(60, seed=11)
        l1_grid, l2_grid, q_grid = [0.5, 2.0], [0.05, 0.3, 0.9], [0.6, 0.9]

        # WHEN
        table = sweep(instances, l1_grid, l2_grid, q_grid)

        # THEN
        assert len(table) == 12
        for _, row in table.iterrows():
            costs = CostSpec(row["L1"], row["L2"], row["q"])
            expected = compute_metrics(decide_instances(instances, costs))
            assert (row["tp"], row["fp"], row["tn"], row["fn"], row["n_abstain"]) == (
                expected.tp, expected.fp, expected.tn, expected.fn, expected.n_abstain
            )
            assert row["n_excluded"] == expected.n_excluded
            assert row["mode"] == "robust"

    def test_point_mode_never_abstains_at_high_cost(self):
        """Test that the point rule decides every instance when abstention is expensive.

        # GIVEN
        l2 >= l1 / (1 + l1) for every pair of the grid.

        # WHEN
        Sweeping in point mode.

        # THEN
        No instance should be abstained on.
        """
        instances = _random_instances(40, seed=12)
        table = sweep(instances, [0.5, 1.0], [0.6, 0.8], [0.75], mode="point")
        assert (table["n_abstain"] == 0).all()
        assert (table["decision_rate"] == 1.0).all()

    def test_no_uncertainty_gives_point_rows(self):
        """Test that robust and point sweeps agree when every scale is zero.

        # GIVEN
        Distributions with zero scale.

        # WHEN
        Sweeping both modes.

        # THEN
        The metric columns should be identical.
        """
        # GIVEN
        instances = _random_instances(40, seed=13, scale_zero=True)
        grids = ([0.25, 1.0, 4.0], [0.02, 0.2, 0.5], [0.75, 0.95])

        # WHEN
        robust = sweep(instances, *grids, mode="robust")
        point = sweep(instances, *grids, mode="point")

        # THEN
        columns = ["L1", "L2", "q", "tp", "fp", "tn", "fn", "n_abstain"]
        pd.testing.assert_frame_equal(robust[columns], point[columns])

    def test_invalid_arguments(self):
        """Test argument checks.

        # GIVEN / WHEN / THEN
        Empty grids, an unknown mode or a missing distribution raise ValueError.
        """
        instances = _random_instances(5, seed=14)
        with pytest.raises(ValueError):
            sweep(instances, [], [0.1], [0.75])
        with pytest.raises(ValueError):
            sweep(instances, [1.0], [0.1], [0.75], mode="bayes")
        with pytest.raises(ValueError):
            sweep([PredictionInstance("p", 0.0, True)], [1.0], [0.1], [0.75])


class TestQuantileRanking:
    """Tests for the ordering of instances by their event probability quantiles."""

    @pytest.mark.parametrize("q", [0.55, 0.75, 0.95])
    def test_horizon_does_not_change_ranking(self, q):
        """Test that the horizon leaves the ranking by h^(q) unchanged.

        # GIVEN
        100 instances at one landmark with random covariates and history
        feature distributions.

        # WHEN
        Ranking them by h^(q) for horizons of 6, 12 and 24 hours.

        # THEN
        The three rankings should be identical.
        """
        # GIVEN
        rng = np.random.default_rng(21)
        hazard = HazardParams(a=2e-4, b=-10.0, gamma=np.array([0.4]), alpha=np.array([1.0, -1.0]), c=0.002)
        cases = [
            (rng.normal(size=1), HistoryFeatureDist(float(rng.normal(scale=0.5)), float(rng.uniform(0.01, 0.5))))
            for _ in range(100)
        ]

        # WHEN
        ranks = [
            rankdata([quantile(event_prob_distribution(hazard, x, fd, delta), q) for x, fd in cases])
            for delta in (360.0, 720.0, 1440.0)
        ]

        # THEN
        np.testing.assert_array_equal(ranks[0], ranks[1])
        np.testing.assert_array_equal(ranks[0], ranks[2])


class TestFrontiers:
    """Tests for roc_frontier, ppv_frontier and max_tpr_at_ppv functions."""

    @pytest.fixture
    def metrics(self):
        return pd.DataFrame({
            "mode": ["robust", "robust", "robust", "robust", "point"],
            "tpr": [0.5, 0.6, 0.7, None, 0.4],
            "fpr": [0.1, 0.1, 0.2, 0.3, 0.1],
            "ppv": [0.9, 0.8, 0.5, None, 0.7],
        })

    def test_roc_frontier(self, metrics):
        """Test the best TPR per FPR.

        # GIVEN
        Two robust rows sharing FPR 0.1 and a row with undefined TPR.

        # WHEN
        Building the ROC frontier.

        # THEN
        The best TPR per FPR remains and undefined rows are dropped.
        """
        frontier = roc_frontier(metrics)
        assert frontier["mode"].tolist() == ["point", "robust", "robust"]
        assert frontier["fpr"].tolist() == [0.1, 0.1, 0.2]
        assert frontier["tpr"].tolist() == [0.4, 0.6, 0.7]

    def test_ppv_frontier(self, metrics):
        """Test the best TPR per PPV.

        # GIVEN / WHEN / THEN
        Each defined robust PPV keeps its own TPR.
        """
        robust = ppv_frontier(metrics).query("mode == 'robust'")
        assert robust["ppv"].tolist() == [0.5, 0.8, 0.9]
        assert robust["tpr"].tolist() == [0.7, 0.6, 0.5]

    @pytest.mark.parametrize("min_ppv, expected", [(0.6, 0.6), (0.85, 0.5), (0.95, 0.0), (0.0, 0.7)])
    def test_max_tpr_at_ppv(self, metrics, min_ppv, expected):
        """Test the best TPR under a PPV floor.

        # GIVEN / WHEN / THEN
        The largest TPR among rows with PPV >= min_ppv, 0 if none.
        """
        assert max_tpr_at_ppv(metrics, min_ppv) == pytest.approx(expected)


class TestBootstrapAuc:
    """Tests for bootstrap_auc function."""

    def test_perfect_scores(self):
        """Test a perfectly separating score.

        # GIVEN
        Ten individuals with one positive and one negative instance each.

        # WHEN
        Bootstrapping the AUC.

        # THEN
        Every resample has AUC 1.
        """
        labels = np.tile([True, False], 10)
        scores = labels.astype(float)
        groups = np.repeat(np.arange(10), 2)
        mean, std = bootstrap_auc(scores, labels, groups, n_boot=20, rng=np.random.default_rng(0))
        assert mean == pytest.approx(1.0)
        assert std == pytest.approx(0.0)

    def test_single_class(self):
        """Test that resamples with a single class give no estimate.

        # GIVEN / WHEN / THEN
        Only negative labels should give (nan, nan).
        """
        mean, std = bootstrap_auc(np.linspace(0, 1, 6), np.zeros(6, dtype=bool), np.arange(6), rng=np.random.default_rng(1))
        assert np.isnan(mean) and np.isnan(std)

    def test_seeded(self):
        """Test that a seeded generator makes the estimate reproducible.

        # GIVEN / WHEN / THEN
        Two runs with the same seed give the same mean and spread.
        """
        rng = np.random.default_rng(2)
        labels = rng.random(80) < 0.4
        scores = labels + rng.normal(0.0, 1.0, 80)
        groups = np.repeat(np.arange(20), 4)
        first = bootstrap_auc(scores, labels, groups, rng=np.random.default_rng(3))
        second = bootstrap_auc(scores, labels, groups, rng=np.random.default_rng(3))
        assert first == second
        assert 0.5 < first[0] <= 1.0


def _sparsified(record, keep_every=4):
    series = [ObservationSeries(s.signal_id, s.times[::keep_every], s.values[::keep_every]) for s in record.series]
    return replace(record, series=series)


@pytest.mark.slow
@pytest.mark.filterwarnings("ignore::src.exceptions.ConvergenceWarning")
class TestRobustVersusPoint:
    """Robust and point decisions on held-out simulated populations."""

    def test_robust_gains_tpr_at_fixed_ppv(self):
        """Test that abstaining on uncertain predictions pays off at fixed PPV.

        # GIVEN
        A model trained on one simulated population, and five held-out
        populations of 200 in which every second individual keeps only a
        quarter of its observations.

        # WHEN
        Sweeping the cost grids with both rules.

        # THEN
        The robust rule's max TPR at PPV >= 0.5 should exceed the point
        rule's by at least 0.03 on average.
        """
        # GIVEN
        workers = min(4, os.cpu_count() or 1)
        settings = {
            **RUN_DEFAULTS,
            "max_global_iters": 300,
            "local_max_iters": 100,
            "n_mc": 200,
            "lr": 0.05,
            "minibatch": 4,
            "rel_tol": 1e-5,
            "threads": workers,
            "seed": 100,
        }
        train_records, _ = simulate_population(SimSpec.from_settings(settings))
        checkpoint = fit_global(train_records, TrainConfig.from_settings(settings)).checkpoint
        delta = settings["horizon"]

        # WHEN
        gains = []
        for seed in range(5):
            spec = SimSpec.from_settings({**settings, "seed": seed, "sim_n_individuals": 200})
            records, _ = simulate_population(spec)
            records = [_sparsified(r) if i % 2 else r for i, r in enumerate(records)]
            instances = [inst for r in records for inst in schedule_predictions(r, delta=delta)]
            schedule = {}
            for inst in instances:
                schedule.setdefault(inst.individual_id, []).append(inst.t)
            rows = predict_population(checkpoint, records, schedule, delta, threads=workers)
            dists = {(iid, t): dist for iid, t, dist in rows}
            scored = [
                replace(inst, dist=dists[(inst.individual_id, inst.t)])
                for inst in instances
                if (inst.individual_id, inst.t) in dists
            ]
            best = {
                mode: max_tpr_at_ppv(
                    sweep(scored, settings["l1_grid"], l2_grid(settings), settings["q_grid"], mode=mode), 0.5
                )
                for mode in ("robust", "point")
            }
            gains.append(best["robust"] - best["point"])

        # THEN
        assert np.mean(gains) >= 0.03
