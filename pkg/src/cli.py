"""Command-line pipeline: simulate, train, predict, decide, evaluate, sweep, settings.

Run as ``python -m src.cli <command> ...``. Exit status is 0 on success,
2 on invalid input and 3 on numerical failure.
"""
import argparse
import logging
import os
import sys

import pandas as pd

from src.datasets import (
    load_population,
    read_decisions,
    read_dists,
    read_labels,
    read_times,
    write_decisions,
    write_dists,
    write_labels,
    write_metrics,
)
from src.evalharness import (
    PredictionInstance,
    bootstrap_auc,
    compute_metrics,
    label_instance,
    max_tpr_at_ppv,
    metrics_frame,
    ppv_frontier,
    roc_frontier,
    schedule_predictions,
    sweep,
)
from src.exceptions import IllConditionedKernelError, NumericalError, ValidationError
from src.formatting import format_metric_row, format_minutes, parse_minutes
from src.inference import (
    TrainConfig,
    fit_global,
    load_checkpoint,
    predict_population,
    save_checkpoint,
)
from src.policy import CostSpec, decide, expected_event_probability
from src.settings import RUN_DEFAULTS, get_saved_settings, l2_grid, load_settings, save_settings, substream
from src.simdata import SimSpec, simulate_to_directory


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _settings(args, **overrides) -> dict:
    return load_settings(args.config, threads=args.threads, **overrides)


def _write_csv(frame: pd.DataFrame, path: str) -> None:
    frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")


def cmd_simulate(args) -> None:
    settings = _settings(args, seed=args.seed)
    spec = SimSpec.from_settings(settings)
    records = simulate_to_directory(spec, args.out)
    logger.info("wrote %d individuals to %s", len(records), args.out)


def cmd_train(args) -> None:
    settings = _settings(args, seed=args.seed)
    cfg = TrainConfig.from_settings(settings)
    population = load_population(args.data)
    result = fit_global(population, cfg)
    save_checkpoint(result.checkpoint, args.out)
    if args.history:
        _write_csv(result.history, args.history)
    logger.info(
        "saved checkpoint to %s after %d iterations (converged: %s)",
        args.out, result.n_iterations, result.converged,
    )


def _requested_instances(records, requested: dict, delta: float, path: str) -> list[PredictionInstance]:
    by_id = {r.individual_id: r for r in records}
    missing = sorted(set(requested) - set(by_id))
    if missing:
        raise ValidationError(f"{path}: individuals not in the dataset: {missing}")
    return [
        PredictionInstance(iid, t, label_instance(by_id[iid], t, delta))
        for iid, times in requested.items()
        for t in times
    ]


def cmd_predict(args) -> None:
    horizon = None
    if args.horizon:
        horizon = parse_minutes(args.horizon, default=float("nan"))
        if not horizon >= 0:
            raise ValidationError(f"invalid horizon {args.horizon!r}")
    settings = _settings(args, horizon=horizon)
    checkpoint = load_checkpoint(args.checkpoint)
    records = load_population(args.data, n_signals=checkpoint.global_params.n_signals)
    delta = float(settings["horizon"])
    if args.times:
        instances = _requested_instances(records, read_times(args.times), delta, args.times)
    else:
        instances = [inst for r in records for inst in schedule_predictions(r, delta=delta)]
    schedule = {}
    for inst in instances:
        schedule.setdefault(inst.individual_id, []).append(inst.t)
    rows = predict_population(checkpoint, records, schedule, delta, threads=settings["threads"])
    write_dists(rows, args.out)
    if args.labels:
        write_labels([(inst.individual_id, inst.t, inst.label) for inst in instances], args.labels)
    logger.info("wrote %d predictions for horizon %s to %s", len(rows), format_minutes(delta), args.out)


def cmd_decide(args) -> None:
    settings = _settings(args, l1=args.l1, l2=args.l2, q=args.q, mode=args.mode)
    costs = CostSpec(settings["l1"], settings["l2"], settings["q"])
    rows = [
        (iid, t, decide(dist, costs, settings["mode"], settings["point_estimate"]))
        for iid, t, dist in read_dists(args.dists)
    ]
    write_decisions(rows, args.out)
    logger.info("wrote %d %s decisions to %s", len(rows), settings["mode"], args.out)


def _join_labels(rows, labels: dict, path: str):
    joined = []
    for iid, t, payload in rows:
        if (iid, t) not in labels:
            raise ValidationError(f"{path}: no label for individual {iid!r} at {t}")
        joined.append((iid, t, labels[(iid, t)], payload))
    return joined


def cmd_evaluate(args) -> None:
    labels = read_labels(args.labels)
    instances = [
        PredictionInstance(iid, t, label, decision=decision)
        for iid, t, label, decision in _join_labels(read_decisions(args.decisions), labels, args.labels)
    ]
    if not instances:
        raise ValidationError(f"{args.decisions}: no decisions")
    row = compute_metrics(instances)
    row.mode = args.mode or ""
    write_metrics(metrics_frame([row]), args.out)
    logger.info("%s (%d excluded)", format_metric_row(row), row.n_excluded)


def cmd_sweep(args) -> None:
    settings = _settings(args)
    labels = read_labels(args.labels)
    instances = [
        PredictionInstance(iid, t, label, dist=dist)
        for iid, t, label, dist in _join_labels(read_dists(args.dists), labels, args.labels)
    ]
    modes = [args.mode] if args.mode else ["robust", "point"]
    metrics = pd.concat(
        [
            sweep(
                instances,
                settings["l1_grid"],
                l2_grid(settings),
                settings["q_grid"],
                mode=mode,
                point_estimate=settings["point_estimate"],
            )
            for mode in modes
        ],
        ignore_index=True,
    )
    os.makedirs(args.out, exist_ok=True)
    write_metrics(metrics, os.path.join(args.out, "metrics.csv"))
    _write_csv(roc_frontier(metrics), os.path.join(args.out, "roc_frontier.csv"))
    _write_csv(ppv_frontier(metrics), os.path.join(args.out, "ppv_frontier.csv"))
    for mode in modes:
        best = max_tpr_at_ppv(metrics[metrics["mode"] == mode], 0.5)
        logger.info("%s: max TPR at PPV >= 50%%: %.3f", mode, best)

    labelled = [inst for inst in instances if inst.label is not None]
    if labelled:
        auc_mean, auc_std = bootstrap_auc(
            [expected_event_probability(inst.dist) for inst in labelled],
            [inst.label for inst in labelled],
            [inst.individual_id for inst in labelled],
            n_boot=settings["bootstrap_size"],
            rng=substream(settings["seed"], "bootstrap"),
        )
        logger.info("bootstrap AUC %.3f +/- %.3f", auc_mean, auc_std)


def cmd_settings(args) -> None:
    if args.save:
        settings = _settings(args)
        changed = {k: v for k, v in settings.items() if v != RUN_DEFAULTS[k]}
        path = save_settings(changed, args.save)
        logger.info("saved %d non-default settings to %s", len(changed), path)
    logger.info("saved settings: %s", ", ".join(get_saved_settings()) or "none")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m src.cli",
        description="Joint longitudinal / time-to-event modelling with abstaining event decisions",
    )
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    parser.add_argument("--threads", type=int, default=None, help="cap on worker processes")
    saved = ", ".join(get_saved_settings()) or "none"
    parser.add_argument(
        "--config", type=str, default=None,
        help=f"saved settings name ({saved}), or a JSON or key=value file",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a synthetic population")
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit the joint model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--history", default=None, help="optional CSV of the global parameter trajectory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="event probability distributions at the landmarks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="dists.csv to write")
    p.add_argument("--labels", default=None, help="labels.csv to write")
    p.add_argument("--horizon", default=None, help="horizon, e.g. 720, 12h or 1d")
    p.add_argument(
        "--times", default=None,
        help="CSV individual_id,time_min of landmarks to predict at; the two-day protocol schedule when omitted",
    )
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("decide", help="decisions for one cost setting")
    p.add_argument("--dists", required=True)
    p.add_argument("--out", required=True, help="decisions.csv to write")
    p.add_argument("--l1", type=float, default=None)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--q", type=float, default=None)
    p.add_argument("--mode", choices=["robust", "point"], default=None)
    p.set_defaults(func=cmd_decide)

    p = sub.add_parser("evaluate", help="metrics of a decisions file")
    p.add_argument("--decisions", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="metrics.csv to write")
    p.add_argument("--mode", default=None, help="mode label for the metrics row")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="metrics over cost grids and their frontiers")
    p.add_argument("--dists", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="directory for metrics and frontier CSVs")
    p.add_argument("--mode", choices=["robust", "point"], default=None, help="both modes when omitted")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("settings", help="list saved settings, optionally saving the current ones")
    p.add_argument("--save", default=None, metavar="NAME", help="save the non-default settings of --config under NAME")
    p.set_defaults(func=cmd_settings)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        args.func(args)
    except ValueError as err:
        # ValidationError is a ValueError
        logger.error("%s", err)
        return EXIT_INVALID
    except (NumericalError, IllConditionedKernelError) as err:
        logger.error("numerical failure: %s", err)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
