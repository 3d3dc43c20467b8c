"""Command-line entry point: ``stationnet <subcommand> ...``.

Exit codes: 0 on success, 1 on usage errors, 2 on data errors (missing or
malformed files, incompatible checkpoints).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import baselines, evaluation, graphs, model, synth
from .checkpoint import CheckpointError
from .config import check_known, from_mapping, read_config
from .data import WEEKDAYS, DataError, export_dataset, load_dataset

log = logging.getLogger("stationnet")

CONFIG_CLASSES = (synth.ScenarioConfig, model.TrainingConfig, baselines.BaselineConfig)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def _config_values(args) -> Dict[str, str]:
    if not getattr(args, "config", None):
        return {}
    path = Path(args.config)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    try:
        values = read_config(path)
        check_known(values, CONFIG_CLASSES)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    return values


def _build(cls, args, **overrides):
    try:
        return from_mapping(cls, _config_values(args), seed=args.seed, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(args, obj, text: str) -> None:
    sys.stdout.write(_dump(obj) if args.json else text)


def _load(path, utc_offset_hours: Optional[float] = None):
    if not Path(path).is_dir():
        raise DataError(f"data directory not found: {path}")
    if utc_offset_hours is None:
        return load_dataset(path)
    return load_dataset(path, utc_offset=dt.timedelta(hours=utc_offset_hours))


def _similarity(args, ds):
    if getattr(args, "poi_similarity", None):
        return graphs.read_poi_similarity(args.poi_similarity, ds.poi_categories)
    return None


def _eval_date(args, ds, holdout_days: int) -> dt.date:
    as_of = args.eval_date or ds.end - dt.timedelta(days=holdout_days)
    if not ds.start <= as_of <= ds.end:
        raise DataError(f"evaluation date {as_of} is outside the data ({ds.start} to {ds.end})")
    return as_of


def _horizon(text: str) -> int:
    try:
        days = int(text)
    except ValueError:
        days = 0
    if days < 7:
        raise argparse.ArgumentTypeError(f"horizon must be an integer of at least 7 days, got {text!r}")
    return days


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = _build(synth.ScenarioConfig, args)
    out = Path(args.out or "scenario")
    scenario = synth.generate(cfg)
    paths = synth.write_scenario(scenario, out)
    summary = {
        "out": str(out),
        "stations": len(scenario.stations),
        "orders": len(scenario.orders),
        "days": cfg.span_days,
        "files": {k: str(v) for k, v in sorted(paths.items())},
    }
    _emit(args, summary, f"wrote {summary['stations']} stations and {summary['orders']} orders to {out}\n")
    return 0


def cmd_ingest(args) -> int:
    ds = _load(args.data, args.utc_offset)
    rej = ds.rejections
    summary = {
        "stations": len(ds.stations),
        "orders_accepted": len(ds.orders),
        "rejected": {"unknown_station": rej.unknown_station, "outside_service": rej.outside_service},
        "rejected_examples": rej.examples,
        "start": ds.start.isoformat(),
        "end": ds.end.isoformat(),
        "poi_categories": ds.poi_categories,
        "total_pickups": int(ds.demand_matrix().sum()),
    }
    if args.out:
        out = Path(args.out)
        export_dataset(ds, out)
        _write_demand(out / "daily_demand.csv", ds)
        summary["out"] = str(out)
    text = (f"{summary['stations']} stations, {summary['orders_accepted']} orders accepted, "
            f"{rej.total} rejected ({rej.unknown_station} unknown station, {rej.outside_service} outside service)\n")
    _emit(args, summary, text)
    return 0


def _write_demand(path: Path, ds) -> None:
    counts = ds.demand_matrix()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "date", "pickups"])
        for i, s in enumerate(ds.stations):
            for d in range(counts.shape[1]):
                day = ds.date_at(d)
                if s.alive_on(day):
                    w.writerow([s.id, day.isoformat(), int(counts[i, d])])


def cmd_build_graphs(args) -> int:
    ds = _load(args.data, args.utc_offset)
    snap = graphs.build_snapshot(ds.stations, args.as_of, _similarity(args, ds))
    if not ds.start <= args.as_of <= ds.end:
        raise DataError(f"--as-of {args.as_of} is outside the data ({ds.start} to {ds.end})")
    if snap.n == 0:
        raise DataError(f"no station is in service on {args.as_of}")
    out = Path(args.out or "graphs")
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, a in zip(("distance", "functional", "road"), snap.adjacency()):
        files[name] = str(out / f"{name}.csv")
        graphs.write_matrix_csv(files[name], snap.station_ids, a)
        if args.normalized:
            files[f"{name}_normalized"] = str(out / f"{name}_normalized.csv")
            graphs.write_matrix_csv(files[f"{name}_normalized"], snap.station_ids, graphs.graph_function(a))
    summary = {"as_of": args.as_of.isoformat(), "stations": snap.n, "files": files}
    _emit(args, summary, f"wrote {len(files)} matrices over {snap.n} stations to {out}\n")
    return 0


def cmd_train(args) -> int:
    overrides = {"epochs": args.epochs, "lr": args.lr, "optimizer": args.optimizer}
    cfg = _build(model.TrainingConfig, args, **overrides)
    ds = _load(args.data, args.utc_offset)
    out = Path(args.out or "model.ckpt")

    def progress(epoch, loss):
        log.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, loss)

    try:
        result = model.train(ds, cfg, _similarity(args, ds), progress)
    except model.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out.parent.mkdir(parents=True, exist_ok=True)
    result.model.save(out)
    loss_path = out.with_name(out.name + ".losses.csv")
    with open(loss_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for e, value in enumerate(result.losses):
            fh.write(f"{e + 1},{value!r}\n")
    summary = {"checkpoint": str(out), "losses": result.losses, "config": cfg.as_dict()}
    last = result.losses[-1] if result.losses else float("nan")
    _emit(args, summary, f"trained {cfg.epochs} epochs, final loss {last:.4f}; checkpoint {out}\n")
    return 0


def _load_model(args, ds) -> model.DemandModel:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return model.DemandModel.load(path, ds)


def _prediction_rows(ids: List[str], planned: np.ndarray, pred: np.ndarray) -> List[dict]:
    return [{"station_id": sid, "planned": bool(p), "expected_demand": dict(zip(WEEKDAYS, map(float, row)))}
            for sid, p, row in zip(ids, planned, pred)]


def _write_predictions(path: Path, ids, planned, pred) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "planned"] + list(WEEKDAYS))
        for sid, p, row in zip(ids, planned, pred):
            w.writerow([sid, int(p)] + [repr(float(x)) for x in row])


def cmd_predict(args) -> int:
    ds = _load(args.data, args.utc_offset)
    m = _load_model(args, ds)
    as_of = _eval_date(args, ds, m.config.holdout_days)
    sample = model.predict_at(m, ds, as_of, args.horizon, _similarity(args, ds))
    pred = model.predict_expected(m, sample)
    if args.out:
        _write_predictions(Path(args.out), sample.station_ids, sample.planned, pred)
    rows = _prediction_rows(sample.station_ids, sample.planned, pred)
    text = "".join(f"{r['station_id']}{' (planned)' if r['planned'] else ''}: "
                   + " ".join(f"{v:.2f}" for v in r["expected_demand"].values()) + "\n" for r in rows)
    _emit(args, {"as_of": as_of.isoformat(), "horizon_days": args.horizon, "predictions": rows}, text)
    return 0


def _write_report(args, report: dict) -> None:
    if not args.out:
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(_dump(report), encoding="utf-8")
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "weekday", "rmse", "er"])
        for g, wd, r, e in evaluation.report_rows(report):
            w.writerow([g, wd, repr(r), "" if e is None else repr(e)])


def _summary_text(report: dict) -> str:
    lines = []
    for g in evaluation.GROUPS:
        m = report["groups"][g]
        n = report["station_counts"][g]
        if m is None:
            lines.append(f"{g:9s} n={n:4d}  (no scored stations)")
        else:
            er = "n/a" if m["er"] is None else f"{m['er']:.4f}"
            lines.append(f"{g:9s} n={n:4d}  rmse={m['rmse']:.4f}  er={er}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(args) -> int:
    ds = _load(args.data, args.utc_offset)
    m = _load_model(args, ds)
    as_of = _eval_date(args, ds, m.config.holdout_days)
    echo = {"model": "ddp", "checkpoint": Path(args.checkpoint).name, "training_config": m.config.as_dict()}
    report, sample, pred = evaluation.evaluate(m, ds, as_of, args.horizon, _similarity(args, ds), echo)
    _write_report(args, report)
    if args.out:
        _write_predictions(Path(args.out) / "predictions.csv", sample.station_ids, sample.planned, pred)
    _emit(args, report, _summary_text(report))
    return 0


def cmd_baseline(args) -> int:
    cfg = _build(baselines.BaselineConfig, args, k=args.k, trees=args.trees, depth=args.depth)
    ds = _load(args.data, args.utc_offset)
    holdout = _build(model.TrainingConfig, args).holdout_days
    as_of = _eval_date(args, ds, holdout)
    members, pred = baselines.baseline_predict(ds, args.method, as_of, args.horizon, cfg)
    _, truth, complete, planned = evaluation.evaluation_truth(ds, as_of, args.horizon)
    echo = {"model": args.method, "baseline_config": dataclasses.asdict(cfg),
            "eval_date": as_of.isoformat(), "horizon_days": args.horizon}
    report = evaluation.report_from_predictions(pred, truth, planned, complete, echo)
    _write_report(args, report)
    if args.out:
        _write_predictions(Path(args.out) / "predictions.csv", [s.id for s in members], planned, pred)
    _emit(args, report, _summary_text(report))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--json", action="store_true", help="print a JSON report on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    data_args = argparse.ArgumentParser(add_help=False)
    data_args.add_argument("data", help="directory with the five input CSV files")
    data_args.add_argument("--utc-offset", type=float, help="local time zone offset in hours for day bucketing")
    data_args.add_argument("--poi-similarity", help="P x P category similarity CSV for the functional graph")

    eval_args = argparse.ArgumentParser(add_help=False)
    eval_args.add_argument("--eval-date", type=_date, help="last day of observed history (default: end minus holdout)")
    eval_args.add_argument("--horizon", type=_horizon, default=56, help="days scored after the evaluation date")

    p = _Parser(prog="stationnet", description="Station-level expected demand forecasting for growing networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic scenario")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", parents=[common, data_args], help="validate inputs and report rejected rows")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("build-graphs", parents=[common, data_args], help="dump the three adjacency matrices")
    s.add_argument("--as-of", type=_date, required=True)
    s.add_argument("--normalized", action="store_true", help="also write the normalized graphs")
    s.set_defaults(func=cmd_build_graphs)

    s = sub.add_parser("train", parents=[common, data_args], help="train the demand model")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--optimizer", choices=("sgd", "adam"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common, data_args, eval_args], help="predict expected demand")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common, data_args, eval_args], help="score a checkpoint on the holdout")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("baseline", parents=[common, data_args, eval_args], help="score a feature baseline")
    s.add_argument("--method", choices=("knn", "forest", "forest_history"), default="knn")
    s.add_argument("--k", type=int)
    s.add_argument("--trees", type=int)
    s.add_argument("--depth", type=int)
    s.set_defaults(func=cmd_baseline)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, FileNotFoundError, synth.ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
