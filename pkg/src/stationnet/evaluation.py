"""RMSE / error-rate metrics and the existing-vs-planned evaluation report."""

from __future__ import annotations

import datetime as dt
from typing import Dict, Optional, Sequence

import numpy as np

from .data import WEEKDAYS, Dataset
from .model import DemandModel, predict_at, predict_expected, snapshot_members, window_truth

GROUPS = ("existing", "planned", "all")


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"rmse: {pred.shape} predictions vs {truth.shape} truths")
    if pred.size == 0:
        raise ValueError("rmse of an empty input is undefined")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def error_rate(pred, truth) -> float:
    """Summed absolute error relative to summed truth."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"error_rate: {pred.shape} predictions vs {truth.shape} truths")
    denom = truth.sum()
    if pred.size == 0 or denom <= 0:
        raise ValueError("error rate is undefined when the truth sums to zero")
    return float(np.abs(pred - truth).sum() / denom)


def _metrics(pred: np.ndarray, truth: np.ndarray) -> Optional[dict]:
    if pred.size == 0:
        return None
    err = pred - truth
    out = {
        "rmse": rmse(pred, truth),
        "er": error_rate(pred, truth) if truth.sum() > 0 else None,
        "sse": float((err ** 2).sum()),
        "n_values": int(pred.size),
        "per_weekday": {},
    }
    for w, name in enumerate(WEEKDAYS):
        p, t = pred[:, w], truth[:, w]
        out["per_weekday"][name] = {"rmse": rmse(p, t), "er": error_rate(p, t) if t.sum() > 0 else None}
    return out


def report_from_predictions(pred: np.ndarray, truth: np.ndarray, planned: np.ndarray, scored: np.ndarray,
                            echo: Optional[dict] = None) -> dict:
    """Metrics per station group, pooled over all (station, weekday) entries.

    Stations without a full week of observed truth (``scored`` False) are
    counted but left out of the metrics. A group with no scored station
    reports ``null`` metrics.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    masks = {
        "existing": scored & ~planned,
        "planned": scored & planned,
        "all": scored,
    }
    groups = {g: _metrics(pred[m], truth[m]) for g, m in masks.items()}
    return {
        "metric_pooling": "flattened over stations and weekdays",
        "groups": groups,
        "station_counts": {g: int(m.sum()) for g, m in masks.items()},
        "unscored_stations": {
            "existing": int((~scored & ~planned).sum()),
            "planned": int((~scored & planned).sum()),
        },
        "config": echo or {},
    }


def evaluation_truth(ds: Dataset, as_of: dt.date, horizon_days: int):
    members = snapshot_members(ds.stations, as_of, horizon_days)
    truth, complete = window_truth(ds, members, as_of, horizon_days, ds.demand_matrix())
    planned = np.array([s.deployed_on > as_of for s in members])
    return members, truth, complete, planned


def evaluate(model: DemandModel, ds: Dataset, as_of: dt.date, horizon_days: int = 56,
             sim: Optional[np.ndarray] = None, echo: Optional[dict] = None):
    """Score ``model`` on the window ``(as_of, as_of + horizon]``.

    Existing stations are those in service on ``as_of``; planned stations
    open inside the horizon and have no history. Returns ``(report, sample,
    predictions)``.
    """
    if horizon_days < 7:
        raise ValueError("the evaluation horizon must cover at least one full week")
    sample = predict_at(model, ds, as_of, horizon_days, sim)
    pred = predict_expected(model, sample)
    echo = dict(echo or {})
    echo.update({"eval_date": as_of.isoformat(), "horizon_days": horizon_days})
    return report_from_predictions(pred, sample.truth, sample.planned, sample.supervised, echo), sample, pred


def report_rows(report: dict) -> list:
    """(group, weekday, rmse, er) rows, with weekday ``all`` for the pooled value."""
    rows = []
    for g in GROUPS:
        m = report["groups"][g]
        if m is None:
            continue
        rows.append((g, "all", m["rmse"], m["er"]))
        for w in WEEKDAYS:
            rows.append((g, w, m["per_weekday"][w]["rmse"], m["per_weekday"][w]["er"]))
    return rows
