"""Feature-based baselines: nearest neighbours and a random forest.

Both arms describe a station by the static feature vector
``[POI distribution | normalized road features | scaled docks]`` and learn
from the recent weekday means of stations already in service.

* ``knn``: planned stations average their k nearest in-service stations;
  in-service stations extrapolate a per-weekday linear trend of their own
  history.
* ``forest``: one random forest per weekday, fitted on the in-service
  stations, predicts every station.
* ``forest_history``: a stronger variant whose in-service predictions come
  from a forest that also sees the station's own trailing weekday means.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .data import Dataset, Station, weekday_means
from .model import OUTPUT_DAYS, snapshot_members, window_truth
from .temporal import FeatureScaler


def baseline_features(stations: Sequence[Station], scaler: FeatureScaler) -> np.ndarray:
    poi = np.array([s.poi_distribution for s in stations])
    road = scaler.road(np.array([s.road_features for s in stations], dtype=np.float64))
    docks = np.array([[s.docks / scaler.dock_scale] for s in stations])
    return np.hstack([poi, road, docks])


def knn_baseline(train_x: np.ndarray, train_y: np.ndarray, query_x: np.ndarray, k: int) -> np.ndarray:
    """Mean target of the ``k`` nearest training rows (Euclidean; ties keep the lower index)."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > len(train_x):
        raise ValueError(f"k={k} exceeds the {len(train_x)} training stations")
    d2 = ((query_x[:, None, :] - train_x[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return train_y[nearest].mean(axis=1)


def linear_trend_forecast(history: np.ndarray, first_day: dt.date, target_days: Sequence[dt.date]) -> np.ndarray:
    """Per weekday, fit counts ~ a + b * day by least squares and average the fitted
    line over that weekday's target days. Falls back to the mean with fewer than two
    points; forecasts are clipped at 0."""
    history = np.asarray(history, dtype=np.float64)
    t = np.arange(len(history), dtype=np.float64)
    wd = (first_day.weekday() + np.arange(len(history))) % 7
    tgt_t = np.array([(d - first_day).days for d in target_days], dtype=np.float64)
    tgt_wd = np.array([d.weekday() for d in target_days])
    out = np.zeros(OUTPUT_DAYS)
    for w in range(OUTPUT_DAYS):
        xs, ys = t[wd == w], history[wd == w]
        ts = tgt_t[tgt_wd == w]
        if len(ys) == 0 or len(ts) == 0:
            continue
        if len(ys) < 2:
            out[w] = ys.mean()
            continue
        slope, intercept = np.polyfit(xs, ys, 1)
        out[w] = max(float(np.mean(intercept + slope * ts)), 0.0)
    return out


class RegressionTree:
    """CART regression tree with variance-reduction splits."""

    def __init__(self, max_depth: int = 8, min_samples_leaf: int = 1, max_features: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.rng = rng
        self.nodes: List[tuple] = []

    def fit(self, x: np.ndarray, y: np.ndarray) -> "RegressionTree":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if len(y) == 0:
            raise ValueError("cannot fit a tree on an empty training set")
        self.nodes = []
        self._grow(x, y, 0)
        return self

    def _grow(self, x, y, depth) -> int:
        idx = len(self.nodes)
        self.nodes.append(("leaf", float(y.mean())))
        if depth >= self.max_depth or len(y) < 2 * self.min_samples_leaf:
            return idx
        split = best_split(x, y, self._features(x.shape[1]), self.min_samples_leaf)
        if split is None:
            return idx
        feat, thr = split
        left = x[:, feat] <= thr
        li = self._grow(x[left], y[left], depth + 1)
        ri = self._grow(x[~left], y[~left], depth + 1)
        self.nodes[idx] = ("split", feat, thr, li, ri)
        return idx

    def _features(self, n: int) -> np.ndarray:
        if self.max_features is None or self.max_features >= n:
            return np.arange(n)
        return np.sort(self.rng.choice(n, size=self.max_features, replace=False))

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(len(x))
        for r, row in enumerate(x):
            node = self.nodes[0]
            while node[0] == "split":
                node = self.nodes[node[3] if row[node[1]] <= node[2] else node[4]]
            out[r] = node[1]
        return out


def best_split(x: np.ndarray, y: np.ndarray, features: Sequence[int], min_leaf: int = 1):
    """Feature and threshold minimizing the summed squared error of both sides.

    Returns None when no split lowers the error. Thresholds are midpoints
    between consecutive distinct values.
    """
    n = len(y)
    total_sse = float(((y - y.mean()) ** 2).sum())
    best, best_sse = None, total_sse - 1e-12 * max(total_sse, 1.0)
    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xs, ys = x[order, f], y[order]
        cs, cs2 = np.cumsum(ys), np.cumsum(ys * ys)
        nl = np.arange(1, n)
        sl, sl2 = cs[:-1], cs2[:-1]
        sr, sr2 = cs[-1] - sl, cs2[-1] - sl2
        nr = n - nl
        sse = (sl2 - sl * sl / nl) + (sr2 - sr * sr / nr)
        valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        sse = np.where(valid, sse, np.inf)
        k = int(np.argmin(sse))
        if sse[k] < best_sse:
            best_sse = float(sse[k])
            best = (int(f), 0.5 * (xs[k] + xs[k + 1]))
    return best


class RandomForest:
    """Bootstrap-bagged regression trees with sqrt(F) features tried per split."""

    def __init__(self, n_trees: int = 50, max_depth: int = 8, min_samples_leaf: int = 2, seed: int = 0):
        if n_trees < 1:
            raise ValueError("a forest needs at least one tree")
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.seed = seed
        self.trees: List[RegressionTree] = []

    def fit(self, x: np.ndarray, y: np.ndarray) -> "RandomForest":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if len(y) == 0:
            raise ValueError("cannot fit a forest on an empty training set")
        rng = np.random.default_rng(self.seed)
        m = max(1, int(math.ceil(math.sqrt(x.shape[1]))))
        self.trees = []
        for _ in range(self.n_trees):
            rows = rng.integers(0, len(y), size=len(y))
            tree = RegressionTree(self.max_depth, self.min_samples_leaf, m, rng)
            self.trees.append(tree.fit(x[rows], y[rows]))
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.mean([t.predict(x) for t in self.trees], axis=0)


def forest_baseline(train_x: np.ndarray, train_y: np.ndarray, query_x: np.ndarray, trees: int = 50,
                    depth: int = 8, seed: int = 0, min_samples_leaf: int = 2) -> np.ndarray:
    """One forest per weekday column of ``train_y``; returns (queries, 7)."""
    if len(train_x) == 0:
        raise ValueError("forest baseline needs a non-empty training set")
    out = np.zeros((len(query_x), train_y.shape[1]))
    for w in range(train_y.shape[1]):
        rf = RandomForest(trees, depth, min_samples_leaf, seed + w).fit(train_x, train_y[:, w])
        out[:, w] = rf.predict(query_x)
    return out


# ---------------------------------------------------------------------------
# dataset-level runs


@dataclass
class BaselineConfig:
    k: int = 5
    trees: int = 50
    depth: int = 8
    min_samples_leaf: int = 2
    history_days: int = 56
    label_days: int = 28
    stride: int = 7
    seed: int = 0


def _trailing_means(counts: np.ndarray, ds: Dataset, s: Station, end_idx: int, days: int) -> np.ndarray:
    lo = max(end_idx - days + 1, ds.day_index(s.deployed_on), 0)
    if lo > end_idx:
        return np.zeros(OUTPUT_DAYS)
    row = counts[ds.station_index()[s.id]]
    return weekday_means(row[lo:end_idx + 1], ds.date_at(lo)).values


def baseline_predict(ds: Dataset, method: str, as_of: dt.date, horizon_days: int,
                     config: BaselineConfig = BaselineConfig()):
    """Predictions for every station in service on ``as_of`` or opening within the horizon.

    ``method`` is ``"knn"``, ``"forest"`` or ``"forest_history"``.

    Returns ``(members, predictions)`` with members ordered as in the
    model's evaluation snapshot. Only demand up to ``as_of`` is used.
    """
    members = snapshot_members(ds.stations, as_of, horizon_days)
    cut = ds.day_index(as_of)
    counts = ds.demand_matrix().copy()
    counts[:, cut + 1:] = 0
    existing = [s for s in members if s.deployed_on <= as_of]
    planned = [s for s in members if s.deployed_on > as_of]
    scaler = FeatureScaler.fit([s for s in ds.stations if s.deployed_on <= as_of])
    pred = np.zeros((len(members), OUTPUT_DAYS))
    ex_x = baseline_features(existing, scaler)
    ex_y = np.array([_trailing_means(counts, ds, s, cut, config.label_days) for s in existing])
    target_days = [as_of + dt.timedelta(days=d) for d in range(1, horizon_days + 1)]

    if method == "knn":
        for j, s in enumerate(existing):
            lo = max(cut - config.history_days + 1, ds.day_index(s.deployed_on), 0)
            row = counts[ds.station_index()[s.id], lo:cut + 1]
            pred[j] = linear_trend_forecast(row, ds.date_at(lo), target_days)
        if planned:
            pred[len(existing):] = knn_baseline(ex_x, ex_y, baseline_features(planned, scaler), min(config.k, len(existing)))
    elif method == "forest":
        pred[:] = forest_baseline(ex_x, ex_y, baseline_features(members, scaler),
                                  config.trees, config.depth, config.seed, config.min_samples_leaf)
    elif method == "forest_history":
        pred[:len(existing)] = _forest_existing(ds, counts, existing, scaler, as_of, config)
        if planned:
            pred[len(existing):] = forest_baseline(ex_x, ex_y, baseline_features(planned, scaler),
                                                   config.trees, config.depth, config.seed, config.min_samples_leaf)
    else:
        raise ValueError(f"unknown baseline {method!r}")
    return members, np.maximum(pred, 0.0)


def _forest_existing(ds: Dataset, counts: np.ndarray, existing: Sequence[Station], scaler: FeatureScaler,
                     as_of: dt.date, config: BaselineConfig) -> np.ndarray:
    """Forest over [static features | trailing weekday means], trained on past
    (trailing window -> following window) pairs that end by ``as_of``."""
    xs, ys = [], []
    t = as_of - dt.timedelta(days=config.label_days)
    while t >= ds.start + dt.timedelta(days=6):
        alive = [s for s in ds.stations if s.alive_on(t) and s.deployed_on <= t - dt.timedelta(days=6)]
        if alive:
            truth, complete = window_truth(ds, alive, t, config.label_days, counts)
            feats = baseline_features(alive, scaler)
            idx = ds.day_index(t)
            for j, s in enumerate(alive):
                if complete[j]:
                    xs.append(np.concatenate([feats[j], _trailing_means(counts, ds, s, idx, config.label_days)]))
                    ys.append(truth[j])
        t -= dt.timedelta(days=config.stride)
    cut = ds.day_index(as_of)
    qx = np.array([np.concatenate([f, _trailing_means(counts, ds, s, cut, config.label_days)])
                   for f, s in zip(baseline_features(existing, scaler), existing)])
    if not xs:
        raise ValueError("no training pairs for the forest baseline before the evaluation date")
    return forest_baseline(np.array(xs), np.array(ys), qx, config.trees, config.depth, config.seed,
                           config.min_samples_leaf)
