"""Inter-station adjacency matrices and the normalized graph function.

Three graphs describe a network snapshot: inverse great-circle distance,
soft-cosine similarity of POI distributions, and cosine similarity of
min-max normalized road features. Each has a unit diagonal and is
bitwise symmetric.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .data import DataError, Station, haversine_km

MIN_DISTANCE_KM = 0.01


def _mirror_upper(m: np.ndarray) -> np.ndarray:
    # copy the upper triangle onto the lower one so a_ij == a_ji bitwise
    upper = np.triu(m, 1)
    out = upper + upper.T
    np.fill_diagonal(out, np.diag(m))
    return out


def distance_matrix_km(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    return _mirror_upper(haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :]))


def distance_graph(stations: Sequence[Station], min_km: float = MIN_DISTANCE_KM) -> np.ndarray:
    """Reciprocal distance, clamped at ``min_km``, with self loops of weight 1."""
    lat = np.array([s.lat for s in stations], dtype=np.float64)
    lon = np.array([s.lon for s in stations], dtype=np.float64)
    a = 1.0 / np.maximum(distance_matrix_km(lat, lon), min_km)
    np.fill_diagonal(a, 1.0)
    return a


def soft_cosine(u, v, sim: Optional[np.ndarray] = None) -> float:
    """Soft cosine of two non-negative vectors under category similarity ``sim``.

    Returns 0 when either vector is all zero.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"soft_cosine: vectors of shapes {u.shape} and {v.shape}")
    if sim is None:
        sim = np.eye(len(u))
    if sim.shape != (len(u), len(u)):
        raise ValueError(f"soft_cosine: similarity matrix {sim.shape} does not match length {len(u)}")
    uu = u @ sim @ u
    vv = v @ sim @ v
    if uu <= 0.0 or vv <= 0.0:
        return 0.0
    return float(np.clip((u @ sim @ v) / (np.sqrt(uu) * np.sqrt(vv)), 0.0, 1.0))


def soft_cosine_matrix(features: np.ndarray, sim: Optional[np.ndarray] = None) -> np.ndarray:
    """Pairwise soft cosine between rows; unit diagonal, zero rows give 0 off-diagonal."""
    x = np.asarray(features, dtype=np.float64)
    n, p = x.shape
    if sim is None:
        sim = np.eye(p)
    if sim.shape != (p, p):
        raise ValueError(f"similarity matrix {sim.shape} does not match feature length {p}")
    gram = _mirror_upper(x @ sim @ x.T)
    norms = np.sqrt(np.maximum(np.diag(gram), 0.0))
    nonzero = norms > 0.0
    denom = np.outer(norms, norms)
    out = np.divide(gram, denom, out=np.zeros((n, n)), where=np.outer(nonzero, nonzero))
    out = _mirror_upper(np.clip(out, 0.0, 1.0))
    np.fill_diagonal(out, 1.0)
    return out


def functional_graph(stations: Sequence[Station], sim: Optional[np.ndarray] = None) -> np.ndarray:
    return soft_cosine_matrix(np.array([s.poi_distribution for s in stations]), sim)


def normalize_road_features(raw: np.ndarray) -> np.ndarray:
    """Min-max scale each column to [0, 1]; constant columns map to 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    span = hi - lo
    flat = span == 0
    out = np.divide(raw - lo, span, out=np.zeros_like(raw), where=~flat)
    out[:, flat] = 0.5
    return out


def road_graph(stations: Sequence[Station]) -> np.ndarray:
    for s in stations:
        if s.road_features is None:
            raise DataError(f"station {s.id} has no road features")
    raw = np.array([s.road_features for s in stations])
    return soft_cosine_matrix(normalize_road_features(raw))


def graph_function(a: np.ndarray) -> np.ndarray:
    """Symmetric normalization D^-1/2 A D^-1/2 with D the row-sum degree matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"graph_function needs a square matrix, got {a.shape}")
    if not np.array_equal(a, a.T):
        raise ValueError("graph_function needs a symmetric matrix")
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return _mirror_upper(a * inv_sqrt[:, None] * inv_sqrt[None, :])


@dataclass
class NetworkSnapshot:
    as_of: dt.date
    station_ids: List[str]
    distance: np.ndarray
    functional: np.ndarray
    road: np.ndarray

    @property
    def n(self) -> int:
        return len(self.station_ids)

    def adjacency(self) -> List[np.ndarray]:
        return [self.distance, self.functional, self.road]

    def normalized(self) -> List[np.ndarray]:
        return [graph_function(a) for a in self.adjacency()]


def alive_stations(stations: Sequence[Station], as_of: dt.date) -> List[Station]:
    return [s for s in stations if s.alive_on(as_of)]


def build_snapshot(stations: Sequence[Station], as_of: dt.date, sim: Optional[np.ndarray] = None,
                   include_all: bool = False) -> NetworkSnapshot:
    """Graphs over the stations alive on ``as_of`` (or over all given stations
    when ``include_all`` is set, for snapshots that carry planned stations)."""
    members = list(stations) if include_all else alive_stations(stations, as_of)
    return NetworkSnapshot(
        as_of,
        [s.id for s in members],
        distance_graph(members),
        functional_graph(members, sim),
        road_graph(members),
    )


def read_poi_similarity(path, categories: Sequence[str]) -> np.ndarray:
    """Read a labelled P-by-P category similarity matrix and check it is usable.

    The matrix must be symmetric with unit diagonal and diagonally dominant
    (a Gershgorin sufficient condition for positive semi-definiteness).
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty similarity file")
    header = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    if header != labels:
        raise DataError(f"{path}: row labels {labels} do not match header {header}")
    try:
        m = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if m.shape != (len(header), len(header)):
        raise DataError(f"{path}: matrix is not square")
    if not np.allclose(m, m.T, atol=0.0) or not np.all(np.diag(m) == 1.0):
        raise DataError(f"{path}: similarity matrix must be symmetric with unit diagonal")
    off = np.abs(m).sum(axis=1) - np.abs(np.diag(m))
    if np.any(np.diag(m) - off < 0):
        raise DataError(f"{path}: similarity matrix fails the Gershgorin PSD check")
    missing = set(categories) - set(header)
    if missing:
        raise DataError(f"{path}: no rows for POI categories {sorted(missing)}")
    pos = [header.index(c) for c in categories]
    return m[np.ix_(pos, pos)]


def write_matrix_csv(path, ids: Sequence[str], m: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(ids))
        for sid, row in zip(ids, m):
            w.writerow([sid] + [repr(float(x)) for x in row])
