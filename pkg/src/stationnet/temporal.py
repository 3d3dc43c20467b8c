"""Per-station LSTM encoding of demand history with calendar and weather inputs.

One parameter set is shared by every station. Histories of different
lengths are batched by left-padding with masked steps; a masked step leaves
the recurrent state untouched, so a station with no history encodes to the
zero vector.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import WEATHER_CATEGORIES, Dataset, Station

STEP_SIZE = 1 + len(WEATHER_CATEGORIES) + 7 + 1
DEFAULT_HIDDEN = 32
DEFAULT_WINDOW = 56


@dataclass
class TemporalInputStep:
    demand: float
    weather_onehot: np.ndarray
    dayofweek_onehot: np.ndarray
    holiday: int

    def __post_init__(self):
        w = np.asarray(self.weather_onehot, dtype=np.float64)
        d = np.asarray(self.dayofweek_onehot, dtype=np.float64)
        if w.shape != (4,) or d.shape != (7,):
            raise ValueError(f"step needs 4 weather and 7 weekday entries, got {w.shape} and {d.shape}")
        for v in (w, d):
            if not (np.all((v == 0) | (v == 1)) and v.sum() == 1):
                raise ValueError("one-hot vectors need exactly one entry set to 1")
        if self.holiday not in (0, 1):
            raise ValueError(f"holiday flag must be 0 or 1, got {self.holiday}")
        self.weather_onehot, self.dayofweek_onehot = w, d

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.demand], self.weather_onehot, self.dayofweek_onehot, [float(self.holiday)]])

    @classmethod
    def build(cls, count: float, weather_code: int, weekday: int, holiday: int) -> "TemporalInputStep":
        return cls(float(np.log1p(count)), np.eye(4)[weather_code], np.eye(7)[weekday], int(holiday))


def step_matrix(counts: np.ndarray, weather_codes: np.ndarray, weekdays: np.ndarray, holidays: np.ndarray) -> np.ndarray:
    """Vectorized step encoding for a run of days, shape (days, STEP_SIZE)."""
    n = len(counts)
    out = np.zeros((n, STEP_SIZE))
    out[:, 0] = np.log1p(np.asarray(counts, dtype=np.float64))
    out[np.arange(n), 1 + np.asarray(weather_codes)] = 1.0
    out[np.arange(n), 5 + np.asarray(weekdays)] = 1.0
    out[:, 12] = holidays
    return out


class LstmParameters:
    """Gate weights laid out as [input | forget | cell | output] column blocks."""

    def __init__(self, hidden: int = DEFAULT_HIDDEN, input_size: int = STEP_SIZE, rng: Optional[np.random.Generator] = None):
        self.hidden = hidden
        self.input_size = input_size
        if rng is None:
            w_x = np.zeros((input_size, 4 * hidden))
            w_h = np.zeros((hidden, 4 * hidden))
            b = np.zeros(4 * hidden)
        else:
            bound = 1.0 / np.sqrt(hidden)
            w_x = rng.uniform(-bound, bound, (input_size, 4 * hidden))
            w_h = rng.uniform(-bound, bound, (hidden, 4 * hidden))
            b = rng.uniform(-bound, bound, 4 * hidden)
            b[hidden:2 * hidden] = 1.0
        self.w_x = Tensor(w_x, requires_grad=True, name="lstm.w_x")
        self.w_h = Tensor(w_h, requires_grad=True, name="lstm.w_h")
        self.b = Tensor(b, requires_grad=True, name="lstm.b")

    def tensors(self) -> List[Tensor]:
        return [self.w_x, self.w_h, self.b]


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, params: LstmParameters):
    """One LSTM step for a batch of rows; returns (h, c)."""
    u = params.hidden
    z = ad.add_bias(ad.matmul(x, params.w_x) + ad.matmul(h, params.w_h), params.b)
    i = ad.sigmoid(ad.slice_columns(z, 0, u))
    f = ad.sigmoid(ad.slice_columns(z, u, 2 * u))
    g = ad.tanh(ad.slice_columns(z, 2 * u, 3 * u))
    o = ad.sigmoid(ad.slice_columns(z, 3 * u, 4 * u))
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


def encode_station(history: Sequence[TemporalInputStep], params: LstmParameters) -> Tensor:
    """Final hidden state (length ``params.hidden``) after reading ``history``."""
    h = Tensor(np.zeros((1, params.hidden)))
    c = Tensor(np.zeros((1, params.hidden)))
    for step in history:
        vec = step.vector() if isinstance(step, TemporalInputStep) else np.asarray(step, dtype=np.float64)
        if vec.shape != (params.input_size,):
            raise ValueError(f"history step has length {vec.shape}, expected {params.input_size}")
        h, c = lstm_cell(Tensor(vec[None, :]), h, c, params)
    return h


def encode_batch(steps: np.ndarray, mask: np.ndarray, params: LstmParameters) -> Tensor:
    """Encode many stations at once.

    ``steps`` has shape (time, stations, STEP_SIZE); ``mask`` is (time,
    stations) with 1 where the step is real. Returns (stations, hidden).
    """
    t_len, n, _ = steps.shape
    u = params.hidden
    h = Tensor(np.zeros((n, u)))
    c = Tensor(np.zeros((n, u)))
    for t in range(t_len):
        m = mask[t]
        if not m.any():
            continue
        h_new, c_new = lstm_cell(Tensor(steps[t]), h, c, params)
        if m.all():
            h, c = h_new, c_new
        else:
            keep = Tensor(np.repeat(m[:, None], u, axis=1).astype(np.float64))
            hold = Tensor(1.0 - keep.data)
            h = keep * h_new + hold * h
            c = keep * c_new + hold * c
    return h


def truncate_history(history: Sequence, window: int = DEFAULT_WINDOW) -> list:
    if window < 1:
        raise ValueError(f"history window must be at least 1, got {window}")
    history = list(history)
    return history[-window:]


def condition(f: Tensor, c) -> Tensor:
    """Append the static station features to the temporal encoding (row-wise)."""
    c = c if isinstance(c, Tensor) else Tensor(np.atleast_2d(np.asarray(c, dtype=np.float64)))
    if f.data.ndim != 2 or c.data.ndim != 2 or f.shape[0] != c.shape[0]:
        raise ValueError(f"condition: cannot join {f.shape} with {c.shape}")
    return ad.concat_columns([f, c])


@dataclass
class FeatureScaler:
    """Fixed scaling for the static station features.

    ``docks`` are divided by ``dock_scale``; road features are min-max scaled
    with the stored bounds (constant columns map to 0.5).
    """

    dock_scale: float
    road_min: np.ndarray
    road_max: np.ndarray

    @classmethod
    def fit(cls, stations: Sequence[Station]) -> "FeatureScaler":
        docks = np.array([s.docks for s in stations], dtype=np.float64)
        road = np.array([s.road_features for s in stations])
        return cls(float(docks.max()), road.min(axis=0), road.max(axis=0))

    def road(self, raw: np.ndarray) -> np.ndarray:
        span = self.road_max - self.road_min
        flat = span == 0
        out = np.divide(raw - self.road_min, span, out=np.zeros_like(raw, dtype=np.float64), where=~flat)
        out[..., flat] = 0.5
        return out

    def static_features(self, stations: Sequence[Station]) -> np.ndarray:
        """Rows of [scaled docks | POI distribution | scaled road features]."""
        docks = np.array([[s.docks / self.dock_scale] for s in stations])
        poi = np.array([s.poi_distribution for s in stations])
        road = self.road(np.array([s.road_features for s in stations], dtype=np.float64))
        return np.hstack([docks, poi, road])

    def arrays(self) -> Dict[str, np.ndarray]:
        return {
            "scaler.dock_scale": np.array([self.dock_scale]),
            "scaler.road_min": np.asarray(self.road_min, dtype=np.float64),
            "scaler.road_max": np.asarray(self.road_max, dtype=np.float64),
        }

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "FeatureScaler":
        return cls(float(arrays["scaler.dock_scale"][0]), arrays["scaler.road_min"], arrays["scaler.road_max"])


def history_inputs(ds: Dataset, stations: Sequence[Station], as_of: dt.date, window: int = DEFAULT_WINDOW,
                   counts: Optional[np.ndarray] = None):
    """Batched LSTM inputs for the ``window`` days ending on ``as_of``.

    Only days on which a station was in service (and inside the dataset)
    are unmasked; stations deployed after ``as_of`` get an empty history.
    ``counts`` overrides the dataset's demand tally (rows follow ``ds.stations``).
    """
    if counts is None:
        counts = ds.demand_matrix()
    index = ds.station_index()
    end = ds.day_index(as_of)
    days = np.arange(end - window + 1, end + 1)
    in_range = (days >= 0) & (days < ds.weather.n_days)
    safe = np.clip(days, 0, ds.weather.n_days - 1)
    weather = ds.weather.categories[safe]
    holidays = ds.weather.holidays[safe]
    weekdays = np.array([ds.date_at(int(d)).weekday() for d in days])
    n = len(stations)
    steps = np.zeros((window, n, STEP_SIZE))
    mask = np.zeros((window, n), dtype=bool)
    for j, s in enumerate(stations):
        row = counts[index[s.id]]
        alive = in_range.copy()
        first = ds.day_index(s.deployed_on)
        alive &= days >= first
        if s.closed_on is not None:
            alive &= days < ds.day_index(s.closed_on)
        if not alive.any():
            continue
        steps[:, j, :] = step_matrix(np.where(alive, row[safe], 0), weather, weekdays, holidays)
        mask[:, j] = alive
    return steps, mask
