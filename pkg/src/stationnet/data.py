"""Loading station, order, POI, road and weather CSVs into domain objects.

All files are UTF-8 CSV with a header row. Daily demand is the number of
rental orders picked up at a station on a local calendar day; returns do
not count.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

WEATHER_CATEGORIES = ("sunny", "overcast_foggy", "drizzle_lightsnow", "heavy_rain_snow")
WEEKDAYS = ("Mo", "Tu", "We", "Th", "Fr", "Sa", "Su")

STATION_COLUMNS = ("id", "lat", "lon", "docks", "deployed_on", "closed_on")
ORDER_COLUMNS = ("order_id", "pickup_station", "return_station", "start_ts", "end_ts")
POI_COLUMNS = ("lat", "lon", "category")
ROAD_COLUMNS = ("station_id", "seg_length_km", "junction_count", "mean_degree", "mean_centrality")
WEATHER_COLUMNS = ("date", "category", "holiday")

FILE_NAMES = {
    "stations": "stations.csv",
    "orders": "orders.csv",
    "poi": "poi.csv",
    "road": "road_features.csv",
    "weather": "weather.csv",
}

POI_RADIUS_KM = 1.0
EARTH_RADIUS_KM = 6371.0088
DEFAULT_UTC_OFFSET = dt.timedelta(hours=8)


class DataError(ValueError):
    """Input data is missing or malformed."""


def format_float(x: float) -> str:
    # shortest repr round-trips exactly through float()
    return repr(float(x))


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in kilometres; accepts scalars or numpy arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


@dataclass
class Station:
    id: str
    lat: float
    lon: float
    docks: int
    deployed_on: dt.date
    closed_on: Optional[dt.date] = None
    poi_distribution: np.ndarray = field(default_factory=lambda: np.zeros(0))
    road_features: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise DataError(f"station {self.id}: coordinates ({self.lat}, {self.lon}) out of range")
        if self.docks <= 0:
            raise DataError(f"station {self.id}: docks must be positive, got {self.docks}")
        if self.closed_on is not None and self.closed_on <= self.deployed_on:
            raise DataError(f"station {self.id}: closed_on {self.closed_on} not after deployed_on {self.deployed_on}")

    def alive_on(self, day: dt.date) -> bool:
        return self.deployed_on <= day and (self.closed_on is None or day < self.closed_on)


@dataclass
class DemandSeries:
    station_id: str
    start_date: dt.date
    counts: np.ndarray

    @property
    def end_date(self) -> dt.date:
        return self.start_date + dt.timedelta(days=len(self.counts) - 1)

    def dates(self) -> List[dt.date]:
        return [self.start_date + dt.timedelta(days=i) for i in range(len(self.counts))]


@dataclass
class ExpectedDemand:
    """Per-weekday mean demand, Monday first.

    ``coverage[w]`` counts the days of weekday ``w`` that contributed; a zero
    entry marks a weekday the window never observed (its value is 0).
    """

    values: np.ndarray
    coverage: np.ndarray

    @property
    def complete(self) -> bool:
        return bool(np.all(self.coverage > 0))


@dataclass
class WeatherCalendar:
    start: dt.date
    categories: np.ndarray  # int codes into WEATHER_CATEGORIES, one per day
    holidays: np.ndarray  # 0/1 per day

    @property
    def end(self) -> dt.date:
        return self.start + dt.timedelta(days=len(self.categories) - 1)

    @property
    def n_days(self) -> int:
        return len(self.categories)

    def index(self, day: dt.date) -> int:
        return (day - self.start).days

    def category(self, day: dt.date) -> str:
        return WEATHER_CATEGORIES[self.categories[self.index(day)]]


@dataclass
class OrderTable:
    """Columnar rental orders. ``day`` is the local calendar day of pickup."""

    order_id: List[str]
    pickup: List[str]
    dropoff: List[str]
    start_ts: List[str]
    end_ts: List[str]
    day: List[dt.date]

    def __len__(self) -> int:
        return len(self.order_id)

    @classmethod
    def empty(cls) -> "OrderTable":
        return cls([], [], [], [], [], [])

    def subset(self, keep: Sequence[int]) -> "OrderTable":
        return OrderTable(
            [self.order_id[i] for i in keep],
            [self.pickup[i] for i in keep],
            [self.dropoff[i] for i in keep],
            [self.start_ts[i] for i in keep],
            [self.end_ts[i] for i in keep],
            [self.day[i] for i in keep],
        )


@dataclass
class RejectionReport:
    unknown_station: int = 0
    outside_service: int = 0
    examples: List[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.unknown_station + self.outside_service

    def note(self, message: str) -> None:
        if len(self.examples) < 20:
            self.examples.append(message)

    def as_dict(self) -> dict:
        return {
            "unknown_station": self.unknown_station,
            "outside_service": self.outside_service,
            "total": self.total,
            "examples": list(self.examples),
        }


@dataclass
class Dataset:
    stations: List[Station]
    orders: OrderTable
    weather: WeatherCalendar
    poi_categories: List[str]
    rejections: RejectionReport = field(default_factory=RejectionReport)
    utc_offset: dt.timedelta = DEFAULT_UTC_OFFSET
    pois: Tuple[np.ndarray, List[str]] = field(default_factory=lambda: (np.zeros((0, 2)), []), repr=False)
    road_raw: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _counts: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def start(self) -> dt.date:
        return self.weather.start

    @property
    def end(self) -> dt.date:
        return self.weather.end

    @property
    def n_poi(self) -> int:
        return len(self.poi_categories)

    def station(self, sid: str) -> Station:
        for s in self.stations:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def station_index(self) -> Dict[str, int]:
        return {s.id: i for i, s in enumerate(self.stations)}

    def day_index(self, day: dt.date) -> int:
        return (day - self.start).days

    def date_at(self, index: int) -> dt.date:
        return self.start + dt.timedelta(days=index)

    def demand_matrix(self) -> np.ndarray:
        """Pickup counts, shape (stations, days); days outside service are 0."""
        if self._counts is None:
            self._counts = tally_pickups(self.orders, self.station_index(), self.start, self.weather.n_days)
        return self._counts

    def series(self, sid: str) -> DemandSeries:
        row = self.demand_matrix()[self.station_index()[sid]]
        return daily_demand(self.orders, self.station(sid), self.start, self.end, counts=row)


def tally_pickups(orders: OrderTable, index: Dict[str, int], origin: dt.date, n_days: int) -> np.ndarray:
    counts = np.zeros((len(index), n_days), dtype=np.int64)
    if len(orders) == 0:
        return counts
    rows = np.fromiter((index[p] for p in orders.pickup), dtype=np.int64, count=len(orders))
    cols = np.fromiter(((d - origin).days for d in orders.day), dtype=np.int64, count=len(orders))
    ok = (cols >= 0) & (cols < n_days)
    np.add.at(counts, (rows[ok], cols[ok]), 1)
    return counts


def alive_span(station: Station, dataset_start: dt.date, dataset_end: dt.date) -> Tuple[dt.date, dt.date]:
    """First and last service day of ``station`` inside the dataset period."""
    last = dataset_end
    if station.closed_on is not None:
        last = min(last, station.closed_on - dt.timedelta(days=1))
    return max(station.deployed_on, dataset_start), last


def daily_demand(orders: OrderTable, station: Station, dataset_start: dt.date, dataset_end: dt.date,
                 counts: Optional[np.ndarray] = None) -> DemandSeries:
    """Count pickups per day over the station's service period.

    ``counts`` may be a precomputed tally row (indexed from ``dataset_start``)
    to avoid rescanning the order table.
    """
    first, last = alive_span(station, dataset_start, dataset_end)
    n = max((last - first).days + 1, 0)
    if counts is not None:
        off = (first - dataset_start).days
        return DemandSeries(station.id, first, np.asarray(counts[off:off + n], dtype=np.int64).copy())
    out = np.zeros(n, dtype=np.int64)
    for sid, day in zip(orders.pickup, orders.day):
        if sid == station.id:
            k = (day - first).days
            if 0 <= k < n:
                out[k] += 1
    return DemandSeries(station.id, first, out)


def expected_demand(series: DemandSeries, window_start: dt.date, window_end: dt.date) -> ExpectedDemand:
    """Per-weekday mean of ``series`` over the inclusive window."""
    lo = max(window_start, series.start_date)
    hi = min(window_end, series.end_date)
    if len(series.counts) == 0 or lo > hi:
        raise ValueError(f"window {window_start}..{window_end} does not overlap series of {series.station_id}")
    a = (lo - series.start_date).days
    b = (hi - series.start_date).days
    return weekday_means(series.counts[a:b + 1], lo)


def weekday_means(values: np.ndarray, first_day: dt.date) -> ExpectedDemand:
    values = np.asarray(values, dtype=np.float64)
    wd = (first_day.weekday() + np.arange(len(values))) % 7
    coverage = np.bincount(wd, minlength=7)
    totals = np.bincount(wd, weights=values, minlength=7)
    means = np.divide(totals, coverage, out=np.zeros(7), where=coverage > 0)
    return ExpectedDemand(means, coverage)


# ---------------------------------------------------------------------------
# parsing


def _open_rows(path: Path, columns: Sequence[str]):
    if not path.exists():
        raise DataError(f"missing file: {path}")
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != tuple(columns):
        fh.close()
        raise DataError(f"{path}:1: expected header {','.join(columns)}, got {header}")
    return fh, reader


def _rows(path: Path, columns: Sequence[str]):
    fh, reader = _open_rows(path, columns)
    with fh:
        for row in reader:
            if not row:
                continue
            if len(row) != len(columns):
                raise DataError(f"{path}:{reader.line_num}: expected {len(columns)} fields, got {len(row)}")
            yield reader.line_num, row


def _parse(path: Path, line: int, what: str, fn, raw: str):
    try:
        return fn(raw)
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}:{line}: bad {what} {raw!r} ({exc})") from None


def _float(raw: str) -> float:
    x = float(raw)
    if not math.isfinite(x):
        raise ValueError("not finite")
    return x


def read_stations(path: Path) -> List[Station]:
    out, seen = [], set()
    for line, row in _rows(path, STATION_COLUMNS):
        sid = row[0].strip()
        if not sid or sid in seen:
            raise DataError(f"{path}:{line}: empty or duplicate station id {sid!r}")
        seen.add(sid)
        closed = row[5].strip()
        try:
            st = Station(
                id=sid,
                lat=_parse(path, line, "lat", _float, row[1]),
                lon=_parse(path, line, "lon", _float, row[2]),
                docks=_parse(path, line, "docks", int, row[3]),
                deployed_on=_parse(path, line, "deployed_on", dt.date.fromisoformat, row[4].strip()),
                closed_on=_parse(path, line, "closed_on", dt.date.fromisoformat, closed) if closed else None,
            )
        except DataError as exc:
            if str(exc).startswith(str(path)):
                raise
            raise DataError(f"{path}:{line}: {exc}") from None
        out.append(st)
    return out


def read_pois(path: Path) -> Tuple[np.ndarray, List[str]]:
    lat, lon, cat = [], [], []
    for line, row in _rows(path, POI_COLUMNS):
        lat.append(_parse(path, line, "lat", _float, row[0]))
        lon.append(_parse(path, line, "lon", _float, row[1]))
        if not row[2]:
            raise DataError(f"{path}:{line}: empty POI category")
        cat.append(row[2])
    return np.column_stack([lat, lon]) if lat else np.zeros((0, 2)), cat


def read_road_features(path: Path) -> Dict[str, np.ndarray]:
    out = {}
    for line, row in _rows(path, ROAD_COLUMNS):
        out[row[0]] = np.array([_parse(path, line, c, _float, v) for c, v in zip(ROAD_COLUMNS[1:], row[1:])])
    return out


def read_weather(path: Path) -> WeatherCalendar:
    days, cats, hol = [], [], []
    for line, row in _rows(path, WEATHER_COLUMNS):
        days.append(_parse(path, line, "date", dt.date.fromisoformat, row[0]))
        if row[1] not in WEATHER_CATEGORIES:
            raise DataError(f"{path}:{line}: unknown weather category {row[1]!r}")
        cats.append(WEATHER_CATEGORIES.index(row[1]))
        if row[2] not in ("0", "1"):
            raise DataError(f"{path}:{line}: holiday must be 0 or 1, got {row[2]!r}")
        hol.append(int(row[2]))
    if not days:
        raise DataError(f"{path}: no weather rows")
    order = np.argsort(np.array([d.toordinal() for d in days]))
    days = [days[i] for i in order]
    for a, b in zip(days, days[1:]):
        if (b - a).days != 1:
            raise DataError(f"{path}: dates must be contiguous and unique ({a} followed by {b})")
    return WeatherCalendar(days[0], np.array(cats)[order], np.array(hol)[order])


def local_day(ts: str, offset: dt.timedelta) -> dt.date:
    t = dt.datetime.fromisoformat(ts)
    if t.tzinfo is not None:
        t = t.astimezone(dt.timezone(offset)).replace(tzinfo=None)
    return t.date()


def read_orders(path: Path, stations: Dict[str, Station], dataset_end: dt.date,
                offset: dt.timedelta, report: RejectionReport) -> OrderTable:
    table = OrderTable.empty()
    for line, row in _rows(path, ORDER_COLUMNS):
        oid, pick, drop, start, end = row
        day = _parse(path, line, "start_ts", lambda s: local_day(s, offset), start)
        _parse(path, line, "end_ts", dt.datetime.fromisoformat, end)
        if pick not in stations or drop not in stations:
            report.unknown_station += 1
            report.note(f"{path.name}:{line}: unknown station in order {oid}")
            continue
        if not stations[pick].alive_on(day) and day <= dataset_end:
            report.outside_service += 1
            report.note(f"{path.name}:{line}: order {oid} picks up at {pick} outside its service period")
            continue
        table.order_id.append(oid)
        table.pickup.append(pick)
        table.dropoff.append(drop)
        table.start_ts.append(start)
        table.end_ts.append(end)
        table.day.append(day)
    return table


def poi_distributions(stations: Sequence[Station], poi_xy: np.ndarray, poi_cat: Sequence[str],
                      categories: Sequence[str], radius_km: float = POI_RADIUS_KM) -> np.ndarray:
    """Category histogram of POIs within ``radius_km`` of each station, normalized to sum 1.

    Stations with no POI in range get an all-zero row.
    """
    out = np.zeros((len(stations), len(categories)))
    if len(poi_cat) == 0 or not stations:
        return out
    code = {c: i for i, c in enumerate(categories)}
    cat_idx = np.array([code[c] for c in poi_cat])
    for i, s in enumerate(stations):
        d = haversine_km(s.lat, s.lon, poi_xy[:, 0], poi_xy[:, 1])
        hist = np.bincount(cat_idx[d <= radius_km], minlength=len(categories)).astype(np.float64)
        total = hist.sum()
        if total > 0:
            out[i] = hist / total
    return out


def resolve_paths(root) -> Dict[str, Path]:
    root = Path(root)
    return {k: root / v for k, v in FILE_NAMES.items()}


def load_dataset(paths, utc_offset: dt.timedelta = DEFAULT_UTC_OFFSET,
                 poi_radius_km: float = POI_RADIUS_KM) -> Dataset:
    """Read the five CSVs (a directory or a ``{kind: path}`` mapping) into a :class:`Dataset`.

    Orders naming unknown stations, or picking up outside a station's service
    period, are dropped and counted in ``dataset.rejections``.
    """
    paths = resolve_paths(paths) if not isinstance(paths, dict) else {k: Path(v) for k, v in paths.items()}
    stations = read_stations(paths["stations"])
    weather = read_weather(paths["weather"])
    poi_xy, poi_cat = read_pois(paths["poi"])
    categories = sorted(set(poi_cat))
    road = read_road_features(paths["road"])
    for s in stations:
        if s.id not in road:
            raise DataError(f"{paths['road']}: missing road features for station {s.id}")
        s.road_features = road[s.id]
    pd_ = poi_distributions(stations, poi_xy, poi_cat, categories, poi_radius_km)
    for s, p in zip(stations, pd_):
        s.poi_distribution = p
    report = RejectionReport()
    orders = read_orders(paths["orders"], {s.id: s for s in stations}, weather.end, utc_offset, report)
    return Dataset(stations, orders, weather, categories, report, utc_offset, (poi_xy, poi_cat), road)


# ---------------------------------------------------------------------------
# writing


def _write(path: Path, columns: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)


def write_stations(path: Path, stations: Iterable[Station]) -> None:
    _write(path, STATION_COLUMNS, (
        (s.id, format_float(s.lat), format_float(s.lon), str(s.docks), s.deployed_on.isoformat(),
         s.closed_on.isoformat() if s.closed_on else "")
        for s in stations))


def write_orders(path: Path, orders: OrderTable) -> None:
    _write(path, ORDER_COLUMNS, zip(orders.order_id, orders.pickup, orders.dropoff, orders.start_ts, orders.end_ts))


def write_pois(path: Path, poi_xy: np.ndarray, categories: Sequence[str]) -> None:
    _write(path, POI_COLUMNS, ((format_float(a), format_float(b), c) for (a, b), c in zip(poi_xy, categories)))


def write_road_features(path: Path, road: Dict[str, np.ndarray]) -> None:
    _write(path, ROAD_COLUMNS, ([sid] + [format_float(v) for v in vec] for sid, vec in road.items()))


def write_weather(path: Path, weather: WeatherCalendar) -> None:
    _write(path, WEATHER_COLUMNS, (
        ((weather.start + dt.timedelta(days=i)).isoformat(), WEATHER_CATEGORIES[c], str(int(h)))
        for i, (c, h) in enumerate(zip(weather.categories, weather.holidays))))


def export_dataset(ds: Dataset, out_dir) -> Dict[str, Path]:
    """Write ``ds`` back out in the input CSV formats."""
    paths = resolve_paths(out_dir)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    write_stations(paths["stations"], ds.stations)
    write_orders(paths["orders"], ds.orders)
    poi_xy, poi_cat = ds.pois
    write_pois(paths["poi"], poi_xy, poi_cat)
    write_road_features(paths["road"], ds.road_raw)
    write_weather(paths["weather"], ds.weather)
    return paths
