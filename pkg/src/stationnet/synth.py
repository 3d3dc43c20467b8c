"""Synthetic expanding station networks with known demand structure.

Stations belong to latent functional clusters that share a POI mix, road
characteristics and a weekly demand profile. A station's daily rate is

    base_i * dow(cluster, weekday) * weather(category) * neighborhood_i [* holiday]

and realized pickups are Poisson draws of that rate. Everything comes from a
single seeded generator, so a config and seed fully determine the files.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import (
    WEATHER_CATEGORIES,
    ExpectedDemand,
    OrderTable,
    Station,
    WeatherCalendar,
    format_float,
    haversine_km,
    resolve_paths,
    write_orders,
    write_pois,
    write_road_features,
    write_stations,
    write_weather,
)

KM_PER_DEG_LAT = 111.195

POI_NAMES = ("catering", "shopping", "education", "business", "residential", "leisure", "transport", "healthcare")

DEFAULT_TRANSITION = (
    (0.62, 0.28, 0.08, 0.02),
    (0.30, 0.50, 0.15, 0.05),
    (0.25, 0.35, 0.30, 0.10),
    (0.20, 0.30, 0.30, 0.20),
)


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    seed: int = 42
    initial_stations: int = 60
    final_stations: int = 110
    span_days: int = 364
    start_date: dt.date = dt.date(2017, 1, 2)
    lat_min: float = 31.10
    lat_max: float = 31.34
    lon_min: float = 121.30
    lon_max: float = 121.58
    n_poi: int = 8
    clusters: int = 6
    cluster_spread_km: float = 1.2
    cluster_separation_km: float = 4.0
    min_spacing_km: float = 0.2
    pois_per_cluster: int = 150
    background_pois: int = 300
    poi_spread_km: float = 1.5
    weather_transition: tuple = DEFAULT_TRANSITION
    weather_factors: tuple = (1.0, 0.9, 0.72, 0.5)
    weather_amplitude: float = 1.0
    demand_base: float = 6.0
    cluster_level_range: tuple = (0.6, 1.6)
    weekend_boost_range: tuple = (1.3, 1.9)
    weekday_jitter: float = 0.08
    neighborhood_strength: float = 0.6
    base_noise: float = 0.12
    dock_exponent: float = 0.5
    docks_min: int = 6
    docks_max: int = 30
    holiday_count: int = 8
    holiday_factor: float = 1.3
    road_noise: float = 0.1
    utc_offset_hours: int = 8

    def __post_init__(self):
        if self.final_stations < self.initial_stations or self.initial_stations < 1:
            raise ScenarioError("need 1 <= initial_stations <= final_stations")
        if self.span_days < 84:
            raise ScenarioError("span_days must be at least 84 (training plus holdout)")
        t = np.asarray(self.weather_transition, dtype=np.float64)
        if t.shape != (4, 4) or np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0):
            raise ScenarioError("weather_transition must be a 4x4 row-stochastic matrix")
        if len(self.weather_factors) != 4:
            raise ScenarioError("weather_factors needs one entry per weather category")
        if self.n_poi < 1 or self.clusters < 1:
            raise ScenarioError("n_poi and clusters must be positive")

    @property
    def end_date(self) -> dt.date:
        return self.start_date + dt.timedelta(days=self.span_days - 1)

    def effective_weather_factors(self) -> np.ndarray:
        base = np.asarray(self.weather_factors, dtype=np.float64)
        return 1.0 - self.weather_amplitude * (1.0 - base)

    def poi_names(self) -> List[str]:
        if self.n_poi <= len(POI_NAMES):
            return list(POI_NAMES[:self.n_poi])
        return [f"poi_{k:02d}" for k in range(self.n_poi)]

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["start_date"] = self.start_date.isoformat()
        d["weather_transition"] = [list(r) for r in self.weather_transition]
        for k in ("weather_factors", "cluster_level_range", "weekend_boost_range"):
            d[k] = list(d[k])
        return d


def stationary_distribution(transition) -> np.ndarray:
    t = np.asarray(transition, dtype=np.float64)
    vals, vecs = np.linalg.eig(t.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return v / v.sum()


@dataclass
class StationTruth:
    id: str
    cluster: int
    base: float
    dow: np.ndarray  # 7 weekday multipliers of the station's cluster
    neighborhood: float
    deployed_on: dt.date


@dataclass
class Scenario:
    config: ScenarioConfig
    stations: List[Station]
    truth: Dict[str, StationTruth]
    centers: np.ndarray
    poi_xy: np.ndarray
    poi_cat: List[str]
    road: Dict[str, np.ndarray]
    holidays: np.ndarray
    weather: Optional[WeatherCalendar] = None
    counts: Optional[np.ndarray] = None  # (stations, days)
    orders: Optional[OrderTable] = None

    def rate(self, station_id: str, day_index: int, weather_code: int) -> float:
        t = self.truth[station_id]
        c = self.config
        day = c.start_date + dt.timedelta(days=day_index)
        hol = c.holiday_factor if self.holidays[day_index] else 1.0
        return t.base * t.dow[day.weekday()] * c.effective_weather_factors()[weather_code] * t.neighborhood * hol

    def rate_matrix(self, weather_codes: np.ndarray) -> np.ndarray:
        """Daily Poisson rates, zero outside each station's service period."""
        c = self.config
        n_days = c.span_days
        wd = (c.start_date.weekday() + np.arange(n_days)) % 7
        wf = c.effective_weather_factors()[weather_codes]
        hol = np.where(self.holidays == 1, c.holiday_factor, 1.0)
        out = np.zeros((len(self.stations), n_days))
        for i, s in enumerate(self.stations):
            t = self.truth[s.id]
            first = (s.deployed_on - c.start_date).days
            last = n_days if s.closed_on is None else (s.closed_on - c.start_date).days
            lam = t.base * t.neighborhood * t.dow[wd] * wf * hol
            out[i, max(first, 0):last] = lam[max(first, 0):last]
        return out


def _km_to_deg(center_lat: float, dy_km, dx_km):
    dlat = dy_km / KM_PER_DEG_LAT
    dlon = dx_km / (KM_PER_DEG_LAT * np.cos(np.radians(center_lat)))
    return dlat, dlon


def build_latent(config: ScenarioConfig, rng: np.random.Generator) -> Scenario:
    """Cluster layout, stations, POIs and road features (no demand yet)."""
    c = config
    mid_lat = 0.5 * (c.lat_min + c.lat_max)
    margin_lat, margin_lon = _km_to_deg(mid_lat, 1.5, 1.5)
    # keep centres off the edges, but never by more than a quarter of the box
    margin_lat = min(margin_lat, 0.25 * (c.lat_max - c.lat_min))
    margin_lon = min(margin_lon, 0.25 * (c.lon_max - c.lon_min))

    centers = []
    for _ in range(2000):
        if len(centers) == c.clusters:
            break
        lat = rng.uniform(c.lat_min + margin_lat, c.lat_max - margin_lat)
        lon = rng.uniform(c.lon_min + margin_lon, c.lon_max - margin_lon)
        if all(haversine_km(lat, lon, a, b) >= c.cluster_separation_km for a, b in centers):
            centers.append((lat, lon))
    if len(centers) < c.clusters:
        raise ScenarioError("cannot place cluster centers at the requested separation inside the bounding box")
    centers = np.array(centers)

    poi_profiles = rng.dirichlet(np.full(c.n_poi, 0.4), size=c.clusters)
    levels = rng.uniform(*c.cluster_level_range, size=c.clusters)
    dow = np.ones((c.clusters, 7))
    for k in range(c.clusters):
        weekday = 1.0 + c.weekday_jitter * rng.uniform(-1, 1, 5)
        boost = rng.uniform(*c.weekend_boost_range, size=2)
        dow[k, :5] = weekday
        dow[k, 5:] = weekday.max() * boost
        dow[k] *= levels[k]
    road_profiles = np.column_stack([
        rng.uniform(6.0, 22.0, c.clusters),    # road length within 1 km, km
        rng.uniform(15.0, 65.0, c.clusters),   # junction count
        rng.uniform(2.8, 4.8, c.clusters),     # mean junction degree
        rng.uniform(0.005, 0.05, c.clusters),  # mean betweenness centrality
    ])

    deploy_days = np.zeros(c.final_stations, dtype=int)
    n_new = c.final_stations - c.initial_stations
    if n_new:
        # spread openings over the span, leaving the last week so each has one full week
        deploy_days[c.initial_stations:] = np.sort(rng.integers(1, c.span_days - 7, size=n_new))

    stations, truth, road, placed = [], {}, {}, []
    for i in range(c.final_stations):
        k = int(rng.integers(c.clusters))
        for _ in range(500):
            dy, dx = rng.normal(0.0, c.cluster_spread_km, 2)
            dlat, dlon = _km_to_deg(centers[k, 0], dy, dx)
            lat, lon = centers[k, 0] + dlat, centers[k, 1] + dlon
            if not (c.lat_min <= lat <= c.lat_max and c.lon_min <= lon <= c.lon_max):
                continue
            if placed:
                pl = np.array(placed)
                if np.min(haversine_km(lat, lon, pl[:, 0], pl[:, 1])) < c.min_spacing_km:
                    continue
            break
        else:
            raise ScenarioError(f"cannot place station {i}: too many stations for the area at "
                                f"{c.min_spacing_km} km minimum spacing")
        placed.append((lat, lon))
        sid = f"S{i:03d}"
        docks = int(rng.integers(c.docks_min, c.docks_max + 1))
        dist = float(haversine_km(lat, lon, centers[k, 0], centers[k, 1]))
        hood = 1.0 - c.neighborhood_strength + c.neighborhood_strength * np.exp(-0.5 * (dist / c.cluster_spread_km) ** 2)
        mean_docks = 0.5 * (c.docks_min + c.docks_max)
        base = c.demand_base * (docks / mean_docks) ** c.dock_exponent * float(np.exp(c.base_noise * rng.normal()))
        deployed = c.start_date + dt.timedelta(days=int(deploy_days[i]))
        r = road_profiles[k] * (1.0 + c.road_noise * rng.normal(size=4))
        r[1] = max(round(r[1]), 1.0)
        road[sid] = np.abs(r)
        stations.append(Station(sid, float(lat), float(lon), docks, deployed, None, road_features=road[sid]))
        truth[sid] = StationTruth(sid, k, base, dow[k].copy(), float(hood), deployed)

    names = c.poi_names()
    xy, cats = [], []
    for k in range(c.clusters):
        dy = rng.normal(0.0, c.poi_spread_km, c.pois_per_cluster)
        dx = rng.normal(0.0, c.poi_spread_km, c.pois_per_cluster)
        dlat, dlon = _km_to_deg(centers[k, 0], dy, dx)
        xy.append(np.column_stack([centers[k, 0] + dlat, centers[k, 1] + dlon]))
        cats.extend(names[j] for j in rng.choice(c.n_poi, size=c.pois_per_cluster, p=poi_profiles[k]))
    n_bg = max(c.background_pois, c.n_poi)
    xy.append(np.column_stack([rng.uniform(c.lat_min, c.lat_max, n_bg), rng.uniform(c.lon_min, c.lon_max, n_bg)]))
    bg = rng.integers(c.n_poi, size=n_bg)
    bg[:c.n_poi] = np.arange(c.n_poi)  # every category appears at least once
    cats.extend(names[j] for j in bg)
    poi_xy = np.vstack(xy)

    holidays = np.zeros(c.span_days, dtype=int)
    if c.holiday_count:
        holidays[rng.choice(c.span_days, size=min(c.holiday_count, c.span_days), replace=False)] = 1

    return Scenario(c, stations, truth, centers, poi_xy, cats, road, holidays)


def simulate_weather(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    t = np.asarray(config.weather_transition, dtype=np.float64)
    codes = np.zeros(config.span_days, dtype=int)
    codes[0] = rng.choice(4, p=stationary_distribution(t))
    for d in range(1, config.span_days):
        codes[d] = rng.choice(4, p=t[codes[d - 1]])
    return codes


def simulate_counts(scenario: Scenario, rng: np.random.Generator):
    """Draw a weather path and Poisson pickups; returns (weather codes, counts)."""
    codes = simulate_weather(scenario.config, rng)
    counts = rng.poisson(scenario.rate_matrix(codes))
    return codes, counts


def _orders(scenario: Scenario, counts: np.ndarray, rng: np.random.Generator) -> OrderTable:
    c = scenario.config
    st_idx, day_idx = np.nonzero(counts)
    reps = counts[st_idx, day_idx]
    pick = np.repeat(st_idx, reps)
    day = np.repeat(day_idx, reps)
    n = len(pick)
    sec = rng.integers(0, 86400, size=n)
    dur = rng.integers(10 * 60, 180 * 60, size=n)
    alive = np.zeros((len(scenario.stations), c.span_days), dtype=bool)
    for i, s in enumerate(scenario.stations):
        first = (s.deployed_on - c.start_date).days
        last = c.span_days if s.closed_on is None else (s.closed_on - c.start_date).days
        alive[i, first:last] = True
    alive_lists = [np.flatnonzero(alive[:, d]) for d in range(c.span_days)]
    u = rng.random(n)
    drop = np.array([alive_lists[d][int(x * len(alive_lists[d]))] for d, x in zip(day, u)], dtype=int)

    order = np.lexsort((pick, sec, day))
    pick, day, sec, dur, drop = pick[order], day[order], sec[order], dur[order], drop[order]
    origin = np.datetime64(c.start_date.isoformat(), "s")
    start = origin + (day.astype(np.int64) * 86400 + sec).astype("timedelta64[s]")
    end = start + dur.astype("timedelta64[s]")
    suffix = f"+{c.utc_offset_hours:02d}:00" if c.utc_offset_hours >= 0 else f"-{-c.utc_offset_hours:02d}:00"
    start_s = [x + suffix for x in np.datetime_as_string(start, unit="s")]
    end_s = [x + suffix for x in np.datetime_as_string(end, unit="s")]
    ids = [s.id for s in scenario.stations]
    return OrderTable(
        [f"O{k:07d}" for k in range(n)],
        [ids[i] for i in pick],
        [ids[i] for i in drop],
        start_s,
        end_s,
        [c.start_date + dt.timedelta(days=int(d)) for d in day],
    )


def generate(config: ScenarioConfig) -> Scenario:
    """Build the full scenario in memory: latent structure, weather, counts, orders."""
    rng = np.random.default_rng(config.seed)
    scenario = build_latent(config, rng)
    codes, counts = simulate_counts(scenario, rng)
    scenario.weather = WeatherCalendar(config.start_date, codes, scenario.holidays.copy())
    scenario.counts = counts
    scenario.orders = _orders(scenario, counts, rng)
    return scenario


def truth_document(scenario: Scenario) -> dict:
    c = scenario.config
    return {
        "config": c.as_dict(),
        "weather_factors": [float(x) for x in c.effective_weather_factors()],
        "weather_stationary": [float(x) for x in stationary_distribution(c.weather_transition)],
        "holiday_factor": c.holiday_factor,
        "holidays": [(c.start_date + dt.timedelta(days=int(d))).isoformat() for d in np.flatnonzero(scenario.holidays)],
        "cluster_centers": [[float(a), float(b)] for a, b in scenario.centers],
        "stations": {
            sid: {
                "cluster": t.cluster,
                "base": t.base,
                "dow": [float(x) for x in t.dow],
                "neighborhood": t.neighborhood,
                "deployed_on": t.deployed_on.isoformat(),
            }
            for sid, t in scenario.truth.items()
        },
    }


def write_scenario(scenario: Scenario, out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = resolve_paths(out)
    write_stations(paths["stations"], scenario.stations)
    write_orders(paths["orders"], scenario.orders)
    write_pois(paths["poi"], scenario.poi_xy, scenario.poi_cat)
    write_road_features(paths["road"], scenario.road)
    write_weather(paths["weather"], scenario.weather)
    truth_path = out / "scenario_truth.json"
    truth_path.write_text(json.dumps(truth_document(scenario), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths["truth"] = truth_path
    return paths


def simulate(config: ScenarioConfig, out_dir) -> Dict[str, Path]:
    return write_scenario(generate(config), out_dir)


def ground_truth_expected(scenario: Scenario, station_id: str, window_start: dt.date,
                          window_end: dt.date) -> ExpectedDemand:
    """Analytic per-weekday expected demand over the inclusive window.

    Weather is marginalized with the chain's stationary distribution; the
    known holiday calendar and the station's service period are respected.
    """
    c = scenario.config
    t = scenario.truth[station_id]
    station = next(s for s in scenario.stations if s.id == station_id)
    pi = stationary_distribution(c.weather_transition)
    mean_weather = float(pi @ c.effective_weather_factors())
    totals, cover = np.zeros(7), np.zeros(7, dtype=int)
    day = max(window_start, station.deployed_on, c.start_date)
    last = min(window_end, c.end_date)
    if station.closed_on is not None:
        last = min(last, station.closed_on - dt.timedelta(days=1))
    while day <= last:
        idx = (day - c.start_date).days
        hol = c.holiday_factor if scenario.holidays[idx] else 1.0
        w = day.weekday()
        totals[w] += t.base * t.dow[w] * t.neighborhood * mean_weather * hol
        cover[w] += 1
        day += dt.timedelta(days=1)
    values = np.divide(totals, cover, out=np.zeros(7), where=cover > 0)
    return ExpectedDemand(values, cover)
