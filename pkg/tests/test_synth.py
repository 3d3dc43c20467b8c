import datetime as dt
import filecmp

import numpy as np
import pytest

from stationnet import config, data, graphs, synth
from stationnet.synth import ScenarioConfig, ScenarioError

from scenario_params import CONSTANT_DEMAND

SMALL = dict(initial_stations=8, final_stations=12, span_days=112, clusters=2, pois_per_cluster=40, background_pois=40)


class TestConfig:
    def test_final_below_initial(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig(initial_stations=10, final_stations=5)

    def test_span_too_short(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig(span_days=83)

    def test_transition_rows_must_sum_to_one(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig(weather_transition=((0.5, 0.5, 0, 0),) * 3 + ((0.5, 0.4, 0, 0),))

    def test_overcrowded_area_is_infeasible(self):
        cfg = ScenarioConfig(initial_stations=200, final_stations=200, clusters=1, lat_min=31.0, lat_max=31.01,
                             lon_min=121.0, lon_max=121.01, cluster_separation_km=0.0, min_spacing_km=0.5)
        with pytest.raises(ScenarioError, match="cannot place"):
            synth.generate(cfg)

    def test_key_value_round_trip(self):
        text = "# scenario\nseed = 7\nfinal_stations=90  # grow to 90\nweather_amplitude=0.5\nweekend_boost_range=1.2,1.4\n"
        cfg = config.from_mapping(ScenarioConfig, config.parse_key_values(text))
        assert (cfg.seed, cfg.final_stations, cfg.weather_amplitude) == (7, 90, 0.5)
        assert cfg.weekend_boost_range == (1.2, 1.4)

    def test_unknown_key_in_strict_mode(self):
        with pytest.raises(ValueError, match="colour"):
            config.from_mapping(ScenarioConfig, {"colour": "red"}, strict=True)

    def test_stationary_distribution(self):
        t = np.array(synth.DEFAULT_TRANSITION)
        pi = synth.stationary_distribution(t)
        np.testing.assert_allclose(pi @ t, pi, atol=1e-12)
        assert pi.sum() == pytest.approx(1.0)
        assert pi[0] + pi[1] > 0.7  # mostly sunny or overcast


class TestGenerate:
    def test_same_seed_same_files(self, tmp_path):
        a = synth.simulate(ScenarioConfig(seed=5, **SMALL), tmp_path / "a")
        b = synth.simulate(ScenarioConfig(seed=5, **SMALL), tmp_path / "b")
        for key in a:
            assert filecmp.cmp(a[key], b[key], shallow=False), key

    def test_different_seed_differs(self):
        a = synth.generate(ScenarioConfig(seed=5, **SMALL))
        b = synth.generate(ScenarioConfig(seed=6, **SMALL))
        assert not np.array_equal(a.counts, b.counts)

    def test_zero_amplitude_means_no_demand(self, tmp_path):
        sc = synth.generate(ScenarioConfig(demand_base=0.0, **SMALL))
        assert sc.counts.sum() == 0 and len(sc.orders) == 0
        synth.write_scenario(sc, tmp_path)
        assert data.load_dataset(tmp_path).demand_matrix().sum() == 0

    def test_network_grows_monotonically(self):
        sc = synth.generate(ScenarioConfig(**SMALL))
        deployed = [s.deployed_on for s in sc.stations]
        assert deployed == sorted(deployed)
        assert sum(d == sc.config.start_date for d in deployed) == SMALL["initial_stations"]
        assert all(s.closed_on is None for s in sc.stations)

    def test_weekends_exceed_weekdays(self):
        sc = synth.generate(ScenarioConfig())
        for t in sc.truth.values():
            assert t.dow[5:].min() > t.dow[:5].max()

    def test_loads_without_rejections(self, tmp_path):
        synth.simulate(ScenarioConfig(**SMALL), tmp_path)
        ds = data.load_dataset(tmp_path)
        assert ds.rejections.total == 0
        assert len(ds.stations) == SMALL["final_stations"]

    def test_counts_match_orders(self, tmp_path):
        sc = synth.generate(ScenarioConfig(**SMALL))
        synth.write_scenario(sc, tmp_path)
        np.testing.assert_array_equal(data.load_dataset(tmp_path).demand_matrix(), sc.counts)

    def test_counts_never_fall_outside_service(self):
        sc = synth.generate(ScenarioConfig(**SMALL))
        for i, s in enumerate(sc.stations):
            first = (s.deployed_on - sc.config.start_date).days
            assert sc.counts[i, :first].sum() == 0

    def test_empirical_weekday_means_converge_to_rates(self):
        sc = synth.generate(ScenarioConfig())
        lam = sc.rate_matrix(sc.weather.categories)
        wd = (sc.config.start_date.weekday() + np.arange(sc.config.span_days)) % 7
        for w in range(7):
            cols = wd == w
            for i in range(len(sc.stations)):
                live = cols & (lam[i] > 0)
                n = live.sum()
                mean_rate = lam[i, live].mean()
                sigma = np.sqrt(mean_rate / n)
                assert abs(sc.counts[i, live].mean() - mean_rate) <= 4 * sigma

    def test_pooled_weekday_means_within_three_sigma(self):
        sc = synth.generate(ScenarioConfig())
        lam = sc.rate_matrix(sc.weather.categories)
        wd = (sc.config.start_date.weekday() + np.arange(sc.config.span_days)) % 7
        for w in range(7):
            total_rate = lam[:, wd == w].sum()
            # a sum of independent Poisson counts is Poisson with the summed rate
            assert abs(sc.counts[:, wd == w].sum() - total_rate) <= 3 * np.sqrt(total_rate)

    def test_same_cluster_pois_are_more_similar(self, tmp_path):
        sc = synth.generate(ScenarioConfig())
        synth.write_scenario(sc, tmp_path)
        ds = data.load_dataset(tmp_path)
        sim = graphs.functional_graph(ds.stations)
        cl = np.array([sc.truth[s.id].cluster for s in ds.stations])
        off = ~np.eye(len(cl), dtype=bool)
        same = (cl[:, None] == cl[None, :]) & off
        assert sim[same].mean() > sim[~same & off].mean()
        for k in np.unique(cl):
            rows = cl == k
            within = sim[np.ix_(rows, rows)][off[np.ix_(rows, rows)]].mean()
            for j in np.unique(cl):
                if j != k:
                    assert within > sim[np.ix_(rows, cl == j)].mean()


class TestGroundTruth:
    def test_constant_rate(self):
        sc = synth.generate(ScenarioConfig(**dict(SMALL, **CONSTANT_DEMAND)))
        gt = synth.ground_truth_expected(sc, "S000", sc.config.start_date, sc.config.end_date)
        np.testing.assert_allclose(gt.values, np.full(7, 5.0), rtol=0, atol=1e-12)

    def test_weekend_double(self):
        cfg = dict(SMALL, **CONSTANT_DEMAND)
        cfg["weekend_boost_range"] = (2.0, 2.0)
        sc = synth.generate(ScenarioConfig(**cfg))
        gt = synth.ground_truth_expected(sc, "S003", sc.config.start_date, sc.config.end_date).values
        assert gt[5] == 2 * gt[0] and gt[6] == 2 * gt[4]

    def test_service_period_respected(self):
        sc = synth.generate(ScenarioConfig(**SMALL))
        late = sc.stations[-1]
        gt = synth.ground_truth_expected(sc, late.id, sc.config.start_date, late.deployed_on - dt.timedelta(days=1))
        assert gt.coverage.sum() == 0

    def test_monte_carlo_years(self):
        cfg = ScenarioConfig(seed=9, initial_stations=12, final_stations=12, span_days=364, clusters=2,
                             pois_per_cluster=20, background_pois=20)
        sc = synth.generate(cfg)
        rng = np.random.default_rng(123)
        total = np.zeros((12, 364))
        years = 200
        for _ in range(years):
            _, counts = synth.simulate_counts(sc, rng)
            total += counts
        mean = total / years
        wd = (cfg.start_date.weekday() + np.arange(364)) % 7
        # pooled over stations: single station-weekday cells carry ~0.5% Poisson noise on their own
        gt = sum(synth.ground_truth_expected(sc, s.id, cfg.start_date, cfg.end_date).values for s in sc.stations)
        mc = np.array([mean[:, wd == w].mean(axis=1).sum() for w in range(7)])
        np.testing.assert_allclose(mc, gt, rtol=0.01)
