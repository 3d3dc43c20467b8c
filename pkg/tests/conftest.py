import re

import pytest

from stationnet import data, synth

from scenario_params import CONSTANT_DEMAND


def scenario_dataset(tmp_path_factory, name, **overrides):
    cfg = synth.ScenarioConfig(**overrides)
    out = tmp_path_factory.mktemp(name)
    synth.simulate(cfg, out)
    return data.load_dataset(out)


@pytest.fixture(scope="session")
def tiny_constant(tmp_path_factory):
    """16 stations whose true expected demand is 5.0 every day."""
    return scenario_dataset(tmp_path_factory, "tiny_constant", seed=3, initial_stations=10, final_stations=16,
                            span_days=140, **CONSTANT_DEMAND)


@pytest.fixture(scope="session")
def constant_network(tmp_path_factory):
    return scenario_dataset(tmp_path_factory, "constant", seed=3, initial_stations=30, final_stations=40,
                            span_days=196, **CONSTANT_DEMAND)


@pytest.fixture(scope="session")
def tiny_varied(tmp_path_factory):
    """Small scenario with weather, weekly profiles and an expanding network."""
    return scenario_dataset(tmp_path_factory, "tiny_varied", seed=11, initial_stations=8, final_stations=14,
                            span_days=126, clusters=2, pois_per_cluster=40, background_pois=40)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the recorded measurements."""
    criteria = {}
    reports = [(outcome, rep) for outcome in ("passed", "failed", "error")
               for rep in terminalreporter.stats.get(outcome, [])]
    for outcome, rep in sorted(reports, key=lambda r: getattr(r[1], "nodeid", "")):
        m = re.search(r"test_acceptance\.py::test_criterion_(\d)", getattr(rep, "nodeid", ""))
        if not m or (rep.when != "call" and outcome == "passed"):
            continue
        entry = criteria.setdefault(int(m.group(1)), {"ok": True, "details": []})
        entry["ok"] &= outcome == "passed"
        mark = "" if outcome == "passed" else "[failed] "
        entry["details"] += [mark + v for k, v in rep.user_properties if k == "detail"]
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(criteria):
        entry = criteria[n]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  " + " | ".join(entry["details"]))
