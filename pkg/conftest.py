import sys

import pytest

sys.path.insert(0, '.')

from htclab.metrics import MetricsCollector
from htclab.models import ScenarioConfig
from htclab.netgraph import ScenarioKind, TopologyParams, build_scenario
from htclab.scenario import scenario_from_mapping
from htclab.sim_core import Simulator


@pytest.fixture
def sim():
    return Simulator(seed=7)


@pytest.fixture
def metrics():
    return MetricsCollector(packet_log=True)


@pytest.fixture
def lan(sim):
    return build_scenario(sim, ScenarioKind.LAN)


@pytest.fixture
def wan(sim):
    return build_scenario(sim, ScenarioKind.WAN)


@pytest.fixture
def small_wan(sim):
    """WAN at a tenth of the rates, as the desk-scale scenarios use"""
    return build_scenario(sim, ScenarioKind.WAN, TopologyParams(scale=0.1))


@pytest.fixture
def make_config():
    def _make(**sections) -> ScenarioConfig:
        data = {"scenario": {"scale": 0.1, "duration": "30s"}}
        for name, values in sections.items():
            data.setdefault(name, {}).update(values)
        return scenario_from_mapping(data)
    return _make


@pytest.fixture
def out_dir(tmp_path):
    return str(tmp_path / "out")
