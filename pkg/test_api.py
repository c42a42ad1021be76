import sys
sys.path.insert(0, '.')

from fastapi.testclient import TestClient

from config.settings import settings
from main import app

client = TestClient(app)
API = settings.API_V1_STR

SMALL_RUN = {
    "scenario": {"kind": "LAN", "scale": 0.1, "duration": "5s"},
    "transport": {"proto": "tcp", "cc": "newreno"},
    "workload": {"object_bits": "8M"},
}

SMALL_RUN_INI = """
[scenario]
kind = LAN
scale = 0.1
duration = 5s

[transport]
proto = quic
cc = vegas

[workload]
object_bits = 8M
"""


def test_health():
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "healthy", "service": settings.APP_NAME, "version": settings.APP_VERSION}


def test_info_lists_what_can_be_run():
    body = client.get(f"{API}/info").json()
    assert body["protocols"] == ["udp", "tcp", "quic", "hpt"]
    assert body["congestion_control"] == ["newreno", "vegas", "yeah"]
    assert "MULTICAST" in body["scenarios"]
    assert set(body["endpoints"]) == {"runs", "sweeps", "compare"}


def test_run_from_json_sections():
    response = client.post(f"{API}/runs", json={"config": SMALL_RUN, "seed": 4})
    assert response.status_code == 200
    body = response.json()
    assert body["label"] == "tcp-newreno"
    assert body["config"]["scenario"]["seed"] == 4
    row = body["rows"][0]
    assert row["stats"]["defined"] is True
    assert row["stats"]["retrieval_time_s"] > 0
    assert body["files"] == []


def test_run_from_ini_text(tmp_path):
    response = client.post(f"{API}/runs", json={"config": SMALL_RUN_INI, "out": str(tmp_path)})
    assert response.status_code == 200
    body = response.json()
    assert body["rows"][0]["label"] == "quic-vegas"
    assert (tmp_path / "stats.csv").exists()


def test_invalid_config_names_the_field():
    config = {**SMALL_RUN, "transport": {"proto": "tcp", "cc": "cubic"}}
    response = client.post(f"{API}/runs", json={"config": config})
    assert response.status_code == 422
    assert response.json()["field"] == "transport.cc"


def test_sweep_requires_a_sweep_section():
    response = client.post(f"{API}/sweeps", json={"config": SMALL_RUN})
    assert response.status_code == 422
    assert response.json()["field"] == "sweep"


def test_sweep_returns_one_row_per_point():
    config = {**SMALL_RUN, "sweep": {"transport.cc": "newreno, vegas"}}
    response = client.post(f"{API}/sweeps", json={"config": config})
    assert response.status_code == 200
    assert [r["sweep"] for r in response.json()["rows"]] == [{"transport.cc": "newreno"}, {"transport.cc": "vegas"}]


def test_compare_two_transports():
    response = client.post(f"{API}/compare", json={"configs": [SMALL_RUN, SMALL_RUN_INI]})
    assert response.status_code == 200
    body = response.json()
    assert body["scenario"] == "LAN"
    assert [r["label"] for r in body["rows"]] == ["tcp-newreno", "quic-vegas"]
    assert body["verdicts"]["throughput_bps"] in {"tcp-newreno", "quic-vegas"}


def test_compare_needs_two_configs():
    response = client.post(f"{API}/compare", json={"configs": [SMALL_RUN]})
    assert response.status_code == 422
