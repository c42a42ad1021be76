from pathlib import Path

import pytest

from htclab import harness
from htclab.cli import EXIT_CONFIG, EXIT_OK, main
from htclab.errors import ConfigError
from htclab.metrics import compute_stats
from htclab.models import FlowStats, Proto, ResultRow
from htclab.netgraph import ScenarioKind
from htclab.results import STATS_COLUMNS, result_store
from htclab.scenario import dump_scenario, expand_sweep, load_scenario, parse_scenario, set_field

SCENARIOS = Path(__file__).parent / "scenarios"

LAN_UDP = """
[scenario]
kind = LAN
scale = 0.1
duration = 5s
packet_log = true

[transport]
proto = udp

[workload]
object_bits = 8M
"""


# ====================
# Scenario files
# ====================

@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.ini")), ids=lambda p: p.stem)
def test_shipped_scenarios_survive_a_dump(path):
    config = load_scenario(path)
    assert parse_scenario(dump_scenario(config)) == config


def test_joined_sweep_keys_move_together():
    config = load_scenario(SCENARIOS / "wan_tcp_buffer_sweep.ini")
    points = expand_sweep(config)
    assert len(points) == 6
    for labels, point in points:
        assert point.transport.snd_buf == point.transport.rcv_buf
        assert list(labels) == ["transport.snd_buf+transport.rcv_buf"]
        assert point.sweep == []
    assert [p.transport.snd_buf for _, p in points][:2] == [128 * 1024, 256 * 1024]


def test_separate_sweep_keys_form_a_product(make_config):
    config = make_config(sweep={"transport.cc": "newreno, vegas", "network.queue_capacity": "10, 50, 100"})
    points = expand_sweep(config)
    assert len(points) == 6
    assert points[0][0] == {"transport.cc": "newreno", "network.queue_capacity": "10"}
    assert points[-1][1].network.queue_capacity == 100


@pytest.mark.parametrize("sections, field", [
    ({"transport": {"bogus": 1}}, "transport.bogus"),
    ({"transport": {"cc": "cubic"}}, "transport.cc"),
    ({"scenario": {"scale": 2.0}}, "scenario.scale"),
    ({"sweep": {"transport.nope": "1, 2"}}, "sweep.transport.nope"),
    ({"sweep": {"network.queue_capacity": "10, zero"}}, "network.queue_capacity"),
])
def test_invalid_configs_name_the_field(make_config, sections, field):
    with pytest.raises(ConfigError) as exc:
        make_config(**sections)
    assert exc.value.field == field


def test_broken_ini_is_a_config_error():
    with pytest.raises(ConfigError):
        parse_scenario("[scenario\nkind = LAN")


def test_set_field_validates_units(make_config):
    config = set_field(make_config(), "transport.snd_buf", "512K")
    assert config.transport.snd_buf == 512 * 1024
    with pytest.raises(ConfigError):
        set_field(config, "transport.snd_buf", "-1")


@pytest.mark.parametrize("sections", [
    {"workload": {"kind": "multicast"}},
    {"scenario": {"kind": "MULTICAST"}, "workload": {"kind": "multicast"}, "transport": {"proto": "tcp"}},
    {"transport": {"proto": "tcp", "migrate_at": "1s"}},
    {"transport": {"proto": "quic", "migrate_at": "1s"}},
    {"workload": {"best_effort_share": 0.7, "deadline_share": 0.6}},
])
def test_impossible_combinations_rejected_before_running(make_config, sections):
    with pytest.raises(ConfigError):
        harness.run(make_config(**sections))


# ====================
# Runs
# ====================

@pytest.mark.parametrize("proto", [Proto.UDP, Proto.TCP, Proto.QUIC, Proto.HPT])
def test_every_protocol_completes_a_small_object(make_config, proto):
    config = make_config(scenario={"kind": "LAN"}, transport={"proto": proto.value}, workload={"object_bits": "16M"})
    result = harness.run(config)

    row = result.rows[0]
    assert row.stats.defined
    assert row.stats.retrieval_time_s is not None
    assert row.proto == proto.value
    assert row.counters.events_pending >= 0
    assert row.counters.final_clock_ns < config.scenario.duration


def test_runs_are_reproducible(tmp_path):
    config = parse_scenario(LAN_UDP)
    first = harness.run(config, out=str(tmp_path / "a"))
    second = harness.run(config, out=str(tmp_path / "b"))

    names = sorted(Path(f).name for f in first.files)
    assert names == ["packets.csv", "stats.csv", "summary.json", "trace_cwnd.csv", "trace_queue.csv", "trace_rtt.csv"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert first.rows == second.rows


def test_seed_override_reaches_the_run(make_config):
    config = make_config(scenario={"kind": "LAN", "seed": 3}, transport={"proto": "udp"}, workload={"object_bits": "8M"})
    result = harness.run(config, seed=9)
    assert result.config["scenario"]["seed"] == 9


def test_exported_packet_log_reproduces_the_stats(tmp_path):
    result = harness.run(parse_scenario(LAN_UDP), out=str(tmp_path))
    row = result.rows[0]

    rows = result_store.read_rows(str(tmp_path / "stats.csv"))
    assert list(rows[0]) == STATS_COLUMNS
    rebuilt = compute_stats(result_store.flow_log(str(tmp_path / "packets.csv"), harness.FLOW_ID))
    for name in ("throughput_bps", "avg_delay_s", "jitter_s", "delivery_ratio", "sent_pkts", "delivered_pkts",
                 "retrieval_time_s"):
        assert getattr(rebuilt, name) == getattr(row.stats, name)
    assert rebuilt.retrieval_time_s is not None


def test_sweep_rows_follow_sweep_order(make_config, out_dir):
    config = make_config(
        scenario={"kind": "LAN"},
        transport={"proto": "tcp", "cc": "newreno"},
        workload={"object_bits": "16M"},
        sweep={"transport.snd_buf+transport.rcv_buf": "256K, 1M"},
    )
    result = harness.sweep(config, out=out_dir)

    assert [r.point for r in result.rows] == [0, 1]
    assert result.rows[0].label == "tcp-newreno[transport.snd_buf+transport.rcv_buf=256K]"
    assert (Path(out_dir) / "stats.csv").exists()


def test_sweep_needs_a_sweep_section(make_config):
    with pytest.raises(ConfigError):
        harness.sweep(make_config())


def test_compare_needs_one_scenario_kind(make_config):
    lan = make_config(scenario={"kind": "LAN"})
    wan = make_config(scenario={"kind": "WAN"})
    with pytest.raises(ConfigError) as exc:
        harness.compare([lan, wan])
    assert exc.value.field == "scenario.kind"
    with pytest.raises(ConfigError):
        harness.compare([lan])


def test_compare_reports_a_verdict_per_metric(make_config):
    common = dict(scenario={"kind": "LAN"}, workload={"object_bits": "16M"})
    tcp = make_config(transport={"proto": "tcp", "cc": "newreno"}, **common)
    quic = make_config(transport={"proto": "quic", "cc": "newreno"}, **common)
    table = harness.compare([tcp, quic])

    assert table.scenario == ScenarioKind.LAN.value
    assert [r.label for r in table.rows] == ["tcp-newreno", "quic-newreno"]
    assert set(table.verdicts) == set(harness.VERDICT_METRICS)
    assert set(table.verdicts.values()) <= {"tcp-newreno", "quic-newreno"}


def test_verdict_picks_the_highest_value_and_skips_missing():
    def row(label, throughput, retrieval):
        stats = FlowStats(flow_id="f", throughput_bps=throughput, retrieval_time_s=retrieval)
        return ResultRow(point=0, label=label, scenario="LAN", proto="tcp", cc="yeah", stats=stats)

    verdicts = harness.verdicts([row("a", 1.0, None), row("b", 2.0, None), row("c", 2.0, None)])
    assert verdicts["throughput_bps"] == "b"
    assert "retrieval_time_s" not in verdicts


def test_resumed_quic_reports_zero_rtt(make_config):
    config = make_config(
        scenario={"kind": "LAN"}, transport={"proto": "quic", "resume": True}, workload={"object_bits": "8M"},
    )
    extra = harness.run(config).rows[0].extra
    assert extra["zero_rtt"] == 1.0
    assert extra["first_data_s"] == 0.0


def test_multicast_group_row(make_config):
    config = make_config(
        scenario={"kind": "MULTICAST"}, transport={"proto": "hpt"},
        workload={"kind": "multicast", "object_bits": "24M"}, multicast={"members": 4},
    )
    extra = harness.run(config).rows[0].extra
    assert extra["members"] == 4.0
    assert extra["source_uplink_packets"] == 200.0


# ====================
# Command line
# ====================

def test_cli_missing_file_exits_with_config_error(out_dir):
    assert main(["run", "-c", "no/such/file.ini", "--out", out_dir]) == EXIT_CONFIG


def test_cli_sweep_without_sweep_section(out_dir):
    assert main(["sweep", "-c", str(SCENARIOS / "lan_udp.ini"), "--out", out_dir]) == EXIT_CONFIG


def test_cli_run_prints_the_table(tmp_path, capsys):
    path = tmp_path / "lan.ini"
    path.write_text(LAN_UDP, encoding="utf-8")
    assert main(["--log-level", "WARNING", "run", "-c", str(path), "--out", str(tmp_path / "out")]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "udp" in printed
    assert (tmp_path / "out" / "summary.json").exists()
