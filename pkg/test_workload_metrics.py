import pytest
from hypothesis import given, strategies as st

from htclab.errors import ConfigError, SimulationFault
from htclab.metrics import (
    FlowLog, MetricsCollector, PacketRecord, Trace, TraceKind, compute_stats, flow_log_from_rows,
)
from htclab.models import SegmentClass
from htclab.sim_core import millis, seconds
from htclab.units import format_rate, format_size, format_time, parse_rate, parse_size, parse_time
from htclab.workload import (
    ObjectSpec, SensorStream, SensorStreamSpec, TransferHandle, gen_object, plan_segments, split_bytes,
    tile_priority, visible_sectors,
)

# ====================
# Workloads
# ====================

def test_default_object_is_eight_equal_tiles():
    obj = gen_object(ObjectSpec())
    assert len(obj.tiles) == 8
    assert {t.bits for t in obj.tiles} == {50_000_000}
    assert obj.total_bytes == 50_000_000
    assert [min(t.view_angles) for t in obj.tiles] == list(range(8))


def test_uneven_split_goes_to_the_last_tile():
    obj = gen_object(ObjectSpec(total_bits=100, n_tiles=3))
    assert [t.bits for t in obj.tiles] == [33, 33, 34]


@pytest.mark.parametrize("kwargs, field", [
    ({"total_bits": 0}, "workload.object_bits"),
    ({"n_tiles": 0}, "workload.tiles"),
    ({"n_sectors": 0}, "workload.sectors"),
])
def test_object_spec_rejects_bad_values(kwargs, field):
    with pytest.raises(ConfigError) as exc:
        ObjectSpec(**kwargs)
    assert exc.value.field == field


def test_visible_tiles_come_first():
    obj = gen_object(ObjectSpec())
    assert [t.tile_id for t in tile_priority(obj, 100.0)] == [2, 0, 1, 3, 4, 5, 6, 7]
    assert [t.tile_id for t in tile_priority(obj, 100.0, fov=90.0)] == [1, 2, 3, 0, 4, 5, 6, 7]


def test_full_circle_sees_every_sector():
    assert visible_sectors(0.0, 360.0, 8) == frozenset(range(8))
    assert visible_sectors(-10.0, 0.0, 8) == frozenset({7})


def test_split_bytes_spreads_the_remainder():
    assert split_bytes(10, 3) == [4, 3, 3]
    assert sum(split_bytes(1_000_001, 8)) == 1_000_001


@given(
    st.integers(min_value=1, max_value=200),
    st.floats(min_value=0.0, max_value=0.5),
    st.floats(min_value=0.0, max_value=0.5),
)
def test_segment_classes_track_their_shares(n, best_effort, deadline):
    plan = plan_segments(n * 100, 100, best_effort, deadline)
    assert len(plan) == n
    shares = {
        SegmentClass.RELIABLE: 1.0 - best_effort - deadline,
        SegmentClass.BEST_EFFORT: best_effort,
        SegmentClass.DEADLINE: deadline,
    }
    counts = {cls: 0 for cls in SegmentClass}
    for i, (seg_id, size, cls) in enumerate(plan, start=1):
        assert seg_id == i - 1 and size == 100
        counts[cls] += 1
        for c, share in shares.items():
            assert abs(counts[c] - share * i) <= 1.0 + 1e-9


def test_segment_shares_above_one_rejected():
    with pytest.raises(ConfigError):
        plan_segments(1000, 100, 0.6, 0.5)


def test_sensor_stream_emits_every_frame(sim):
    frames = []
    spec = SensorStreamSpec(n_sensors=8, per_sensor_rate=40e6, fps=25)
    stream = SensorStream(sim, spec, lambda sensor, frame_no, n: frames.append((sim.now, sensor, frame_no, n)), seconds(1))
    stream.start()
    sim.run_until(seconds(2))

    assert stream.frames_emitted == 8 * 25
    assert {n for *_, n in frames} == {200_000}
    assert max(t for t, *_ in frames) == millis(960)
    assert spec.aggregate_rate == 320e6
    assert spec.raw_rate == 70e6 * 25


def test_transfer_handle_fires_once():
    handle = TransferHandle("f", 10, 0)
    fired = []
    handle.on_complete.append(fired.append)
    handle.finish(5)
    handle.finish(7)
    assert handle.completed_at == 5
    assert fired == [handle]


# ====================
# Statistics
# ====================

def _log(delays_ms, spacing_ms=1):
    log = FlowLog("f", "udp")
    for i, delay in enumerate(delays_ms):
        sent = millis(i * spacing_ms)
        log.sends.append(PacketRecord(sent, "send", "f", str(i), 8_000, False, sent))
        log.recvs.append(PacketRecord(sent + millis(delay), "recv", "f", str(i), 8_000, False, sent))
    return log


def test_jitter_is_mean_absolute_delay_difference():
    stats = compute_stats(_log([10, 12, 10]))
    assert stats.jitter_s == pytest.approx(0.002)
    assert stats.avg_delay_s == pytest.approx(0.032 / 3)
    assert stats.delivery_ratio == 1.0
    assert stats.defined


def test_throughput_counts_distinct_data_units():
    log = _log([10, 10])
    # a duplicate arrival adds nothing
    log.recvs.append(PacketRecord(millis(20), "recv", "f", "1", 8_000, False, millis(1)))
    log.sends.append(PacketRecord(millis(2), "send", "f", "2", 8_000, True, millis(2)))
    stats = compute_stats(log)
    assert stats.delivered_bits == 16_000
    assert stats.throughput_bps == pytest.approx(16_000 / 0.011)
    assert stats.sent_pkts == 3
    assert stats.retransmissions == 1
    assert stats.delivery_ratio == pytest.approx(2 / 3)


def test_nothing_delivered_leaves_stats_undefined():
    log = FlowLog("f")
    log.sends.append(PacketRecord(0, "send", "f", "0", 8_000))
    stats = compute_stats(log)
    assert not stats.defined
    assert stats.throughput_bps == 0.0


def test_retrieval_time_from_request_to_completion():
    log = _log([5])
    log.request_at = millis(1)
    log.completed_at = millis(51)
    assert compute_stats(log).retrieval_time_s == pytest.approx(0.05)


def test_rows_rebuild_the_same_log():
    log = _log([10, 12, 10])
    rows = [
        {"flow": "f", "t_ns": str(r.t), "event": r.event, "key": r.key, "bits": str(r.bits),
         "retransmit": "1" if r.retransmit else "0", "sent_at_ns": str(r.sent_at)}
        for r in log.sends + log.recvs
    ]
    rows.append({"flow": "other", "t_ns": "0", "event": "send", "key": "9", "bits": "1",
                 "retransmit": "0", "sent_at_ns": "0"})
    rebuilt = flow_log_from_rows("f", rows)
    assert compute_stats(rebuilt) == compute_stats(log).model_copy(update={"proto": ""})


def test_exported_rows_carry_request_and_completion():
    collector = MetricsCollector()
    collector.on_request("f", millis(1))
    collector.on_send("f", millis(1), (0,), 8_000)
    collector.on_receive("f", millis(6), (0,), 8_000, millis(1))
    collector.on_complete("f", millis(6))

    exported = list(collector.packet_rows())
    assert [r.event for r in exported] == ["request", "send", "recv", "complete"]
    rows = [
        {"flow": r.flow_id, "t_ns": str(r.t), "event": r.event, "key": r.key, "bits": str(r.bits),
         "retransmit": "1" if r.retransmit else "0", "sent_at_ns": str(r.sent_at)}
        for r in exported
    ]
    rebuilt = flow_log_from_rows("f", rows)
    assert (rebuilt.request_at, rebuilt.completed_at) == (millis(1), millis(6))
    assert compute_stats(rebuilt).retrieval_time_s == pytest.approx(0.005)
    assert len(rebuilt.sends) == len(rebuilt.recvs) == 1
    assert rebuilt.drops == []


def test_trace_time_average_is_step_weighted():
    trace = Trace(TraceKind.QUEUE, "q")
    trace.append(0, 10)
    trace.append(10, 20)
    assert trace.time_average(0, 20) == pytest.approx(15.0)
    assert trace.time_average(5, 15) == pytest.approx(15.0)
    assert trace.time_average(20, 20) == 0.0


def test_trace_replaces_same_time_and_refuses_the_past():
    trace = Trace(TraceKind.CWND, "c")
    trace.append(5, 1)
    trace.append(5, 2)
    assert trace.values == [2.0]
    with pytest.raises(SimulationFault):
        trace.append(4, 3)


# ====================
# Units
# ====================

def test_unit_parsing():
    assert parse_size("128K") == 131_072
    assert parse_size("4M") == 4 * 1024 * 1024
    assert parse_rate("400M") == 400e6
    assert parse_rate("1Gbps") == 1e9
    assert parse_time("25ms") == 25_000_000
    assert parse_time("2") == 2_000_000_000
    with pytest.raises(ValueError):
        parse_size("lots")


def test_unit_formatting_is_parseable():
    assert parse_size(format_size(2 * 1024 * 1024)) == 2 * 1024 * 1024
    assert format_rate(425e6) == "425M"
    assert format_time(500_000) == "500us"


@given(st.integers(min_value=0, max_value=2**40))
def test_sizes_and_times_reparse_exactly(n):
    assert parse_size(format_size(n)) == n
    assert parse_time(format_time(n)) == n


@given(st.integers(min_value=1, max_value=10**6), st.sampled_from([1, 1e3, 1e6, 1e9]))
def test_round_rates_reparse_exactly(n, factor):
    rate = float(n * factor)
    assert parse_rate(format_rate(rate)) == rate
