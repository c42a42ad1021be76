from collections import defaultdict

import pytest

from htclab.cc import CcAlgo, CongestionController
from htclab.metrics import MetricsCollector
from htclab.netgraph import Packet, PacketKind, ScenarioKind, TopologyParams, build_scenario
from htclab.sim_core import Simulator, millis, seconds
from htclab.tp_quic import (
    MAX_PAYLOAD, STREAM_FRAME_OVERHEAD, AckFrame, QuicFlow, QuicStream, RoundRobinScheduler, StreamFrame,
    TicketStore,
)


def newreno():
    return CongestionController(CcAlgo.NEWRENO)


def payload(n: int) -> bytes:
    return bytes(i % 251 for i in range(n))


def first_arrivals(metrics, flow_id):
    first = {}
    for rec in metrics.flows[flow_id].recvs:
        first.setdefault(rec.key, rec.t)
    return first


def test_object_split_over_streams_arrives_intact(sim, metrics, lan):
    flow = QuicFlow(lan, metrics, "q", "server", "client", newreno, n_streams=4)
    handle = flow.send_object(payload(1_000_001))
    sim.run_until(seconds(5))

    assert handle.complete
    assert handle.digest_ok
    assert handle.delivered_bytes == 1_000_001
    assert sorted(flow.fin_at) == [0, 1, 2, 3]
    assert max(flow.fin_at.values()) == handle.completed_at
    assert flow.stream_done_at(0) is not None
    lan.check_conservation()


def test_full_frames_fill_one_packet():
    stream = QuicStream(0, 10_000, 10_000, 10_000)
    stream.write(payload(5_000), fin=True)
    frame = stream.cut_frame(MAX_PAYLOAD - STREAM_FRAME_OVERHEAD, 1_000_000)
    assert len(frame.data) == 1452
    assert frame.size == MAX_PAYLOAD
    assert not frame.fin


def test_stream_reassembly_returns_contiguous_chunks():
    stream = QuicStream(0, 0, 10_000, 10_000)
    assert stream.on_frame(StreamFrame(0, 4, b"efgh")) == []
    assert stream.on_frame(StreamFrame(0, 0, b"abcd")) == [(0, b"abcd"), (4, b"efgh")]
    stream.on_frame(StreamFrame(0, 8, b"", fin=True))
    assert stream.finished


def test_ack_frame_ranges():
    ack = AckFrame(((10, 12), (3, 5)))
    assert ack.largest == 12
    assert ack.acks(4) and ack.acks(11)
    assert not ack.acks(7)


def test_round_robin_rotates_over_streams():
    streams = [QuicStream(i, 0, 0, 0) for i in range(3)]
    scheduler = RoundRobinScheduler()
    picks = [scheduler.pick(streams).stream_id for _ in range(5)]
    assert picks == [0, 1, 2, 0, 1]
    assert scheduler.pick([]) is None


def test_loss_on_one_stream_does_not_block_another():
    sim = Simulator(seed=5)
    metrics = MetricsCollector()
    wan = build_scenario(sim, ScenarioKind.WAN, TopologyParams(queue_capacity=10_000))
    hole = 10 * 1452

    def first_copy_of_hole(pkt):
        if pkt.kind != PacketKind.DATA:
            return False
        return any(
            isinstance(f, StreamFrame) and f.stream_id == 0 and f.offset >= hole and not f.retransmit
            for f in pkt.header.frames
        )

    wan.link("edge_s", "core").drop_when(first_copy_of_hole)
    flow = QuicFlow(wan, metrics, "q", "server", "client", newreno, n_streams=2)
    handle = flow.send_object(payload(400_000))
    sim.run_until(seconds(10))

    assert handle.complete and handle.digest_ok
    assert flow.sender.packets_lost >= 1

    first = first_arrivals(metrics, "q")
    waited = defaultdict(list)
    for t, stream_id, offset, _ in flow.receiver.stream_log:
        waited[stream_id].append(t - first[f"{stream_id}:{offset}"])
    assert waited[1] and all(w == 0 for w in waited[1])
    assert max(waited[0]) > 0


def test_first_connection_takes_one_round_trip(sim, metrics, lan):
    tickets = TicketStore()
    flow = QuicFlow(lan, metrics, "q", "server", "client", newreno, tickets=tickets)
    flow.send_object(payload(10_000))
    sim.run_until(seconds(1))

    assert flow.sender.connected_at > 0
    assert not flow.sender.zero_rtt
    assert flow.sender.handshake_packets == 1
    # a completed handshake leaves a ticket for the next connection
    assert tickets.lookup("server", "client") is not None


def test_resumed_connection_sends_at_time_zero(sim, metrics, lan):
    tickets = TicketStore()
    tickets.issue("server", "client")
    flow = QuicFlow(lan, metrics, "q", "server", "client", newreno, tickets=tickets)
    handle = flow.send_object(payload(10_000), resume=True)
    sim.run_until(seconds(1))

    assert flow.sender.zero_rtt
    assert flow.first_data_at == 0
    assert metrics.flows["q"].sends[0].t == 0
    assert handle.complete and handle.digest_ok


def test_resume_without_ticket_falls_back(sim, metrics, lan):
    flow = QuicFlow(lan, metrics, "q", "server", "client", newreno, tickets=TicketStore())
    handle = flow.send_object(payload(10_000), resume=True)
    sim.run_until(seconds(1))

    assert not flow.sender.zero_rtt
    assert flow.first_data_at > 0
    assert handle.complete


def test_connection_survives_a_move_to_the_wired_interface(sim, metrics):
    topo = build_scenario(sim, ScenarioKind.WAN_WIFI, TopologyParams(scale=0.1, p_loss=0.0, dual_homed=True))
    flow = QuicFlow(topo, metrics, "q", "server", "client", newreno)
    flow.receiver.bind("client_eth")
    handle = flow.send_object(payload(4 * 1024 * 1024))
    sim.schedule(millis(150), flow.receiver.migrate, "client_eth")
    sim.run_until(seconds(30))

    assert flow.receiver.local == "client_eth"
    assert flow.sender.peer == "client_eth"
    assert len(flow.receiver.migrations) == 1
    assert len(flow.sender.migrations) == 1
    assert handle.complete and handle.digest_ok
    # no second handshake
    assert flow.sender.handshake_packets == 1


def test_connect_twice_is_refused(sim, metrics, lan):
    flow = QuicFlow(lan, metrics, "q", "server", "client", newreno)
    flow.sender.connect()
    with pytest.raises(RuntimeError):
        flow.sender.connect()


def test_migration_needs_an_established_connection(sim, metrics):
    topo = build_scenario(sim, ScenarioKind.WAN_WIFI, TopologyParams(scale=0.1, p_loss=0.0, dual_homed=True))
    flow = QuicFlow(topo, metrics, "q", "server", "client", newreno)
    flow.receiver.bind("client_eth")
    with pytest.raises(RuntimeError):
        flow.receiver.migrate("client_eth")

    flow.send_object(payload(100_000))
    sim.run_until(millis(150))
    with pytest.raises(RuntimeError):
        flow.receiver.migrate("nowhere")
    assert flow.receiver.migrations == []


def test_receiver_drops_data_beyond_the_connection_limit(metrics, lan):
    flow = QuicFlow(lan, metrics, "q", "server", "client", newreno, max_data=64 * 1024)
    receiver = flow.receiver
    receiver.on_stream_data = None

    def arrive(stream_id, offset, n):
        pkt = Packet(lan.next_uid(), "q", "server", "client", 443, (n + 40) * 8, PacketKind.DATA)
        receiver._on_stream_frame(pkt, StreamFrame(stream_id, offset, payload(n)))

    # a hole at offset 0 keeps stream 0 undelivered, so no credit comes back
    arrive(0, 1_000, 40_000)
    arrive(1, 1_000, 30_000)
    assert receiver.flow_control_violations == 1
    assert receiver.data_received == 41_000

    arrive(2, 0, 64 * 1024 - 41_000)
    assert receiver.flow_control_violations == 1
    assert receiver.data_received == 64 * 1024


def test_well_behaved_sender_never_trips_the_connection_limit(sim, metrics, lan):
    flow = QuicFlow(lan, metrics, "q", "server", "client", newreno, n_streams=4, max_data=64 * 1024)
    handle = flow.send_object(payload(1_000_000))
    sim.run_until(seconds(5))

    assert handle.complete and handle.digest_ok
    assert flow.receiver.flow_control_violations == 0
    assert flow.receiver.data_received == 1_000_000
