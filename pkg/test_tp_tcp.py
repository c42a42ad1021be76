import pytest

from htclab.cc import CcAlgo, CongestionController
from htclab.metrics import MetricsCollector, compute_stats
from htclab.netgraph import PacketKind, ScenarioKind, TopologyParams, build_scenario
from htclab.sim_core import Simulator, seconds
from htclab.tp_quic import QuicFlow
from htclab.tp_tcp import MSS, RtoEstimator, TcpFlow, TcpState


def newreno():
    return CongestionController(CcAlgo.NEWRENO)


def payload(n: int) -> bytes:
    return bytes(i % 251 for i in range(n))


def test_object_arrives_intact(sim, metrics, lan):
    flow = TcpFlow(lan, metrics, "t", "server", "client", newreno)
    handle = flow.send_object(payload(500_000))
    sim.run_until(seconds(5))

    assert handle.complete
    assert handle.digest_ok
    assert handle.delivered_bytes == 500_000
    assert flow.receiver.rcv_nxt == 500_000
    assert flow.sender.state == TcpState.CLOSED
    lan.check_conservation()


def test_close_drains_in_closing_then_sends_fin(sim, metrics, lan):
    flow = TcpFlow(lan, metrics, "t", "server", "client", newreno)
    states = []
    handle = flow.send_object(payload(50_000))
    # runs after the flow has written the whole object and closed
    flow.sender.on_established.append(lambda conn: states.append(conn.state))
    sim.run_until(seconds(5))

    assert states == [TcpState.CLOSING]
    assert handle.complete
    assert flow.sender.state == TcpState.CLOSED
    assert flow.receiver.peer_fin == 50_000
    with pytest.raises(RuntimeError):
        flow.sender.send(b"more")


def test_handshake_costs_two_round_trips_against_one_for_quic():
    def first_data(make_flow):
        sim = Simulator(seed=1)
        topo = build_scenario(sim, ScenarioKind.LAN)
        flow = make_flow(topo, MetricsCollector())
        flow.send_object(payload(10_000))
        sim.run_until(seconds(1))
        return flow.first_data_at

    tcp = first_data(lambda topo, m: TcpFlow(topo, m, "t", "server", "client", newreno))
    quic = first_data(lambda topo, m: QuicFlow(topo, m, "q", "server", "client", newreno))
    assert quic > 0
    assert tcp == 2 * quic


def test_single_loss_stalls_in_order_delivery():
    sim = Simulator(seed=3)
    metrics = MetricsCollector()
    wan = build_scenario(sim, ScenarioKind.WAN, TopologyParams(queue_capacity=10_000))
    lost_seq = 10 * MSS
    wan.link("edge_s", "core").drop_when(
        lambda pkt: pkt.kind == PacketKind.DATA and pkt.data_key == (lost_seq,)
    )
    flow = TcpFlow(wan, metrics, "t", "server", "client", newreno)
    handle = flow.send_object(payload(200_000))
    sim.run_until(seconds(10))

    assert handle.complete and handle.digest_ok
    assert flow.sender.fast_retransmits == 1
    assert flow.sender.timeouts == 0

    next_seq = lost_seq + MSS
    first_arrival = min(r.t for r in metrics.flows["t"].recvs if r.key == str(next_seq))
    delivered_at = next(t for t, offset, _ in flow.receiver.delivery_log if offset == next_seq)
    # the segment behind the hole waits for the retransmission
    assert delivered_at - first_arrival >= wan.base_rtt("server", "client")


def test_window_bounded_by_buffers(sim, metrics, wan):
    buf = 128 * 1024
    flow = TcpFlow(wan, metrics, "t", "server", "client", newreno, snd_buf=buf, rcv_buf=buf)
    handle = flow.send_object(payload(8 * 1024 * 1024))
    sim.run_until(seconds(30))

    assert handle.complete
    stats = compute_stats(metrics.flows["t"])
    bound = buf * 8 / (wan.base_rtt("server", "client") / 1e9)
    assert 0.8 <= stats.throughput_bps / bound <= 1.0


def test_stream_mode_keeps_the_connection_open(sim, metrics, lan):
    flow = TcpFlow(lan, metrics, "t", "server", "client", newreno)
    flow.start_stream()
    sim.schedule(seconds(0.01), flow.push, payload(50_000))
    sim.run_until(seconds(1))

    assert flow.receiver.rcv_nxt == 50_000
    assert flow.sender.state == TcpState.ESTABLISHED


def test_rto_estimator_backoff_is_capped():
    rto = RtoEstimator(initial=seconds(1), minimum=seconds(0.2))
    rto.update(seconds(0.1))
    assert rto.rto >= seconds(0.2)
    for _ in range(20):
        rto.backoff()
    assert rto.rto == seconds(60)
    rto.reset_backoff()
    assert rto.rto < seconds(1)


def test_connect_twice_is_refused(sim, metrics, lan):
    flow = TcpFlow(lan, metrics, "t", "server", "client", newreno)
    flow.sender.connect()
    with pytest.raises(RuntimeError):
        flow.sender.connect()
