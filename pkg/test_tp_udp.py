from htclab.netgraph import DropReason
from htclab.sim_core import seconds
from htclab.tp_udp import UdpFlow, datagram_count


def test_datagram_count_rounds_up():
    assert datagram_count(1500 * 8) == 1
    assert datagram_count(1500 * 8 + 1) == 2
    assert datagram_count(400_000_000) == 33_334


def test_paced_at_link_rate_delivers_everything(sim, metrics, lan):
    flow = UdpFlow(lan, metrics, "u", "server", "client")
    handle = flow.send_object(100 * 1500 * 8)
    sim.run_until(seconds(1))

    assert flow.sent == 100
    assert flow.delivered == 100
    assert flow.dropped == 0
    assert handle.complete
    assert handle.delivered_bytes == 100 * 1500
    lan.check_conservation()


def test_overdriven_sender_loses_at_the_first_hop(sim, metrics, lan):
    flow = UdpFlow(lan, metrics, "u", "server", "client", send_rate=800e6)
    handle = flow.send_object(1000 * 1500 * 8)
    sim.run_until(seconds(1))

    assert flow.dropped > 0
    assert flow.delivered + flow.dropped == flow.sent == 1000
    assert lan.counters.drops[DropReason.QUEUE_FULL.value] == flow.dropped
    assert handle.complete
    # nothing is ever sent twice
    assert all(not rec.retransmit for rec in metrics.flows["u"].sends)


def test_last_datagram_carries_the_remainder(sim, metrics, lan):
    flow = UdpFlow(lan, metrics, "u", "server", "client")
    handle = flow.send_object((1500 + 100) * 8)
    sim.run_until(seconds(1))

    assert [rec.bits for rec in metrics.flows["u"].sends] == [1500 * 8, 100 * 8]
    assert handle.delivered_bytes == 1600
