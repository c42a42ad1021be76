import math

import pytest
from hypothesis import given, settings as hyp_settings, strategies as st

from htclab.errors import ConfigError, SchedulingError, SimulationFault
from htclab.netgraph import (
    DropReason, Link, Packet, PacketKind, ScenarioKind, TopologyParams, WirelessModel,
    build_scenario, serialization_time, wireless_transmit,
)
from htclab.sim_core import Rng, Simulator, micros, millis


def _packet(topo, src="server", dst="client", size_bits=12_000, port=9):
    return Packet(topo.next_uid(), "f", src, dst, port, size_bits, PacketKind.DATA, data_key=(0,))


def test_serialization_time_rounds_up():
    assert serialization_time(12_000, 1e9) == 12_000
    assert serialization_time(1, 3e9) == 1


def test_lan_one_packet_latency(sim, lan):
    arrivals = []
    lan.attach("client", 9, lambda pkt: arrivals.append(sim.now))
    lan.send(_packet(lan))
    sim.run_until(millis(10))
    hop = serialization_time(12_000, 400e6) + micros(100)
    assert arrivals == [2 * hop]


def test_wan_base_rtt_is_one_way_twice_plus_serialization(wan):
    rtt = wan.base_rtt("server", "client")
    assert millis(50) < rtt < millis(51)


def test_drop_tail_counts_only_waiting_packets(sim, lan):
    delivered = []
    lan.attach("client", 9, delivered.append)
    for _ in range(200):
        lan.send(_packet(lan))
    sim.run_until(millis(100))
    # one in service, a full queue of 100, the rest dropped at the first hop
    assert len(delivered) == 101
    assert lan.counters.drops[DropReason.QUEUE_FULL.value] == 99
    lan.check_conservation()


@hyp_settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=300), st.integers(min_value=1, max_value=50))
def test_queue_never_exceeds_capacity(n_packets, capacity):
    sim = Simulator()
    link = Link(sim, "a", "b", 1e6, 0, capacity)
    peak = []
    link.monitor = lambda t, occupancy: peak.append(occupancy)
    for i in range(n_packets):
        link.transmit(Packet(i, "f", "a", "b", 1, 8_000, PacketKind.DATA))
    sim.run_until(10 ** 12)
    assert max(peak, default=0) <= capacity
    assert link.occupancy == 0


def test_transmit_at_wrong_time_is_rejected(sim, lan):
    with pytest.raises(SchedulingError):
        lan.link("server", "switch").transmit(_packet(lan), t=5)


def test_forced_loss_hits_only_matching_packets(sim, lan):
    got = []
    lan.attach("client", 9, lambda pkt: got.append(pkt.data_key))
    lan.link("server", "switch").drop_when(lambda pkt: pkt.data_key == (1,))
    for seq in range(3):
        pkt = _packet(lan)
        pkt.data_key = (seq,)
        lan.send(pkt)
    sim.run_until(millis(10))
    assert got == [(0,), (2,)]
    assert lan.counters.drops[DropReason.FORCED_LOSS.value] == 1


def test_unroutable_destination_is_a_drop(sim, lan):
    outcome = lan.send(_packet(lan, dst="nowhere"))
    assert not outcome.admitted
    assert outcome.drop_reason == DropReason.UNROUTABLE


def test_wireless_retry_model():
    model = WirelessModel(0.2, 7, micros(500))
    assert model.residual_loss == pytest.approx(0.2 ** 8)
    assert WirelessModel(0.0, 3, 0).draw_attempts(Rng(1, "w")) == 1
    assert WirelessModel(1.0, 3, 0).draw_attempts(Rng(1, "w")) is None
    with pytest.raises(ConfigError):
        WirelessModel(1.5, 0, 0)


def test_wifi_hop_adds_retry_delay(sim):
    params = TopologyParams(p_loss=1.0, max_retries=2)
    topo = build_scenario(sim, ScenarioKind.WAN_WIFI, params)
    lost = []
    topo.drop_listeners.append(lambda pkt, reason, t: lost.append((reason, t)))
    topo.send(_packet(topo))
    sim.run_until(millis(100))

    *wired, wifi = topo.path("server", "client")
    at_edge = sum(serialization_time(12_000, l.bandwidth_bps) + l.prop_delay for l in wired)
    # three failed attempts hold the channel for the frame plus two retry gaps
    expected = at_edge + serialization_time(12_000, wifi.bandwidth_bps) + 2 * params.retry_delay
    assert lost == [(DropReason.WIRELESS_LOSS, expected)]


def test_wifi_retry_arrival_is_shifted_by_the_failed_attempts():
    model = WirelessModel(0.5, 7, micros(500))
    rng = Rng(3, "w")
    for _ in range(50):
        outcome = wireless_transmit(model, None, millis(1), rng)
        if outcome.admitted:
            assert outcome.arrival_at == millis(1) + (outcome.attempts - 1) * micros(500)
        else:
            assert outcome.attempts == 8


@pytest.mark.parametrize("p_loss, max_retries", [(0.5, 2), (0.2, 1), (0.7, 3)])
def test_residual_loss_matches_the_closed_form(p_loss, max_retries):
    model = WirelessModel(p_loss, max_retries, 0)
    rng = Rng(5, "residual")
    draws = 20_000
    lost = sum(model.draw_attempts(rng) is None for _ in range(draws))
    expected = model.residual_loss
    sigma = math.sqrt(expected * (1 - expected) / draws)
    assert abs(lost / draws - expected) <= 4 * sigma


def _client_arrivals(kind, **params):
    sim = Simulator(seed=11)
    topo = build_scenario(sim, kind, TopologyParams(impairment_enabled=False, **params))
    arrivals = []
    topo.attach("client", 9, lambda pkt: arrivals.append((sim.now, pkt.uid)))
    for _ in range(20):
        topo.send(_packet(topo))
    sim.run_until(millis(200))
    return arrivals, dict(topo.counters.drops)


@pytest.mark.parametrize("params", [{}, {"wifi_rate": 50e6}, {"downlink_loss": 0.3}])
def test_wifi_without_impairment_is_the_wan(params):
    wan = _client_arrivals(ScenarioKind.WAN, **params)
    wifi = _client_arrivals(ScenarioKind.WAN_WIFI, **params)
    assert wifi == wan
    assert wan[0]


def test_wifi_rate_defaults_to_the_access_rate(sim):
    topo = build_scenario(sim, ScenarioKind.WAN_WIFI, TopologyParams(scale=0.5))
    assert topo.link("edge_c", "client").bandwidth_bps == 1e9 * 0.5
    slow = build_scenario(Simulator(), ScenarioKind.WAN_WIFI, TopologyParams(wifi_rate=100e6))
    assert slow.link("edge_c", "client").bandwidth_bps == 100e6


def test_conservation_holds_while_packets_propagate(sim, wan):
    for _ in range(50):
        wan.send(_packet(wan))
    # mid-way through the 12ms core hops
    sim.run_until(millis(10))
    assert wan.packets_held() == 50
    assert sum(l.in_propagation for l in wan.links.values()) > 0
    wan.check_conservation()
    sim.run_until(millis(200))
    assert wan.packets_held() == 0
    wan.check_conservation()


def test_conservation_catches_a_link_that_swallows_packets(sim, lan):
    lan.link("switch", "client").deliver = lambda link, pkt: None
    lan.attach("client", 9, lambda pkt: None)
    for _ in range(5):
        lan.send(_packet(lan))
    sim.run_until(millis(50))
    with pytest.raises(SimulationFault):
        lan.check_conservation()


def test_loopback_delivery_is_held_until_it_fires(sim, lan):
    got = []
    lan.attach("server", 9, got.append)
    lan.send(_packet(lan, dst="server"))
    assert lan.packets_held() == 1
    lan.check_conservation()
    sim.run_until(millis(1))
    assert len(got) == 1
    lan.check_conservation()


def test_wan_split_must_leave_room_for_the_core():
    with pytest.raises(ConfigError):
        TopologyParams.build(wan_one_way=micros(500), access_prop=micros(500))


def test_port_can_be_bound_once(lan):
    lan.attach("client", 9, lambda pkt: None)
    with pytest.raises(ConfigError):
        lan.attach("client", 9, lambda pkt: None)


def test_multicast_topology_shape(sim):
    topo = build_scenario(sim, ScenarioKind.MULTICAST, TopologyParams(members=3))
    assert topo.server == "source"
    assert [n for n in topo.nodes if n.startswith("member")] == ["member0", "member1", "member2"]
    assert [l.name for l in topo.path("source", "member2")] == [
        "source->gateway", "gateway->edge2", "edge2->member2",
    ]


def test_dual_homed_client_has_a_wired_path(sim):
    topo = build_scenario(sim, ScenarioKind.WAN_WIFI, TopologyParams(dual_homed=True))
    assert "client_eth" in topo.nodes
    assert topo.path("server", "client_eth")[-1].impairment is None
