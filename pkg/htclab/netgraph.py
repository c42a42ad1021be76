# htclab/netgraph.py - packets, links, drop-tail queues and the canned topologies
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple

import networkx as nx
from pydantic import BaseModel, Field, ValidationError, model_validator

from htclab.errors import ConfigError, SchedulingError, SimulationFault
from htclab.sim_core import Rng, SimTime, Simulator, micros, millis
from htclab.units import NS_PER_SEC

logger = logging.getLogger(__name__)

DEFAULT_QUEUE_CAPACITY = 100


class PacketKind(str, Enum):
    DATA = "DATA"
    ACK = "ACK"
    CONTROL = "CONTROL"


class DropReason(str, Enum):
    QUEUE_FULL = "QueueFull"
    WIRELESS_LOSS = "WirelessLoss"
    FORCED_LOSS = "ForcedLoss"
    UNROUTABLE = "Unroutable"


class ScenarioKind(str, Enum):
    LAN = "LAN"
    WAN = "WAN"
    WAN_WIFI = "WAN_WIFI"
    MULTICAST = "MULTICAST"


@dataclass(slots=True)
class Packet:
    uid: int
    flow_id: str
    src: str
    dst: str
    port: int
    size_bits: int
    kind: PacketKind
    header: Any = None
    sent_at: SimTime = 0
    data_key: Optional[Tuple[Any, ...]] = None


@dataclass(slots=True)
class DeliveryOutcome:
    admitted: bool
    drop_reason: Optional[DropReason] = None
    # Known up front only for wired links; wireless retries decide it later.
    arrival_at: Optional[SimTime] = None
    attempts: int = 1


@dataclass(frozen=True, slots=True)
class WirelessModel:
    p_loss: float
    max_retries: int
    retry_delay: SimTime

    def __post_init__(self):
        if not 0.0 <= self.p_loss <= 1.0:
            raise ConfigError("wireless.p_loss", f"must be within [0, 1], got {self.p_loss}")
        if self.max_retries < 0:
            raise ConfigError("wireless.max_retries", "must be >= 0")
        if self.retry_delay < 0:
            raise ConfigError("wireless.retry_delay", "must be >= 0")

    @property
    def residual_loss(self) -> float:
        return self.p_loss ** (self.max_retries + 1)

    def draw_attempts(self, rng: Rng) -> Optional[int]:
        """Return the 1-based attempt that succeeds, or None if all attempts fail"""
        for attempt in range(1, self.max_retries + 2):
            if not rng.bernoulli(self.p_loss):
                return attempt
        return None


def wireless_transmit(model: WirelessModel, pkt: Packet, t: SimTime, rng: Rng) -> DeliveryOutcome:
    """Resolve the link-layer retries for one packet whose first attempt would arrive at t"""
    attempt = model.draw_attempts(rng)
    if attempt is None:
        return DeliveryOutcome(False, DropReason.WIRELESS_LOSS, None, model.max_retries + 1)
    return DeliveryOutcome(True, None, t + (attempt - 1) * model.retry_delay, attempt)


def serialization_time(size_bits: int, bandwidth_bps: float) -> SimTime:
    return -(-size_bits * NS_PER_SEC // int(bandwidth_bps))


class DropTailQueue:
    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY):
        if capacity < 1:
            raise ConfigError("network.queue_capacity", "must be >= 1")
        self.capacity = capacity
        self._items: Deque[Packet] = deque()
        self.drops = 0

    def __len__(self) -> int:
        return len(self._items)

    @property
    def occupancy(self) -> int:
        return len(self._items)

    def offer(self, pkt: Packet) -> bool:
        if len(self._items) >= self.capacity:
            self.drops += 1
            return False
        self._items.append(pkt)
        return True

    def pop(self) -> Packet:
        return self._items.popleft()


class Link:
    """Unidirectional link: drop-tail queue, serializer and propagation delay.

    The packet in serialization does not count toward queue occupancy.
    With a wireless model attached, failed attempts hold the channel for
    retry_delay each before the next attempt.
    """

    def __init__(
        self,
        sim: Simulator,
        src: str,
        dst: str,
        bandwidth_bps: float,
        prop_delay: SimTime,
        queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
        impairment: Optional[WirelessModel] = None,
        rng: Optional[Rng] = None,
    ):
        if bandwidth_bps <= 0:
            raise ConfigError("network.bandwidth", f"link {src}->{dst} needs a positive rate")
        if prop_delay < 0:
            raise ConfigError("network.prop_delay", f"link {src}->{dst} has a negative delay")
        if impairment is not None and rng is None:
            raise ConfigError("wireless", f"link {src}->{dst} has an impairment but no rng")
        self.sim = sim
        self.src = src
        self.dst = dst
        self.name = f"{src}->{dst}"
        self.bandwidth_bps = bandwidth_bps
        self.prop_delay = prop_delay
        self.queue = DropTailQueue(queue_capacity)
        self.impairment = impairment
        self.rng = rng

        self.deliver: Callable[["Link", Packet], None] = lambda link, pkt: None
        self.on_drop: Callable[["Link", Packet, DropReason], None] = lambda link, pkt, reason: None
        self.monitor: Optional[Callable[[SimTime, int], None]] = None

        self._busy = False
        self._wired_free_at: SimTime = 0
        self._forced: List[List[Any]] = []

        self.packets_sent = 0
        self.bits_sent = 0
        self.busy_time: SimTime = 0
        # past the transmitter, not yet handed to the far node
        self.in_propagation = 0

    @property
    def occupancy(self) -> int:
        return self.queue.occupancy

    @property
    def busy(self) -> bool:
        return self._busy

    def drop_when(self, predicate: Callable[[Packet], bool], count: int = 1) -> None:
        """Drop the next `count` packets matching predicate as they go on the wire"""
        self._forced.append([predicate, count])

    def transmit(self, pkt: Packet, t: Optional[SimTime] = None) -> DeliveryOutcome:
        if t is not None and t != self.sim.now:
            raise SchedulingError(f"{self.name}: transmit at {t}ns but the clock is {self.sim.now}ns")
        if pkt.size_bits <= 0:
            raise SimulationFault(f"{self.name}: packet {pkt.uid} has size {pkt.size_bits}")

        ser = serialization_time(pkt.size_bits, self.bandwidth_bps)
        if not self._busy:
            self._start_service(pkt)
            arrival = None if self.impairment else self.sim.now + ser + self.prop_delay
            return DeliveryOutcome(True, None, arrival)

        if not self.queue.offer(pkt):
            self.on_drop(self, pkt, DropReason.QUEUE_FULL)
            self._sample()
            return DeliveryOutcome(False, DropReason.QUEUE_FULL)
        self._sample()
        arrival = None
        if self.impairment is None:
            self._wired_free_at += ser
            arrival = self._wired_free_at + self.prop_delay
        return DeliveryOutcome(True, None, arrival)

    def _sample(self) -> None:
        if self.monitor is not None:
            self.monitor(self.sim.now, self.queue.occupancy)

    def _forced_loss(self, pkt: Packet) -> bool:
        for rule in self._forced:
            if rule[1] > 0 and rule[0](pkt):
                rule[1] -= 1
                return True
        return False

    def _start_service(self, pkt: Packet) -> None:
        now = self.sim.now
        self._busy = True
        ser = serialization_time(pkt.size_bits, self.bandwidth_bps)
        self.packets_sent += 1
        self.bits_sent += pkt.size_bits

        if self._forced_loss(pkt):
            hold, outcome = ser, DeliveryOutcome(False, DropReason.FORCED_LOSS)
        elif self.impairment is not None:
            outcome = wireless_transmit(self.impairment, pkt, now + ser + self.prop_delay, self.rng)
            hold = ser + (outcome.attempts - 1) * self.impairment.retry_delay
        else:
            hold, outcome = ser, DeliveryOutcome(True, None, now + ser + self.prop_delay)

        self._wired_free_at = max(self._wired_free_at, now + hold)
        self.busy_time += hold
        self.sim.schedule(now + hold, self._finish_service, pkt, outcome)

    def _finish_service(self, pkt: Packet, outcome: DeliveryOutcome) -> None:
        if outcome.admitted:
            self.in_propagation += 1
            self.sim.schedule(outcome.arrival_at, self._arrive, pkt)
        else:
            self.on_drop(self, pkt, outcome.drop_reason)
        self._busy = False
        if self.queue.occupancy:
            nxt = self.queue.pop()
            self._sample()
            self._start_service(nxt)

    def _arrive(self, pkt: Packet) -> None:
        self.in_propagation -= 1
        self.deliver(self, pkt)


def transmit(link: Link, pkt: Packet, t: SimTime) -> DeliveryOutcome:
    return link.transmit(pkt, t)


class Node:
    def __init__(self, name: str):
        self.name = name
        self.endpoints: Dict[int, Callable[[Packet], None]] = {}
        self.routes: Dict[str, Link] = {}


@dataclass
class TopologyCounters:
    injected: int = 0
    delivered: int = 0
    drops: Dict[str, int] = field(default_factory=lambda: {reason.value: 0 for reason in DropReason})

    @property
    def dropped(self) -> int:
        return sum(self.drops.values())


class Topology:
    """Directed graph of nodes and links with static shortest-delay routing"""

    def __init__(self, sim: Simulator, kind: ScenarioKind):
        self.sim = sim
        self.kind = kind
        self.graph = nx.DiGraph()
        self.nodes: Dict[str, Node] = {}
        self.links: Dict[Tuple[str, str], Link] = {}
        self.counters = TopologyCounters()
        self.bottleneck: Optional[Link] = None
        self.client = "client"
        self.server = "server"
        self.drop_listeners: List[Callable[[Packet, DropReason, SimTime], None]] = []
        self._uid = 0
        self._local_pending = 0

    def add_node(self, name: str) -> Node:
        if name not in self.nodes:
            self.nodes[name] = Node(name)
            self.graph.add_node(name)
        return self.nodes[name]

    def connect(
        self,
        a: str,
        b: str,
        bandwidth_bps: float,
        prop_delay: SimTime,
        queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
        impairment: Optional[WirelessModel] = None,
        impair_directions: Tuple[bool, bool] = (True, True),
    ) -> Tuple[Link, Link]:
        """Create the two unidirectional links of a duplex connection"""
        self.add_node(a)
        self.add_node(b)
        pair = []
        for (src, dst), impaired in zip(((a, b), (b, a)), impair_directions):
            model = impairment if impaired else None
            rng = self.sim.rng(f"link/{src}->{dst}") if model is not None else None
            link = Link(self.sim, src, dst, bandwidth_bps, prop_delay, queue_capacity, model, rng)
            link.deliver = self._on_link_arrival
            link.on_drop = self._on_link_drop
            self.links[(src, dst)] = link
            self.graph.add_edge(src, dst, delay=prop_delay, link=link)
            pair.append(link)
        self._route_all()
        return pair[0], pair[1]

    def link(self, src: str, dst: str) -> Link:
        return self.links[(src, dst)]

    def _route_all(self) -> None:
        for name, node in self.nodes.items():
            paths = nx.single_source_dijkstra_path(self.graph, name, weight="delay")
            node.routes = {
                dst: self.links[(name, path[1])] for dst, path in paths.items() if len(path) > 1
            }

    def path(self, src: str, dst: str) -> List[Link]:
        nodes = nx.dijkstra_path(self.graph, src, dst, weight="delay")
        return [self.links[(u, v)] for u, v in zip(nodes, nodes[1:])]

    def base_rtt(self, a: str, b: str, size_bits: int = 12_000, ack_bits: int = 320) -> SimTime:
        """Unloaded round trip of one data packet and its acknowledgement"""
        forward = sum(l.prop_delay + serialization_time(size_bits, l.bandwidth_bps) for l in self.path(a, b))
        back = sum(l.prop_delay + serialization_time(ack_bits, l.bandwidth_bps) for l in self.path(b, a))
        return forward + back

    def first_hop(self, node: str, dst: str) -> Link:
        return self.nodes[node].routes[dst]

    def attach(self, node: str, port: int, handler: Callable[[Packet], None]) -> None:
        endpoints = self.add_node(node).endpoints
        if port in endpoints:
            raise ConfigError("topology", f"port {port} on {node} is already bound")
        endpoints[port] = handler

    def next_uid(self) -> int:
        self._uid += 1
        return self._uid

    def send(self, pkt: Packet) -> DeliveryOutcome:
        """Inject a packet at its source node"""
        self.counters.injected += 1
        pkt.sent_at = self.sim.now
        if pkt.dst == pkt.src:
            self._local_pending += 1
            self.sim.schedule(self.sim.now, self._deliver_loopback, pkt)
            return DeliveryOutcome(True, None, self.sim.now)
        link = self.nodes[pkt.src].routes.get(pkt.dst) if pkt.src in self.nodes else None
        if link is None:
            self._record_drop(pkt, DropReason.UNROUTABLE)
            return DeliveryOutcome(False, DropReason.UNROUTABLE)
        return link.transmit(pkt)

    def _on_link_arrival(self, link: Link, pkt: Packet) -> None:
        if link.dst == pkt.dst:
            self._deliver_local(pkt)
            return
        nxt = self.nodes[link.dst].routes.get(pkt.dst)
        if nxt is None:
            self._record_drop(pkt, DropReason.UNROUTABLE)
            return
        nxt.transmit(pkt)

    def _deliver_loopback(self, pkt: Packet) -> None:
        self._local_pending -= 1
        self._deliver_local(pkt)

    def _deliver_local(self, pkt: Packet) -> None:
        handler = self.nodes[pkt.dst].endpoints.get(pkt.port)
        if handler is None:
            self._record_drop(pkt, DropReason.UNROUTABLE)
            return
        self.counters.delivered += 1
        handler(pkt)

    def _on_link_drop(self, link: Link, pkt: Packet, reason: DropReason) -> None:
        self._record_drop(pkt, reason)

    def _record_drop(self, pkt: Packet, reason: DropReason) -> None:
        self.counters.drops[reason.value] += 1
        logger.debug("drop uid=%d flow=%s reason=%s", pkt.uid, pkt.flow_id, reason.value)
        for listener in self.drop_listeners:
            listener(pkt, reason, self.sim.now)

    def in_flight(self) -> int:
        return self.counters.injected - self.counters.delivered - self.counters.dropped

    def packets_held(self) -> int:
        """Packets some link or loopback delivery currently holds"""
        on_links = sum(
            l.occupancy + (1 if l.busy else 0) + l.in_propagation for l in self.links.values()
        )
        return on_links + self._local_pending

    def check_conservation(self) -> None:
        """injected == delivered + dropped + held, at any instant"""
        held = self.packets_held()
        if self.in_flight() != held:
            raise SimulationFault(
                f"packet conservation violated: {self.in_flight()} in flight but {held} held"
            )


class TopologyParams(BaseModel):
    """Physical parameters of the canned topologies (rates in bits/s, times in ns)"""

    lan_rate: float = Field(400e6, gt=0)
    lan_prop: int = Field(micros(100), ge=0)
    wan_bottleneck_rate: float = Field(400e6, gt=0)
    wan_access_rate: float = Field(1e9, gt=0)
    wan_one_way: int = Field(millis(25), gt=0)
    access_prop: int = Field(micros(500), ge=0)
    # None means the wifi hop runs at wan_access_rate
    wifi_rate: Optional[float] = Field(None, gt=0)
    p_loss: float = Field(0.2, ge=0.0, le=1.0)
    max_retries: int = Field(7, ge=0)
    retry_delay: int = Field(micros(500), ge=0)
    impairment_enabled: bool = True
    downlink_loss: float = Field(0.0, ge=0.0, le=1.0)
    queue_capacity: int = Field(DEFAULT_QUEUE_CAPACITY, ge=1)
    dual_homed: bool = False
    members: int = Field(4, ge=1)
    scale: float = Field(1.0, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_wan_split(self) -> "TopologyParams":
        if self.wan_one_way <= 2 * self.access_prop:
            raise ValueError("wan_one_way must exceed the two access hops")
        return self

    @classmethod
    def build(cls, **values: Any) -> "TopologyParams":
        try:
            return cls(**values)
        except ValidationError as exc:
            first = exc.errors()[0]
            field_name = ".".join(str(part) for part in first["loc"]) or "wan_one_way"
            raise ConfigError(f"network.{field_name}", first["msg"]) from exc


def _downlink_model(params: TopologyParams) -> Optional[WirelessModel]:
    if params.downlink_loss <= 0.0:
        return None
    return WirelessModel(params.downlink_loss, 0, 0)


def _build_lan(topo: Topology, p: TopologyParams) -> None:
    rate = p.lan_rate * p.scale
    topo.connect("client", "switch", rate, p.lan_prop, p.queue_capacity, _downlink_model(p), (False, True))
    topo.connect("server", "switch", rate, p.lan_prop, p.queue_capacity)
    topo.bottleneck = topo.link("server", "switch")


def _build_wan(topo: Topology, p: TopologyParams, wifi: bool) -> None:
    access = p.wan_access_rate * p.scale
    core = p.wan_bottleneck_rate * p.scale
    core_prop = (p.wan_one_way - 2 * p.access_prop) // 2
    topo.connect("server", "edge_s", access, p.access_prop, p.queue_capacity)
    topo.connect("edge_s", "core", core, core_prop, p.queue_capacity)
    topo.connect("core", "edge_c", core, p.wan_one_way - 2 * p.access_prop - core_prop, p.queue_capacity)
    topo.bottleneck = topo.link("edge_s", "core")

    if wifi and p.impairment_enabled:
        model = WirelessModel(p.p_loss, p.max_retries, p.retry_delay)
        rate = (p.wifi_rate or p.wan_access_rate) * p.scale
        topo.connect("edge_c", "client", rate, p.access_prop, p.queue_capacity, model)
    else:
        # with the impairment off the last hop is the plain WAN access link
        topo.connect("edge_c", "client", access, p.access_prop, p.queue_capacity, _downlink_model(p), (True, False))
    if wifi and p.dual_homed:
        # Wired second interface of the same host, reached through its own edge switch.
        topo.connect("core", "edge_w", core, p.wan_one_way - 2 * p.access_prop - core_prop, p.queue_capacity)
        topo.connect("edge_w", "client_eth", access, p.access_prop, p.queue_capacity)


def _build_multicast(topo: Topology, p: TopologyParams) -> None:
    access = p.wan_access_rate * p.scale
    core = p.wan_bottleneck_rate * p.scale
    core_prop = p.wan_one_way - 2 * p.access_prop
    topo.connect("source", "gateway", access, p.access_prop, p.queue_capacity)
    topo.bottleneck = topo.link("source", "gateway")
    model = _downlink_model(p)
    for i in range(p.members):
        topo.connect("gateway", f"edge{i}", core, core_prop, p.queue_capacity)
        topo.connect(f"edge{i}", f"member{i}", access, p.access_prop, p.queue_capacity, model, (True, False))
    topo.server = "source"
    topo.client = "member0"


def build_scenario(sim: Simulator, kind: ScenarioKind, params: Optional[TopologyParams] = None) -> Topology:
    params = params or TopologyParams()
    topo = Topology(sim, ScenarioKind(kind))
    if topo.kind == ScenarioKind.LAN:
        _build_lan(topo, params)
    elif topo.kind == ScenarioKind.WAN:
        _build_wan(topo, params, wifi=False)
    elif topo.kind == ScenarioKind.WAN_WIFI:
        _build_wan(topo, params, wifi=True)
    else:
        _build_multicast(topo, params)
    logger.info(
        "built %s topology: %d nodes, %d links, bottleneck %s",
        topo.kind.value, len(topo.nodes), len(topo.links),
        topo.bottleneck.name if topo.bottleneck else "-",
    )
    return topo
