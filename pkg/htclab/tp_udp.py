# htclab/tp_udp.py - datagram transport with a paced application sender
import logging
from collections import deque
from typing import Deque, Optional, Tuple

from htclab.metrics import MetricsCollector
from htclab.netgraph import DropReason, Packet, PacketKind, Topology, serialization_time
from htclab.sim_core import SimTime
from htclab.workload import TransferHandle

logger = logging.getLogger(__name__)

DEFAULT_PKT_SIZE = 1500


def datagram_count(object_bits: int, pkt_size: int = DEFAULT_PKT_SIZE) -> int:
    return -(-object_bits // (pkt_size * 8))


class UdpFlow:
    """Connectionless sender/receiver pair.

    The application enqueues datagrams into an unbounded pacing queue that
    drains into the first-hop link at send_rate (0 means that link's rate).
    Nothing is ever retransmitted.
    """

    def __init__(
        self,
        topo: Topology,
        metrics: MetricsCollector,
        flow_id: str,
        src: str,
        dst: str,
        port: int = 5000,
        send_rate: float = 0.0,
        pkt_size: int = DEFAULT_PKT_SIZE,
    ):
        self.topo = topo
        self.sim = topo.sim
        self.metrics = metrics
        self.flow_id = flow_id
        self.src = src
        self.dst = dst
        self.port = port
        self.pkt_size = pkt_size
        self.send_rate = send_rate or topo.first_hop(src, dst).bandwidth_bps

        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.delivered_bytes = 0
        self.last_delivery: Optional[SimTime] = None
        self.handle: Optional[TransferHandle] = None
        self._expected = 0
        self._seq = 0
        self._pacing: Deque[Tuple[int, int]] = deque()
        self._draining = False

        metrics.flow(flow_id, "udp", "")
        topo.attach(dst, port, self._on_datagram)
        topo.drop_listeners.append(self._on_drop)

    def send_datagram(self, n_bytes: int) -> int:
        """Queue one datagram for pacing; returns its sequence number"""
        seq = self._seq
        self._seq += 1
        self._pacing.append((seq, n_bytes))
        if not self._draining:
            self._draining = True
            self._drain()
        return seq

    def send_object(self, object_bits: int) -> TransferHandle:
        n = datagram_count(object_bits, self.pkt_size)
        self._expected += n
        self.handle = TransferHandle(self.flow_id, -(-object_bits // 8), self.sim.now)
        self.metrics.on_request(self.flow_id, self.sim.now)
        remaining = -(-object_bits // 8)
        for _ in range(n):
            size = min(self.pkt_size, remaining)
            self.send_datagram(size)
            remaining -= size
        logger.info("udp %s: %d datagrams queued at %.0f b/s", self.flow_id, n, self.send_rate)
        return self.handle

    def _drain(self) -> None:
        if not self._pacing:
            self._draining = False
            return
        seq, n_bytes = self._pacing.popleft()
        bits = n_bytes * 8
        pkt = Packet(
            uid=self.topo.next_uid(),
            flow_id=self.flow_id,
            src=self.src,
            dst=self.dst,
            port=self.port,
            size_bits=bits,
            kind=PacketKind.DATA,
            header=seq,
            data_key=(seq,),
        )
        self.sent += 1
        self.metrics.on_send(self.flow_id, self.sim.now, pkt.data_key, bits)
        self.topo.send(pkt)
        self.sim.schedule_in(serialization_time(bits, self.send_rate), self._drain)

    def _on_datagram(self, pkt: Packet) -> None:
        self.delivered += 1
        self.delivered_bytes += pkt.size_bits // 8
        self.last_delivery = self.sim.now
        self.metrics.on_receive(self.flow_id, self.sim.now, pkt.data_key, pkt.size_bits, pkt.sent_at)
        self._check_done()

    def _on_drop(self, pkt: Packet, reason: DropReason, t: SimTime) -> None:
        if pkt.flow_id != self.flow_id:
            return
        self.dropped += 1
        self.metrics.on_drop(self.flow_id, t, pkt.data_key, pkt.size_bits, reason.value)
        self._check_done()

    def _check_done(self) -> None:
        handle = self.handle
        if handle is None or handle.complete or self.delivered + self.dropped < self._expected:
            return
        handle.delivered_bytes = self.delivered_bytes
        done_at = self.last_delivery if self.last_delivery is not None else self.sim.now
        self.metrics.on_complete(self.flow_id, done_at)
        handle.finish(done_at)
