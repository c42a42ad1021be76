# htclab/tp_quic.py - multi-stream transport with per-stream ordering
#
# Packet numbers are never reused; lost frames are re-sent inside new
# packets. Loss detection follows the packet and time thresholds with a
# probe timeout. Flow-control credit (MAX_DATA / MAX_STREAM_DATA) is a
# transport parameter and is independent of the per-stream send buffers.
import bisect
import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple

from htclab.cc import CongestionController, LossKind
from htclab.metrics import MetricsCollector, TraceKind
from htclab.netgraph import Packet, PacketKind, Topology
from htclab.sim_core import EventHandle, SimTime, millis, seconds, to_seconds
from htclab.workload import TransferHandle, split_bytes

logger = logging.getLogger(__name__)

QUIC_HEADER_BYTES = 40
STREAM_FRAME_OVERHEAD = 8
MAX_PACKET_BYTES = 1500
MAX_PAYLOAD = MAX_PACKET_BYTES - QUIC_HEADER_BYTES
HANDSHAKE_BYTES = 64
PACKET_THRESHOLD = 3
TIME_THRESHOLD = 9 / 8
GRANULARITY = millis(1)
INITIAL_RTT = millis(333)
MAX_ACK_RANGES = 32
PERSISTENT_CONGESTION_PTOS = 3


class QuicState(str, Enum):
    IDLE = "Idle"
    HANDSHAKING = "Handshaking"
    ESTABLISHED = "Established"
    CLOSED = "Closed"


# ====================
# Frames
# ====================

@dataclass(slots=True)
class StreamFrame:
    stream_id: int
    offset: int
    data: bytes
    fin: bool = False
    retransmit: bool = False
    # Message-mode metadata (segment id, class, deadline, chunk index...).
    tag: Any = None

    @property
    def size(self) -> int:
        return len(self.data) + STREAM_FRAME_OVERHEAD


@dataclass(slots=True)
class AckFrame:
    # (low, high) inclusive, highest range first
    ranges: Tuple[Tuple[int, int], ...]

    @property
    def size(self) -> int:
        return 8 + 4 * len(self.ranges)

    @property
    def largest(self) -> int:
        return self.ranges[0][1]

    def acks(self, pkt_num: int) -> bool:
        for low, high in self.ranges:
            if low <= pkt_num <= high:
                return True
        return False


@dataclass(slots=True)
class MaxDataFrame:
    maximum: int
    size: int = 8


@dataclass(slots=True)
class MaxStreamDataFrame:
    stream_id: int
    maximum: int
    size: int = 12


@dataclass(slots=True)
class PathChallengeFrame:
    token: int
    size: int = 9


@dataclass(slots=True)
class PathResponseFrame:
    token: int
    size: int = 9


@dataclass(slots=True)
class HandshakeFrame:
    resume: bool = False
    reply: bool = False
    size: int = HANDSHAKE_BYTES - QUIC_HEADER_BYTES


_PROBING = (PathChallengeFrame, PathResponseFrame)


@dataclass(slots=True)
class QuicPacket:
    conn_id: int
    pkt_num: int
    frames: List[Any]

    @property
    def size_bytes(self) -> int:
        return QUIC_HEADER_BYTES + sum(f.size for f in self.frames)

    @property
    def ack_eliciting(self) -> bool:
        return any(not isinstance(f, AckFrame) for f in self.frames)


@dataclass(slots=True)
class SentPacket:
    pkt_num: int
    sent_at: SimTime
    size: int
    frames: List[Any]


class RttEstimator:
    def __init__(self):
        self.latest: Optional[SimTime] = None
        self.smoothed: float = float(INITIAL_RTT)
        self.var: float = INITIAL_RTT / 2.0
        self.min: Optional[SimTime] = None
        self.samples = 0

    def update(self, sample: SimTime) -> None:
        self.latest = sample
        self.min = sample if self.min is None else min(self.min, sample)
        if self.samples == 0:
            self.smoothed = float(sample)
            self.var = sample / 2.0
        else:
            self.var = 0.75 * self.var + 0.25 * abs(self.smoothed - sample)
            self.smoothed = 0.875 * self.smoothed + 0.125 * sample
        self.samples += 1

    @property
    def pto(self) -> SimTime:
        return int(self.smoothed + max(4.0 * self.var, GRANULARITY))


class TicketStore:
    """Resumption tickets issued by servers, keyed by (client, server)"""

    def __init__(self):
        self._tickets: Dict[Tuple[str, str], int] = {}
        self._next = 1

    def issue(self, client: str, server: str) -> int:
        ticket = self._next
        self._next += 1
        self._tickets[(client, server)] = ticket
        return ticket

    def lookup(self, client: str, server: str) -> Optional[int]:
        return self._tickets.get((client, server))


# ====================
# Streams
# ====================

class QuicStream:
    def __init__(self, stream_id: int, send_capacity: int, recv_window: int, peer_window: int, priority: int = 0):
        self.stream_id = stream_id
        self.priority = priority
        # send side: only data not yet handed to a packet lives here
        self.send_capacity = send_capacity
        self._pending = bytearray()
        self._pending_start = 0
        self.next_offset = 0
        self.fin_requested = False
        self.fin_sent = False
        self.peer_max_stream_data = peer_window
        # receive side
        self.recv_window = recv_window
        self.local_max_stream_data = recv_window
        self.delivered_offset = 0
        self.fin_offset: Optional[int] = None
        self._chunks: Dict[int, bytes] = {}
        self.buffered_bytes = 0

    @property
    def pending_len(self) -> int:
        return len(self._pending) - self._pending_start

    @property
    def write_space(self) -> int:
        return max(self.send_capacity - self.pending_len, 0)

    @property
    def credit(self) -> int:
        return self.peer_max_stream_data - self.next_offset

    @property
    def finished(self) -> bool:
        return self.fin_offset is not None and self.delivered_offset >= self.fin_offset

    def has_data(self) -> bool:
        return self.pending_len > 0 or (self.fin_requested and not self.fin_sent)

    def sendable(self, conn_credit: int) -> bool:
        if self.pending_len > 0:
            return self.credit > 0 and conn_credit > 0
        return self.fin_requested and not self.fin_sent

    def write(self, data: bytes, fin: bool = False) -> int:
        if self.fin_requested:
            raise RuntimeError(f"stream {self.stream_id}: write after fin")
        n = min(self.write_space, len(data))
        if n:
            self._pending += data[:n]
        if fin and n == len(data):
            self.fin_requested = True
        return n

    def cut_frame(self, max_bytes: int, conn_credit: int) -> Optional[StreamFrame]:
        n = min(self.pending_len, max_bytes, self.credit, conn_credit)
        if n <= 0 and not (self.fin_requested and not self.fin_sent and self.pending_len == 0):
            return None
        n = max(n, 0)
        start = self._pending_start
        data = bytes(self._pending[start:start + n])
        self._pending_start += n
        if self._pending_start >= 65536 and 2 * self._pending_start >= len(self._pending):
            del self._pending[:self._pending_start]
            self._pending_start = 0
        frame = StreamFrame(self.stream_id, self.next_offset, data)
        self.next_offset += n
        if self.fin_requested and self.pending_len == 0:
            frame.fin = True
            self.fin_sent = True
        return frame

    def on_frame(self, frame: StreamFrame) -> List[Tuple[int, bytes]]:
        """Buffer a received frame; return the newly contiguous chunks"""
        if frame.fin:
            self.fin_offset = frame.offset + len(frame.data)
        delivered = []
        if frame.data and frame.offset >= self.delivered_offset and frame.offset not in self._chunks:
            self._chunks[frame.offset] = frame.data
            self.buffered_bytes += len(frame.data)
        while self.delivered_offset in self._chunks:
            chunk = self._chunks.pop(self.delivered_offset)
            self.buffered_bytes -= len(chunk)
            delivered.append((self.delivered_offset, chunk))
            self.delivered_offset += len(chunk)
        return delivered


class RoundRobinScheduler:
    """Rotates over streams with sendable data, one frame per turn"""

    def __init__(self):
        self._last = -1

    def pick(self, candidates: List[QuicStream]) -> Optional[QuicStream]:
        if not candidates:
            return None
        ordered = sorted(candidates, key=lambda s: s.stream_id)
        for stream in ordered:
            if stream.stream_id > self._last:
                self._last = stream.stream_id
                return stream
        self._last = ordered[0].stream_id
        return ordered[0]


@dataclass
class _PendingChallenge:
    token: int
    local: str
    sent_at: SimTime
    timer: Optional[EventHandle] = None


# ====================
# Connection
# ====================

class QuicConnection:
    def __init__(
        self,
        topo: Topology,
        metrics: MetricsCollector,
        flow_id: str,
        local: str,
        peer: str,
        port: int,
        cc: CongestionController,
        conn_id: int = 1,
        buf: int = 4 * 1024 * 1024,
        n_streams: int = 8,
        max_data: int = 64 * 1024 * 1024,
        max_stream_data: int = 16 * 1024 * 1024,
        scheduler: Any = None,
        tickets: Optional[TicketStore] = None,
        handshake_timeout: SimTime = seconds(1),
        traced: bool = True,
    ):
        self.topo = topo
        self.sim = topo.sim
        self.metrics = metrics
        self.flow_id = flow_id
        self.local = local
        self.peer = peer
        self.port = port
        self.cc = cc
        self.conn_id = conn_id
        self.buf = buf
        self.n_streams = n_streams
        self.max_data = max_data
        self.max_stream_data = max_stream_data
        self.scheduler = scheduler or RoundRobinScheduler()
        self.tickets = tickets
        self.state = QuicState.IDLE
        self.rtt = RttEstimator()

        self.streams: Dict[int, QuicStream] = {}
        self.resumption_ticket: Optional[int] = None
        self.zero_rtt = False

        # send side
        self.pkt_num_next = 0
        self._sent: Dict[int, SentPacket] = {}
        self._sent_order: Deque[int] = deque()
        self.bytes_in_flight = 0
        self.largest_acked = -1
        self._last_eliciting_at: SimTime = 0
        self._recovery_start: SimTime = -1
        self._loss_time: Optional[SimTime] = None
        self._timer: Optional[EventHandle] = None
        self.pto_count = 0
        self._rtx: Deque[Any] = deque()
        self._control: List[Any] = []
        self.peer_max_data = max_data
        self.data_sent = 0
        self._flushing = False

        # receive side
        self._recv_ranges: List[List[int]] = []
        self.local_max_data = max_data
        self.data_delivered = 0
        # sum over streams of the highest offset received, checked against local_max_data
        self.data_received = 0
        self._recv_high: Dict[int, int] = {}
        self.flow_control_violations = 0

        # handshake
        self._hs_timer: Optional[EventHandle] = None
        self._hs_timeout = handshake_timeout
        self._hs_sent_at: SimTime = 0
        self._hs_retried = False
        self._hs_done = False
        self.connected_at: Optional[SimTime] = None

        # migration
        self._challenge: Optional[_PendingChallenge] = None
        self._next_token = 1
        self.migrations: List[Tuple[SimTime, str]] = []

        # counters
        self.packets_sent = 0
        self.packets_lost = 0
        self.handshake_packets = 0
        self.foreign_packets = 0
        self.stream_log: List[Tuple[SimTime, int, int, int]] = []

        self.on_established: List[Callable[["QuicConnection"], None]] = []
        self.on_stream_data: Optional[Callable[[int, int, bytes], None]] = None
        self.on_stream_fin: Optional[Callable[[int], None]] = None
        self.on_writable: Optional[Callable[[QuicStream], None]] = None
        self.on_migrated: List[Callable[["QuicConnection", str], None]] = []

        self.traced = traced
        if traced:
            cc.on_change = self._trace_cwnd
        self.bind(local)

    def bind(self, address: str) -> None:
        """Receive this connection's packets at an additional local address"""
        self.topo.attach(address, self.port, self.on_packet)

    # ------------------------------------------------------------------
    # streams and application interface
    # ------------------------------------------------------------------
    def open_stream(self, stream_id: Optional[int] = None, priority: int = 0) -> QuicStream:
        if stream_id is None:
            stream_id = len(self.streams)
        stream = self.streams.get(stream_id)
        if stream is None:
            stream = self._new_stream(stream_id, priority)
        stream.priority = priority
        self._rebalance_buffers()
        return stream

    def _new_stream(self, stream_id: int, priority: int = 0) -> QuicStream:
        stream = QuicStream(stream_id, self.buf, self.max_stream_data, self.max_stream_data, priority)
        self.streams[stream_id] = stream
        return stream

    def _rebalance_buffers(self) -> None:
        # the application send buffer is split equally across open streams
        share = max(self.buf // max(len(self.streams), 1), 1)
        for stream in self.streams.values():
            stream.send_capacity = share

    def write(self, stream_id: int, data: bytes, fin: bool = False) -> int:
        stream = self.streams.get(stream_id) or self.open_stream(stream_id)
        n = stream.write(data, fin)
        if n or fin:
            self.flush()
        return n

    # ------------------------------------------------------------------
    # handshake
    # ------------------------------------------------------------------
    def connect(self, resume: bool = False) -> None:
        if self.state != QuicState.IDLE:
            raise RuntimeError(f"quic {self.flow_id}: connect() in state {self.state.value}")
        if resume:
            ticket = self.tickets.lookup(self.local, self.peer) if self.tickets else None
            if ticket is None:
                logger.warning("quic %s: no resumption ticket for %s, falling back to 1-RTT", self.flow_id, self.peer)
            else:
                self.resumption_ticket = ticket
                self.zero_rtt = True
        self.state = QuicState.HANDSHAKING
        self._send_handshake()
        if self.zero_rtt:
            self._establish()

    def _send_handshake(self) -> None:
        self._hs_sent_at = self.sim.now
        self.handshake_packets += 1
        self._send_raw(QuicPacket(self.conn_id, -1, [HandshakeFrame(resume=self.zero_rtt)]))
        self.sim.cancel(self._hs_timer)
        self._hs_timer = self.sim.schedule_in(self._hs_timeout, self._on_handshake_timeout)

    def _on_handshake_timeout(self) -> None:
        if self._hs_done:
            return
        logger.info("quic %s: handshake timed out, resending", self.flow_id)
        self._hs_retried = True
        self._hs_timeout *= 2
        self._send_handshake()

    def _on_handshake(self, pkt: Packet, frame: HandshakeFrame) -> None:
        if not frame.reply:
            self.handshake_packets += 1
            self._send_raw(QuicPacket(self.conn_id, -1, [HandshakeFrame(resume=frame.resume, reply=True)]), dst=pkt.src)
            if self.state == QuicState.IDLE:
                self.state = QuicState.ESTABLISHED
            return
        if self._hs_done:
            return
        self._hs_done = True
        self.sim.cancel(self._hs_timer)
        if not self._hs_retried:
            self.rtt.update(self.sim.now - self._hs_sent_at)
        if self.tickets is not None:
            self.tickets.issue(self.local, self.peer)
        if self.state == QuicState.HANDSHAKING:
            self._establish()

    def _establish(self) -> None:
        self.state = QuicState.ESTABLISHED
        self.connected_at = self.sim.now
        logger.debug("quic %s established at %.6fs (0-RTT=%s)", self.flow_id, to_seconds(self.sim.now), self.zero_rtt)
        for callback in self.on_established:
            callback(self)
        self.flush()

    # ------------------------------------------------------------------
    # packetization
    # ------------------------------------------------------------------
    def _conn_credit(self) -> int:
        return self.peer_max_data - self.data_sent

    def _sendable_streams(self) -> List[QuicStream]:
        credit = self._conn_credit()
        return [s for s in self.streams.values() if s.sendable(credit)]

    def next_frame(self, space: int = MAX_PAYLOAD) -> Optional[StreamFrame]:
        """Ask the scheduler for the next stream and cut one frame from it"""
        stream = self.scheduler.pick(self._sendable_streams())
        if stream is None:
            return None
        frame = stream.cut_frame(space - STREAM_FRAME_OVERHEAD, self._conn_credit())
        if frame is None:
            return None
        self.data_sent += len(frame.data)
        if self.on_writable is not None and stream.write_space > 0 and not stream.fin_requested:
            self.on_writable(stream)
        return frame

    def _has_sendable(self) -> bool:
        return bool(self._control or self._rtx or self._sendable_streams())

    def _build_frames(self) -> List[Any]:
        space = MAX_PAYLOAD
        frames: List[Any] = []
        while self._control and self._control[0].size <= space:
            frame = self._control.pop(0)
            frames.append(frame)
            space -= frame.size
        while self._rtx and self._rtx[0].size <= space:
            frame = self._rtx.popleft()
            if self._before_retransmit(frame):
                frames.append(frame)
                space -= frame.size
        while space > STREAM_FRAME_OVERHEAD:
            frame = self.next_frame(space)
            if frame is None:
                break
            frames.append(frame)
            space -= frame.size
        return frames

    def _before_retransmit(self, frame: StreamFrame) -> bool:
        """Whether a queued retransmission is still worth sending"""
        return True

    def _on_frames_acked(self, frames: List[Any]) -> None:
        pass

    def flush(self, probe: bool = False) -> None:
        if self._flushing or self.state != QuicState.ESTABLISHED:
            return
        self._flushing = True
        try:
            while self._has_sendable():
                cwnd_bytes = self.cc.cwnd * MAX_PACKET_BYTES
                if not probe and self.bytes_in_flight > 0 and self.bytes_in_flight + MAX_PACKET_BYTES > cwnd_bytes:
                    break
                frames = self._build_frames()
                if not frames:
                    break
                self._send_packet(frames)
                if probe:
                    break
        finally:
            self._flushing = False

    def _send_packet(self, frames: List[Any]) -> None:
        now = self.sim.now
        pn = self.pkt_num_next
        self.pkt_num_next += 1
        packet = QuicPacket(self.conn_id, pn, frames)
        size = packet.size_bytes
        if packet.ack_eliciting:
            self._sent[pn] = SentPacket(pn, now, size, [f for f in frames if not isinstance(f, AckFrame)])
            self._sent_order.append(pn)
            self.bytes_in_flight += size
            self._last_eliciting_at = now
        for frame in frames:
            if isinstance(frame, StreamFrame):
                self.metrics.on_send(self.flow_id, now, (frame.stream_id, frame.offset), len(frame.data) * 8, frame.retransmit)
        self._send_raw(packet)
        self._arm_timer()

    def _send_raw(self, packet: QuicPacket, dst: Optional[str] = None, src: Optional[str] = None) -> None:
        kind = PacketKind.DATA if any(isinstance(f, StreamFrame) for f in packet.frames) else PacketKind.CONTROL
        if len(packet.frames) == 1 and isinstance(packet.frames[0], AckFrame):
            kind = PacketKind.ACK
        size = HANDSHAKE_BYTES if packet.pkt_num < 0 else packet.size_bytes
        pkt = Packet(
            self.topo.next_uid(), self.flow_id, src or self.local, dst or self.peer, self.port,
            size * 8, kind, packet,
        )
        self.packets_sent += 1
        self.topo.send(pkt)

    def _send_ack(self, dst: Optional[str] = None) -> None:
        ranges = tuple((low, high) for low, high in reversed(self._recv_ranges[-MAX_ACK_RANGES:]))
        frames: List[Any] = [AckFrame(ranges)]
        if self._control:
            # flow-control updates ride along and make the packet ack-eliciting
            frames.extend(self._control)
            self._control = []
            self._send_packet(frames)
            return
        self._send_raw(QuicPacket(self.conn_id, self.pkt_num_next, frames), dst=dst)
        self.pkt_num_next += 1

    # ------------------------------------------------------------------
    # receiving
    # ------------------------------------------------------------------
    def on_packet(self, pkt: Packet) -> None:
        packet: QuicPacket = pkt.header
        if packet.conn_id != self.conn_id:
            self.foreign_packets += 1
            return
        if packet.pkt_num < 0:
            self._on_handshake(pkt, packet.frames[0])
            return
        if self.state == QuicState.IDLE:
            self.state = QuicState.ESTABLISHED
        duplicate = not self._record_received(packet.pkt_num)

        probing_only = all(isinstance(f, _PROBING) for f in packet.frames)
        if not duplicate and pkt.src != self.peer and not probing_only:
            self._on_peer_address_change(pkt.src)

        if not duplicate:
            for frame in packet.frames:
                self._on_frame(pkt, frame)
        if packet.ack_eliciting and not probing_only:
            self._send_ack()
        self.flush()

    def _record_received(self, pn: int) -> bool:
        ranges = self._recv_ranges
        if ranges and pn == ranges[-1][1] + 1:
            ranges[-1][1] = pn
            return True
        i = bisect.bisect_left(ranges, [pn, pn])
        if i > 0 and ranges[i - 1][0] <= pn <= ranges[i - 1][1]:
            return False
        if i < len(ranges) and ranges[i][0] == pn:
            return False
        ranges.insert(i, [pn, pn])
        if i + 1 < len(ranges) and ranges[i + 1][0] == pn + 1:
            ranges[i][1] = ranges[i + 1][1]
            del ranges[i + 1]
        if i > 0 and ranges[i - 1][1] + 1 == pn:
            ranges[i - 1][1] = ranges[i][1]
            del ranges[i]
        return True

    def _on_frame(self, pkt: Packet, frame: Any) -> None:
        if isinstance(frame, StreamFrame):
            self._on_stream_frame(pkt, frame)
        elif isinstance(frame, AckFrame):
            self._on_ack_frame(frame)
        elif isinstance(frame, MaxDataFrame):
            self.peer_max_data = max(self.peer_max_data, frame.maximum)
        elif isinstance(frame, MaxStreamDataFrame):
            stream = self.streams.get(frame.stream_id) or self._new_stream(frame.stream_id)
            stream.peer_max_stream_data = max(stream.peer_max_stream_data, frame.maximum)
        elif isinstance(frame, PathChallengeFrame):
            self._send_raw(QuicPacket(self.conn_id, self.pkt_num_next, [PathResponseFrame(frame.token)]),
                           dst=pkt.src, src=pkt.dst)
            self.pkt_num_next += 1
        elif isinstance(frame, PathResponseFrame):
            self._on_path_response(frame)

    def _on_stream_frame(self, pkt: Packet, frame: StreamFrame) -> None:
        self.metrics.on_receive(self.flow_id, self.sim.now, (frame.stream_id, frame.offset), len(frame.data) * 8, pkt.sent_at)
        stream = self.streams.get(frame.stream_id) or self._new_stream(frame.stream_id)
        if not self._admit_frame(stream, frame):
            return
        self._deliver_stream_frame(stream, frame)

    def _admit_frame(self, stream: QuicStream, frame: StreamFrame) -> bool:
        """Enforce the stream and connection receive limits; a violating frame is dropped"""
        end = frame.offset + len(frame.data)
        if end > stream.local_max_stream_data:
            self.flow_control_violations += 1
            logger.warning("quic %s: stream %d frame exceeds flow-control limit, dropped", self.flow_id, frame.stream_id)
            return False
        high = self._recv_high.get(frame.stream_id, 0)
        if end <= high:
            return True
        if self.data_received + end - high > self.local_max_data:
            self.flow_control_violations += 1
            logger.warning("quic %s: stream %d frame exceeds connection flow-control limit %d, dropped",
                           self.flow_id, frame.stream_id, self.local_max_data)
            return False
        self.data_received += end - high
        self._recv_high[frame.stream_id] = end
        return True

    def _deliver_stream_frame(self, stream: QuicStream, frame: StreamFrame) -> None:
        for offset, data in stream.on_frame(frame):
            self.data_delivered += len(data)
            self.stream_log.append((self.sim.now, stream.stream_id, offset, len(data)))
            if self.on_stream_data is not None:
                self.on_stream_data(stream.stream_id, offset, data)
        self._update_credit(stream)
        if stream.finished and self.on_stream_fin is not None:
            self.on_stream_fin(stream.stream_id)

    def _update_credit(self, stream: QuicStream) -> None:
        if stream.local_max_stream_data - stream.delivered_offset < stream.recv_window // 2:
            stream.local_max_stream_data = stream.delivered_offset + stream.recv_window
            self._queue_control(MaxStreamDataFrame(stream.stream_id, stream.local_max_stream_data))
        if self.local_max_data - self.data_delivered < self.max_data // 2:
            self.local_max_data = self.data_delivered + self.max_data
            self._queue_control(MaxDataFrame(self.local_max_data))

    def _queue_control(self, frame: Any) -> None:
        # a newer limit for the same target replaces the queued one
        for i, queued in enumerate(self._control):
            if type(queued) is type(frame) and getattr(queued, "stream_id", None) == getattr(frame, "stream_id", None):
                self._control[i] = frame
                return
        self._control.append(frame)

    # ------------------------------------------------------------------
    # acknowledgements and loss recovery
    # ------------------------------------------------------------------
    def _on_ack_frame(self, frame: AckFrame) -> None:
        largest = frame.largest
        if largest >= self.pkt_num_next:
            return
        while self._sent_order and self._sent_order[0] not in self._sent:
            self._sent_order.popleft()
        newly: List[SentPacket] = []
        for pn in self._sent_order:
            if pn > largest:
                break
            sent = self._sent.get(pn)
            if sent is not None and frame.acks(pn):
                newly.append(sent)
        if not newly:
            return

        now = self.sim.now
        for sent in newly:
            del self._sent[sent.pkt_num]
            self.bytes_in_flight -= sent.size
            self._on_frames_acked(sent.frames)
        self.largest_acked = max(self.largest_acked, largest)
        rtt_sample = None
        if newly[-1].pkt_num == largest:
            rtt_sample = now - newly[-1].sent_at
            self.rtt.update(rtt_sample)
            if self.traced:
                self.metrics.record_trace(TraceKind.RTT, self.flow_id, now, to_seconds(rtt_sample))
        self.pto_count = 0

        if self.cc.in_recovery and any(s.sent_at > self._recovery_start for s in newly):
            self.cc.exit_recovery()
        acked = sum(s.size for s in newly) / MAX_PACKET_BYTES
        self.cc.on_ack(acked, rtt_sample, largest + 1, self.pkt_num_next)

        self._detect_lost()
        self._arm_timer()

    def _loss_delay(self) -> SimTime:
        latest = self.rtt.latest if self.rtt.latest is not None else self.rtt.smoothed
        return max(int(TIME_THRESHOLD * max(latest, self.rtt.smoothed)), GRANULARITY)

    def _detect_lost(self) -> None:
        now = self.sim.now
        delay = self._loss_delay()
        lost: List[SentPacket] = []
        self._loss_time = None
        for pn in self._sent_order:
            if pn > self.largest_acked:
                break
            sent = self._sent.get(pn)
            if sent is None:
                continue
            if pn <= self.largest_acked - PACKET_THRESHOLD or sent.sent_at <= now - delay:
                lost.append(sent)
            else:
                when = sent.sent_at + delay
                self._loss_time = when if self._loss_time is None else min(self._loss_time, when)
        if lost:
            self._declare_lost(lost)

    def _declare_lost(self, lost: List[SentPacket]) -> None:
        for sent in lost:
            del self._sent[sent.pkt_num]
            self.bytes_in_flight -= sent.size
            self.packets_lost += 1
            for frame in sent.frames:
                self._on_frame_lost(frame)
        # one congestion event per recovery period
        if max(s.sent_at for s in lost) > self._recovery_start:
            self._recovery_start = self.sim.now
            self.cc.on_loss(LossKind.FAST_RETRANSMIT, self.bytes_in_flight / MAX_PACKET_BYTES)

    def _on_frame_lost(self, frame: Any) -> None:
        if isinstance(frame, StreamFrame):
            frame.retransmit = True
            self._rtx.append(frame)
        elif isinstance(frame, MaxStreamDataFrame):
            stream = self.streams[frame.stream_id]
            self._queue_control(MaxStreamDataFrame(frame.stream_id, stream.local_max_stream_data))
        elif isinstance(frame, MaxDataFrame):
            self._queue_control(MaxDataFrame(self.local_max_data))

    def _arm_timer(self) -> None:
        self.sim.cancel(self._timer)
        self._timer = None
        if self._loss_time is not None:
            self._timer = self.sim.schedule(max(self._loss_time, self.sim.now), self._on_loss_timer)
        elif self._sent:
            deadline = self._last_eliciting_at + self.rtt.pto * (2 ** self.pto_count)
            self._timer = self.sim.schedule(max(deadline, self.sim.now), self._on_pto)

    def _on_loss_timer(self) -> None:
        self._detect_lost()
        self._arm_timer()
        self.flush()

    def _on_pto(self) -> None:
        if not self._sent:
            return
        self.pto_count += 1
        oldest = self._sent[next(pn for pn in self._sent_order if pn in self._sent)]
        logger.debug("quic %s: PTO #%d, probing with packet %d's frames", self.flow_id, self.pto_count, oldest.pkt_num)
        if self.pto_count == PERSISTENT_CONGESTION_PTOS:
            self.cc.on_loss(LossKind.TIMEOUT, self.bytes_in_flight / MAX_PACKET_BYTES)
        del self._sent[oldest.pkt_num]
        self.bytes_in_flight -= oldest.size
        self.packets_lost += 1
        for frame in oldest.frames:
            self._on_frame_lost(frame)
        self.flush(probe=True)
        self._arm_timer()

    # ------------------------------------------------------------------
    # migration
    # ------------------------------------------------------------------
    def migrate(self, new_local: str, validation_timeout: Optional[SimTime] = None) -> None:
        """Validate new_local with PATH_CHALLENGE, then move the connection to it"""
        if self.state != QuicState.ESTABLISHED:
            raise RuntimeError(f"quic {self.flow_id}: migrate() in state {self.state.value}")
        if new_local not in self.topo.nodes:
            raise RuntimeError(f"quic {self.flow_id}: migrate() to unknown address {new_local}")
        token = self._next_token
        self._next_token += 1
        timeout = validation_timeout or max(3 * self.rtt.pto, seconds(1))
        challenge = _PendingChallenge(token, new_local, self.sim.now)
        challenge.timer = self.sim.schedule_in(timeout, self._on_validation_timeout, token)
        self._challenge = challenge
        self._send_raw(QuicPacket(self.conn_id, self.pkt_num_next, [PathChallengeFrame(token)]), src=new_local)
        self.pkt_num_next += 1
        logger.info("quic %s: validating path %s -> %s", self.flow_id, new_local, self.peer)

    def _on_path_response(self, frame: PathResponseFrame) -> None:
        challenge = self._challenge
        if challenge is None or challenge.token != frame.token:
            return
        self.sim.cancel(challenge.timer)
        self._challenge = None
        if challenge.local == self.local:
            logger.info("quic %s: path %s revalidated", self.flow_id, self.local)
            return
        old = self.local
        self.local = challenge.local
        self.cc.reset()
        self.migrations.append((self.sim.now, self.local))
        logger.info("quic %s: migrated %s -> %s at %.6fs", self.flow_id, old, self.local, to_seconds(self.sim.now))
        for callback in self.on_migrated:
            callback(self, self.local)
        # a non-probing packet from the new address moves the peer as well
        self._send_ack()

    def _on_validation_timeout(self, token: int) -> None:
        if self._challenge is None or self._challenge.token != token:
            return
        logger.warning("quic %s: path validation to %s timed out, staying on %s",
                       self.flow_id, self._challenge.local, self.local)
        self._challenge = None

    def _on_peer_address_change(self, address: str) -> None:
        old = self.peer
        self.peer = address
        self.cc.reset()
        self.migrations.append((self.sim.now, address))
        logger.info("quic %s: peer moved %s -> %s, congestion state reset", self.flow_id, old, address)
        for callback in self.on_migrated:
            callback(self, address)

    def _trace_cwnd(self, state) -> None:
        self.metrics.record_trace(TraceKind.CWND, self.flow_id, self.sim.now, state.cwnd)


class QuicFlow:
    """Sender at `src` pushing data to `dst` over n streams.

    In object mode stream i carries the i-th contiguous part of the object.
    In stream mode the application pushes bytes onto any stream for as long
    as the run lasts. Either way the sending application refills a stream
    as soon as its buffer share has room.
    """

    def __init__(
        self,
        topo: Topology,
        metrics: MetricsCollector,
        flow_id: str,
        src: str,
        dst: str,
        cc_factory: Callable[[], CongestionController],
        port: int = 443,
        n_streams: int = 8,
        buf: int = 4 * 1024 * 1024,
        max_data: int = 64 * 1024 * 1024,
        max_stream_data: int = 16 * 1024 * 1024,
        tickets: Optional[TicketStore] = None,
        scheduler: Any = None,
    ):
        self.topo = topo
        self.sim = topo.sim
        self.metrics = metrics
        self.flow_id = flow_id
        self.n_streams = n_streams
        common = dict(buf=buf, n_streams=n_streams, max_data=max_data, max_stream_data=max_stream_data, tickets=tickets)
        self.sender = QuicConnection(topo, metrics, flow_id, src, dst, port, cc_factory(), scheduler=scheduler, **common)
        self.receiver = QuicConnection(topo, metrics, flow_id, dst, src, port, cc_factory(), traced=False, **common)
        metrics.flow(flow_id, "quic", self.sender.cc.algo.value)
        self.handle: Optional[TransferHandle] = None
        self._open_ended = False
        self._parts: List[bytearray] = []
        self._written: List[int] = []
        self._digests: List[bytes] = []
        self._hashers: Dict[int, Any] = {}
        self._finished: set = set()
        self.fin_at: Dict[int, SimTime] = {}
        self._received = 0
        self.receiver.on_stream_data = self._on_stream_data
        self.receiver.on_stream_fin = self._on_stream_fin

    def _open(self, parts: List[bytes], resume: bool) -> None:
        for i, part in enumerate(parts):
            self._parts.append(bytearray(part))
            self._written.append(0)
            self._hashers[i] = hashlib.sha256()
            self.sender.open_stream(i)
        self.metrics.on_request(self.flow_id, self.sim.now)
        self.sender.on_writable = self._refill
        self.sender.on_established.append(lambda conn: self._fill_all())
        self.sender.connect(resume=resume)

    def send_object(self, payload: bytes, resume: bool = False) -> TransferHandle:
        self.handle = TransferHandle(self.flow_id, len(payload), self.sim.now)
        parts = []
        offset = 0
        for size in split_bytes(len(payload), self.n_streams):
            parts.append(payload[offset:offset + size])
            self._digests.append(hashlib.sha256(parts[-1]).digest())
            offset += size
        self._open(parts, resume)
        return self.handle

    def start_stream(self, resume: bool = False) -> None:
        """Open every stream for data pushed later with push()"""
        self._open_ended = True
        self._open([b""] * self.n_streams, resume)

    def push(self, stream_id: int, data: bytes) -> None:
        self._parts[stream_id] += data
        if self.sender.state == QuicState.ESTABLISHED:
            self._refill(self.sender.streams[stream_id])
            self.sender.flush()

    def _fill_all(self) -> None:
        for i in range(len(self._parts)):
            self._refill(self.sender.streams[i])

    def _refill(self, stream: QuicStream) -> None:
        i = stream.stream_id
        part = self._parts[i]
        done = self._written[i]
        if stream.fin_requested:
            return
        chunk = bytes(part[done:done + stream.write_space])
        last = not self._open_ended and done + len(chunk) >= len(part)
        self._written[i] += stream.write(chunk, fin=last)

    def _on_stream_data(self, stream_id: int, offset: int, data: bytes) -> None:
        self._hashers[stream_id].update(data)
        self._received += len(data)
        if self.handle is not None:
            self.handle.delivered_bytes = self._received

    def _on_stream_fin(self, stream_id: int) -> None:
        if stream_id in self._finished:
            return
        self._finished.add(stream_id)
        self.fin_at[stream_id] = self.sim.now
        handle = self.handle
        if handle is None or len(self._finished) < len(self._parts):
            return
        handle.digest_ok = all(self._hashers[i].digest() == digest for i, digest in enumerate(self._digests))
        self.metrics.on_complete(self.flow_id, self.sim.now)
        handle.finish(self.sim.now)

    def stream_done_at(self, stream_id: int) -> Optional[SimTime]:
        return self.fin_at.get(stream_id)

    @property
    def first_data_at(self) -> Optional[SimTime]:
        return self.sender.connected_at
