# htclab/tp_hpt.py - application-aware transport on top of the multi-stream machinery
#
# Objects are cut into segments. Every segment carries a class: RELIABLE
# segments are repaired until acknowledged, BEST_EFFORT segments are sent
# once, DEADLINE segments are dropped as soon as they can no longer arrive
# in time. Streams carry a priority level served by a strict-priority
# scheduler with a starvation guard. The second half of the module holds
# the group transfer: one source, a replicating gateway with ACK
# aggregation, and caching edge routers that repair member losses locally.
import hashlib
import logging
import math
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Deque, Dict, List, Optional, Set, Tuple

from htclab.cc import CongestionController
from htclab.metrics import MetricsCollector
from htclab.models import MulticastMode, ReliabilityMode, SegmentClass
from htclab.netgraph import Packet, PacketKind, Topology, serialization_time
from htclab.sim_core import EventHandle, SimTime, millis, to_seconds
from htclab.tp_quic import (
    MAX_PACKET_BYTES,
    QuicConnection,
    QuicState,
    QuicStream,
    StreamFrame,
    TicketStore,
)
from htclab.workload import TransferHandle, object_payload

logger = logging.getLogger(__name__)

STARVATION_QUANTUM = 64


@dataclass(frozen=True)
class AppProfile:
    reliability_mode: ReliabilityMode = ReliabilityMode.SEGMENT_CLASS
    latency_target: SimTime = millis(100)
    priority: int = 0
    # Logged only; there is no admission control.
    bandwidth_floor: float = 0.0


class SendDecision(str, Enum):
    RELIABLE_QUEUED = "ReliableQueued"
    BEST_EFFORT_QUEUED = "BestEffortQueued"
    DEADLINE_QUEUED = "DeadlineQueued"
    ABANDONED_AT_SENDER = "AbandonedAtSender"


@dataclass(frozen=True, slots=True)
class SegmentTag:
    seg_id: int
    cls: SegmentClass
    seg_offset: int
    seg_len: int
    deadline: Optional[SimTime] = None
    quality_tier: int = 0


@dataclass
class HptSegment:
    seg_id: int
    data: bytes
    cls: SegmentClass = SegmentClass.RELIABLE
    stream_id: int = 0
    deadline: Optional[SimTime] = None
    quality_tier: int = 0
    tile_id: Optional[int] = None
    sent: int = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.sent


@dataclass
class ClassStats:
    segments: int = 0
    bytes_sent: int = 0
    bytes_retransmitted: int = 0
    bytes_acked: int = 0
    bytes_delivered: int = 0
    bytes_lost: int = 0
    expired: int = 0
    abandoned: int = 0
    late_dropped: int = 0


def _class_table() -> Dict[SegmentClass, ClassStats]:
    return {cls: ClassStats() for cls in SegmentClass}


# ====================
# Scheduling
# ====================

class PriorityScheduler:
    """Strict priority across levels (0 is highest), round-robin inside a level.

    When more than one level is backlogged the lowest backlogged level is
    served at least once every `quantum` picks.
    """

    def __init__(self, quantum: int = STARVATION_QUANTUM):
        self.quantum = quantum
        self._since_lowest = 0
        self._last_in_level: Dict[int, int] = {}

    def pick(self, candidates: List[QuicStream]) -> Optional[QuicStream]:
        if not candidates:
            return None
        levels = sorted({s.priority for s in candidates})
        lowest = levels[-1]
        if len(levels) > 1 and self._since_lowest >= self.quantum - 1:
            level = lowest
        else:
            level = levels[0]
        self._since_lowest = 0 if level == lowest else self._since_lowest + 1

        in_level = sorted((s for s in candidates if s.priority == level), key=lambda s: s.stream_id)
        last = self._last_in_level.get(level, -1)
        chosen = next((s for s in in_level if s.stream_id > last), in_level[0])
        self._last_in_level[level] = chosen.stream_id
        return chosen


class MessageStream(QuicStream):
    """Send side of a stream carrying whole segments instead of a byte stream"""

    def __init__(self, conn: "HptConnection", stream_id: int, send_capacity: int, recv_window: int,
                 peer_window: int, priority: int = 0):
        super().__init__(stream_id, send_capacity, recv_window, peer_window, priority)
        self.conn = conn
        self._segments: Deque[HptSegment] = deque()
        self._queued = 0

    @property
    def pending_len(self) -> int:
        return self._queued

    def has_data(self) -> bool:
        return self._queued > 0

    def sendable(self, conn_credit: int) -> bool:
        return self._queued > 0 and self.credit > 0 and conn_credit > 0

    def write(self, data: bytes, fin: bool = False) -> int:
        raise TypeError("message streams take whole segments; use HptConnection.send_segment()")

    def enqueue(self, segment: HptSegment) -> None:
        self._segments.append(segment)
        self._queued += segment.remaining

    def cut_frame(self, max_bytes: int, conn_credit: int) -> Optional[StreamFrame]:
        while self._segments:
            seg = self._segments[0]
            if seg.sent == 0 and seg.cls == SegmentClass.DEADLINE and not self.conn.deadline_feasible(seg.deadline):
                self._segments.popleft()
                self._queued -= seg.remaining
                self.conn._abandon(seg)
                continue
            break
        else:
            return None
        n = min(seg.remaining, max_bytes, self.credit, conn_credit)
        if n <= 0:
            return None
        data = seg.data[seg.sent:seg.sent + n]
        tag = SegmentTag(seg.seg_id, seg.cls, seg.sent, len(seg.data), seg.deadline, seg.quality_tier)
        frame = StreamFrame(self.stream_id, self.next_offset, data, tag=tag)
        seg.sent += n
        self.next_offset += n
        self._queued -= n
        self.conn.class_stats[seg.cls].bytes_sent += n
        if seg.remaining == 0:
            self._segments.popleft()
        return frame


# ====================
# Connection
# ====================

class HptConnection(QuicConnection):
    def __init__(self, *args: Any, profile: Optional[AppProfile] = None,
                 starvation_quantum: int = STARVATION_QUANTUM, **kwargs: Any):
        if kwargs.get("scheduler") is None:
            kwargs["scheduler"] = PriorityScheduler(starvation_quantum)
        super().__init__(*args, **kwargs)
        self.profile = profile or AppProfile()
        if self.profile.bandwidth_floor:
            logger.info("hpt %s: advisory bandwidth floor %.0f b/s", self.flow_id, self.profile.bandwidth_floor)
        self.class_stats = _class_table()
        self._partial: Dict[int, Dict[int, bytes]] = {}
        self._partial_bytes: Dict[int, int] = {}
        self._completed: Set[int] = set()

        self.on_segment: Optional[Callable[[int, SegmentClass, bytes], None]] = None
        self.on_segment_dropped: Optional[Callable[[int, SegmentClass, str], None]] = None

    def _new_stream(self, stream_id: int, priority: int = 0) -> QuicStream:
        stream = MessageStream(self, stream_id, self.buf, self.max_stream_data, self.max_stream_data, priority)
        self.streams[stream_id] = stream
        return stream

    # ------------------------------------------------------------------
    # sender side
    # ------------------------------------------------------------------
    def backlog_bytes(self) -> int:
        return sum(s.pending_len for s in self.streams.values()) + sum(len(f.data) for f in self._rtx)

    def estimated_delivery(self, ahead_bytes: Optional[int] = None) -> SimTime:
        """RTT/2 plus the time to serialize what is queued locally"""
        ahead = self.backlog_bytes() if ahead_bytes is None else ahead_bytes
        link = self.topo.first_hop(self.local, self.peer)
        queued_bits = ahead * 8 + (link.occupancy + (1 if link.busy else 0)) * MAX_PACKET_BYTES * 8
        return int(self.rtt.smoothed / 2) + serialization_time(queued_bits, link.bandwidth_bps)

    def deadline_feasible(self, deadline: Optional[SimTime], ahead_bytes: Optional[int] = None) -> bool:
        if deadline is None:
            return True
        return self.sim.now + self.estimated_delivery(ahead_bytes) <= deadline

    def send_segment(self, segment: HptSegment) -> SendDecision:
        return hpt_classify_and_send(self, segment, segment.cls)

    def _abandon(self, seg: HptSegment) -> None:
        stats = self.class_stats[seg.cls]
        stats.abandoned += 1
        logger.debug("hpt %s: segment %d abandoned at sender", self.flow_id, seg.seg_id)
        if self.on_segment_dropped is not None:
            self.on_segment_dropped(seg.seg_id, seg.cls, "abandoned")

    def _give_up(self, frame: StreamFrame, reason: str) -> None:
        tag: SegmentTag = frame.tag
        stats = self.class_stats[tag.cls]
        if reason == "lost":
            stats.bytes_lost += len(frame.data)
        else:
            stats.expired += 1
        if self.on_segment_dropped is not None:
            self.on_segment_dropped(tag.seg_id, tag.cls, reason)

    def _expired(self, tag: SegmentTag) -> bool:
        return tag.deadline is not None and self.sim.now + int(self.rtt.smoothed / 2) > tag.deadline

    def _on_frame_lost(self, frame: Any) -> None:
        tag = getattr(frame, "tag", None)
        if not isinstance(tag, SegmentTag) or tag.cls == SegmentClass.RELIABLE:
            super()._on_frame_lost(frame)
            return
        if tag.cls == SegmentClass.BEST_EFFORT:
            self._give_up(frame, "lost")
        elif self._expired(tag):
            self._give_up(frame, "expired")
        else:
            super()._on_frame_lost(frame)

    def _before_retransmit(self, frame: StreamFrame) -> bool:
        tag = frame.tag
        if isinstance(tag, SegmentTag):
            if tag.cls == SegmentClass.DEADLINE and self._expired(tag):
                self._give_up(frame, "expired")
                return False
            self.class_stats[tag.cls].bytes_retransmitted += len(frame.data)
        return True

    def _on_frames_acked(self, frames: List[Any]) -> None:
        for frame in frames:
            tag = getattr(frame, "tag", None)
            if isinstance(tag, SegmentTag):
                self.class_stats[tag.cls].bytes_acked += len(frame.data)

    # ------------------------------------------------------------------
    # receiver side
    # ------------------------------------------------------------------
    def _on_stream_frame(self, pkt: Packet, frame: StreamFrame) -> None:
        tag = frame.tag
        if not isinstance(tag, SegmentTag):
            super()._on_stream_frame(pkt, frame)
            return
        self.metrics.on_receive(self.flow_id, self.sim.now, (frame.stream_id, frame.offset), len(frame.data) * 8, pkt.sent_at)
        stream = self.streams.get(frame.stream_id) or self._new_stream(frame.stream_id)
        if not self._admit_frame(stream, frame):
            return
        end = frame.offset + len(frame.data)
        # segments are consumed on arrival, holes left by unrepaired classes do not block credit
        if end > stream.delivered_offset:
            self.data_delivered += end - stream.delivered_offset
            stream.delivered_offset = end
        self._update_credit(stream)
        self._assemble(frame, tag)

    def forget_segment(self, seg_id: int) -> None:
        """Drop reassembly state for a segment that is delivered or given up"""
        self._partial.pop(seg_id, None)
        self._partial_bytes.pop(seg_id, None)
        self._completed.add(seg_id)

    def _assemble(self, frame: StreamFrame, tag: SegmentTag) -> None:
        if tag.seg_id in self._completed:
            return
        chunks = self._partial.setdefault(tag.seg_id, {})
        if tag.seg_offset in chunks:
            return
        chunks[tag.seg_offset] = frame.data
        got = self._partial_bytes.get(tag.seg_id, 0) + len(frame.data)
        self._partial_bytes[tag.seg_id] = got
        if got < tag.seg_len:
            return
        del self._partial[tag.seg_id]
        del self._partial_bytes[tag.seg_id]
        self._completed.add(tag.seg_id)
        stats = self.class_stats[tag.cls]
        if tag.cls == SegmentClass.DEADLINE and tag.deadline is not None and self.sim.now > tag.deadline:
            stats.late_dropped += 1
            if self.on_segment_dropped is not None:
                self.on_segment_dropped(tag.seg_id, tag.cls, "late")
            return
        data = b"".join(chunks[k] for k in sorted(chunks))
        stats.segments += 1
        stats.bytes_delivered += len(data)
        self.stream_log.append((self.sim.now, frame.stream_id, tag.seg_id, len(data)))
        if self.on_segment is not None:
            self.on_segment(tag.seg_id, tag.cls, data)


def hpt_classify_and_send(conn: HptConnection, segment: HptSegment, cls: SegmentClass) -> SendDecision:
    """Admit a segment under the connection's profile and queue it on its stream"""
    if conn.profile.reliability_mode == ReliabilityMode.FULL:
        cls = SegmentClass.RELIABLE
    segment.cls = cls
    if cls == SegmentClass.DEADLINE:
        if segment.deadline is None:
            segment.deadline = conn.sim.now + conn.profile.latency_target
        if not conn.deadline_feasible(segment.deadline):
            conn._abandon(segment)
            return SendDecision.ABANDONED_AT_SENDER
    stream = conn.streams.get(segment.stream_id) or conn.open_stream(segment.stream_id, conn.profile.priority)
    stream.enqueue(segment)
    conn.flush()
    if cls == SegmentClass.RELIABLE:
        return SendDecision.RELIABLE_QUEUED
    if cls == SegmentClass.BEST_EFFORT:
        return SendDecision.BEST_EFFORT_QUEUED
    return SendDecision.DEADLINE_QUEUED


def hpt_priority_schedule(conn: HptConnection) -> Optional[StreamFrame]:
    return conn.next_frame()


def segment_object(
    payload: bytes,
    plan: List[Tuple[int, int, SegmentClass]],
    stream_of: Optional[Callable[[int, int], int]] = None,
) -> List[HptSegment]:
    """Slice a payload along a segment plan.

    stream_of(seg_id, byte_offset) picks the stream for a segment; by default
    everything goes to stream 0.
    """
    segments = []
    offset = 0
    for seg_id, size, cls in plan:
        stream_id = stream_of(seg_id, offset) if stream_of else 0
        segments.append(HptSegment(seg_id, payload[offset:offset + size], cls, stream_id))
        offset += size
    return segments


class HptFlow:
    """Sender at `src` pushing an object's segments to `dst`.

    Segments are fed to their streams as buffer space frees up, so the
    deadline check sees a realistic local backlog. The transfer completes
    when every segment has either been delivered or been given up.
    """

    def __init__(
        self,
        topo: Topology,
        metrics: MetricsCollector,
        flow_id: str,
        src: str,
        dst: str,
        cc_factory: Callable[[], CongestionController],
        profile: Optional[AppProfile] = None,
        port: int = 443,
        buf: int = 4 * 1024 * 1024,
        max_data: int = 64 * 1024 * 1024,
        max_stream_data: int = 16 * 1024 * 1024,
        starvation_quantum: int = STARVATION_QUANTUM,
        tickets: Optional[TicketStore] = None,
        stream_priorities: Optional[Dict[int, int]] = None,
    ):
        self.topo = topo
        self.sim = topo.sim
        self.metrics = metrics
        self.flow_id = flow_id
        self.profile = profile or AppProfile()
        self.stream_priorities = stream_priorities or {0: self.profile.priority}
        common = dict(buf=buf, n_streams=len(self.stream_priorities), max_data=max_data,
                      max_stream_data=max_stream_data, tickets=tickets, profile=self.profile,
                      starvation_quantum=starvation_quantum)
        self.sender = HptConnection(topo, metrics, flow_id, src, dst, port, cc_factory(), **common)
        self.receiver = HptConnection(topo, metrics, flow_id, dst, src, port, cc_factory(), traced=False, **common)
        metrics.flow(flow_id, "hpt", self.sender.cc.algo.value)

        self.handle: Optional[TransferHandle] = None
        self.decisions: Dict[int, SendDecision] = {}
        self.segment_done_at: Dict[int, SimTime] = {}
        # unresolved segments only; resolution releases the payload
        self._segments: Dict[int, HptSegment] = {}
        self._stream_of: Dict[int, int] = {}
        self._backlog: Dict[int, Deque[HptSegment]] = {}
        self._resolved: Set[int] = set()
        self._digest_ok = True
        self._delivered = 0
        self._relative_deadline: Optional[SimTime] = None

        self.sender.on_segment_dropped = self._on_dropped
        self.receiver.on_segment_dropped = self._on_dropped
        self.receiver.on_segment = self._on_segment
        self.sender.on_writable = self._refill

    def send_object(self, segments: List[HptSegment], deadline: Optional[SimTime] = None,
                    resume: bool = False) -> TransferHandle:
        """deadline is relative: a DEADLINE segment must arrive within it of being handed over"""
        total = sum(len(s.data) for s in segments)
        self.handle = TransferHandle(self.flow_id, total, self.sim.now)
        self.metrics.on_request(self.flow_id, self.sim.now)
        self._relative_deadline = deadline
        for stream_id, priority in sorted(self.stream_priorities.items()):
            self.sender.open_stream(stream_id, priority)
            self._backlog[stream_id] = deque()
        for seg in segments:
            self._register(seg)
            self._backlog.setdefault(seg.stream_id, deque()).append(seg)
            if seg.stream_id not in self.sender.streams:
                self.sender.open_stream(seg.stream_id, self.profile.priority)
        self.sender.on_established.append(lambda conn: self._fill_all())
        self.sender.connect(resume=resume)
        if not segments:
            self._finish()
        return self.handle

    def start_stream(self, deadline: Optional[SimTime] = None, resume: bool = False) -> None:
        """Open the streams for segments pushed later with push_segment()"""
        self._relative_deadline = deadline
        self.metrics.on_request(self.flow_id, self.sim.now)
        for stream_id, priority in sorted(self.stream_priorities.items()):
            self.sender.open_stream(stream_id, priority)
            self._backlog[stream_id] = deque()
        self.sender.on_established.append(lambda conn: self._fill_all())
        self.sender.connect(resume=resume)

    def push_segment(self, seg: HptSegment) -> None:
        self._register(seg)
        self._backlog.setdefault(seg.stream_id, deque()).append(seg)
        if seg.stream_id not in self.sender.streams:
            self.sender.open_stream(seg.stream_id, self.profile.priority)
        if self.sender.state == QuicState.ESTABLISHED:
            self._refill(self.sender.streams[seg.stream_id])

    def _register(self, seg: HptSegment) -> None:
        self._segments[seg.seg_id] = seg
        self._stream_of[seg.seg_id] = seg.stream_id

    def _fill_all(self) -> None:
        for stream_id in sorted(self._backlog):
            self._refill(self.sender.streams[stream_id])

    def _refill(self, stream: QuicStream) -> None:
        backlog = self._backlog.get(stream.stream_id)
        while backlog and stream.write_space >= len(backlog[0].data):
            seg = backlog.popleft()
            if seg.cls == SegmentClass.DEADLINE and seg.deadline is None and self._relative_deadline is not None:
                seg.deadline = self.sim.now + self._relative_deadline
            decision = hpt_classify_and_send(self.sender, seg, seg.cls)
            self.decisions[seg.seg_id] = decision
        if backlog and stream.pending_len == 0:
            # a segment larger than the buffer share still goes out whole
            seg = backlog.popleft()
            self.decisions[seg.seg_id] = hpt_classify_and_send(self.sender, seg, seg.cls)

    def _on_segment(self, seg_id: int, cls: SegmentClass, data: bytes) -> None:
        original = self._segments.get(seg_id)
        if original is not None and hashlib.sha256(data).digest() != hashlib.sha256(original.data).digest():
            self._digest_ok = False
            logger.error("hpt %s: segment %d digest mismatch", self.flow_id, seg_id)
        self._delivered += len(data)
        if self.handle is not None:
            self.handle.delivered_bytes = self._delivered
        self._resolve(seg_id)

    def _on_dropped(self, seg_id: int, cls: SegmentClass, reason: str) -> None:
        if cls == SegmentClass.RELIABLE:
            return
        self._resolve(seg_id)

    def _resolve(self, seg_id: int) -> None:
        if seg_id in self._resolved:
            return
        self._resolved.add(seg_id)
        self._segments.pop(seg_id, None)
        self.receiver.forget_segment(seg_id)
        self.segment_done_at[seg_id] = self.sim.now
        if not self._segments:
            self._finish()

    def _finish(self) -> None:
        handle = self.handle
        if handle is None or handle.complete:
            return
        handle.digest_ok = self._digest_ok
        self.metrics.on_complete(self.flow_id, self.sim.now)
        handle.finish(self.sim.now)

    def stream_done_at(self, stream_id: int) -> Optional[SimTime]:
        """Time the last segment of a stream was resolved, None while pending"""
        ids = [seg_id for seg_id, sid in self._stream_of.items() if sid == stream_id]
        if not ids or any(i not in self.segment_done_at for i in ids):
            return None
        return max(self.segment_done_at[i] for i in ids)

    def class_totals(self) -> Dict[str, Dict[str, int]]:
        """Per-class accounting merged from both ends"""
        merged = {}
        for cls in SegmentClass:
            tx, rx = self.sender.class_stats[cls], self.receiver.class_stats[cls]
            merged[cls.value] = {
                "bytes_sent": tx.bytes_sent,
                "bytes_retransmitted": tx.bytes_retransmitted,
                "bytes_lost": tx.bytes_lost,
                "bytes_delivered": rx.bytes_delivered,
                "segments_delivered": rx.segments,
                "expired": tx.expired,
                "abandoned": tx.abandoned,
                "late_dropped": rx.late_dropped,
            }
        return merged

    @property
    def first_data_at(self) -> Optional[SimTime]:
        return self.sender.connected_at


# ====================
# Group transfer
# ====================

MCAST_PORT = 7000
MCAST_CTRL_BYTES = 40


@dataclass(slots=True)
class McData:
    seq: int
    repair: bool = False
    # repairs from the source name the single member they are for
    target: Optional[int] = None
    data: bytes = b""


@dataclass(slots=True)
class McAck:
    member: int
    cumulative: int


@dataclass(slots=True)
class McNack:
    member: int
    seqs: Tuple[int, ...]


@dataclass(slots=True)
class McGroupAck:
    cumulative: int
    members: int = 1


@dataclass
class GroupTransferStats:
    members: int
    packets: int
    mode: str = MulticastMode.GROUP.value
    source_uplink_packets: int = 0
    source_repairs: int = 0
    source_timeouts: int = 0
    edge_repairs: int = 0
    nacks_escalated: int = 0
    member_acks: int = 0
    upstream_acks: int = 0
    stale_events: int = 0
    member_done_at: Dict[int, SimTime] = field(default_factory=dict)
    member_digest_ok: Dict[int, bool] = field(default_factory=dict)
    started_at: SimTime = 0
    completed_at: Optional[SimTime] = None

    @property
    def retrieval_time_s(self) -> Optional[float]:
        if self.completed_at is None:
            return None
        return to_seconds(self.completed_at - self.started_at)


def hpt_aggregate_acks(member_acks: Dict[int, int], stale: Optional[Set[int]] = None) -> Optional[int]:
    """Group acknowledgement: the minimum cumulative ack over live members"""
    stale = stale or set()
    live = [ack for member, ack in member_acks.items() if member not in stale]
    return min(live) if live else None


class _McEndpoint:
    def __init__(self, group: "MulticastTransfer", node: str):
        self.group = group
        self.node = node
        group.topo.attach(node, MCAST_PORT, self.on_packet)

    def send(self, dst: str, header: Any, size_bytes: int, kind: PacketKind) -> None:
        topo = self.group.topo
        data_key = (header.seq,) if isinstance(header, McData) else None
        topo.send(Packet(topo.next_uid(), self.group.flow_id, self.node, dst, MCAST_PORT,
                         size_bytes * 8, kind, header, data_key=data_key))

    def on_packet(self, pkt: Packet) -> None:
        raise NotImplementedError


class McSource(_McEndpoint):
    """Sends every payload packet once towards the gateway (or once per member in unicast mode)"""

    def __init__(self, group: "MulticastTransfer", node: str):
        super().__init__(group, node)
        self.next_seq = 0
        self.acked = 0
        self.member_acked: Dict[int, int] = {}
        self._queue: Deque[Tuple[str, McData]] = deque()
        self._draining = False
        self._timer: Optional[EventHandle] = None
        self._rate = group.topo.first_hop(node, group.gateway).bandwidth_bps

    def start(self) -> None:
        self._fill_window()

    def _fill_window(self) -> None:
        g = self.group
        while self.next_seq < g.packets and self.next_seq < self.acked + g.window:
            seq = self.next_seq
            self.next_seq += 1
            if g.mode == MulticastMode.GROUP:
                self._enqueue(g.gateway, McData(seq, data=g.chunk(seq)))
            else:
                for i in range(g.n_members):
                    self._enqueue(g.member_node(i), McData(seq, target=i, data=g.chunk(seq)))
        self._arm_timer()

    def _enqueue(self, dst: str, header: McData) -> None:
        self._queue.append((dst, header))
        if not self._draining:
            self._draining = True
            self._drain()

    def _drain(self) -> None:
        if not self._queue:
            self._draining = False
            return
        dst, header = self._queue.popleft()
        g = self.group
        g.stats.source_uplink_packets += 1
        if header.repair:
            g.stats.source_repairs += 1
        g.metrics.on_send(g.flow_id, g.sim.now, (header.seq,), g.payload_bytes * 8, header.repair)
        self.send(dst, header, g.payload_bytes, PacketKind.DATA)
        g.sim.schedule_in(serialization_time(g.payload_bytes * 8, self._rate), self._drain)

    def _arm_timer(self) -> None:
        g = self.group
        g.sim.cancel(self._timer)
        self._timer = None
        if self.acked < g.packets:
            self._timer = g.sim.schedule_in(g.repair_timeout, self._on_timeout)

    def _on_timeout(self) -> None:
        g = self.group
        if self.acked >= g.packets:
            return
        g.stats.source_timeouts += 1
        seq = self.acked
        logger.debug("multicast %s: no group progress, resending %d", g.flow_id, seq)
        if g.mode == MulticastMode.GROUP:
            self._enqueue(g.gateway, McData(seq, repair=True, data=g.chunk(seq)))
        else:
            for member in range(g.n_members):
                if self.member_acked.get(member, 0) <= seq:
                    self._enqueue(g.member_node(member), McData(seq, repair=True, target=member, data=g.chunk(seq)))
        self._arm_timer()

    def on_packet(self, pkt: Packet) -> None:
        g = self.group
        header = pkt.header
        if isinstance(header, McGroupAck):
            self._advance(header.cumulative)
        elif isinstance(header, McAck):
            # unicast baseline, or aggregation switched off at the gateway
            self.member_acked[header.member] = max(self.member_acked.get(header.member, 0), header.cumulative)
            group_ack = hpt_aggregate_acks(self.member_acked, g.stale_members)
            if group_ack is not None and len(self.member_acked) == g.n_members:
                self._advance(group_ack)
        elif isinstance(header, McNack):
            for seq in header.seqs:
                target = header.member
                via = g.gateway if g.mode == MulticastMode.GROUP else g.member_node(target)
                self._enqueue(via, McData(seq, repair=True, target=target, data=g.chunk(seq)))

    def _advance(self, cumulative: int) -> None:
        if cumulative <= self.acked:
            return
        self.acked = cumulative
        self._fill_window()


class McGateway(_McEndpoint):
    """Replicates source packets per member subtree and aggregates member ACKs"""

    def __init__(self, group: "MulticastTransfer", node: str):
        super().__init__(group, node)
        self.member_acked: Dict[int, int] = {i: 0 for i in range(group.n_members)}
        self.last_heard: Dict[int, SimTime] = {i: 0 for i in range(group.n_members)}
        self.emitted = 0
        self._last_emit: Optional[SimTime] = None
        self._flush_timer: Optional[EventHandle] = None
        self._watchdog: Optional[EventHandle] = None

    def start(self) -> None:
        self._watchdog = self.group.sim.schedule_in(self.group.agg_interval, self._check_stale)

    def on_packet(self, pkt: Packet) -> None:
        g = self.group
        header = pkt.header
        if isinstance(header, McData):
            members = range(g.n_members) if header.target is None else (header.target,)
            for i in members:
                self.send(g.edge_node(i), header, g.payload_bytes, PacketKind.DATA)
        elif isinstance(header, McAck):
            self._on_member_ack(header, pkt)
        elif isinstance(header, McNack):
            g.stats.nacks_escalated += 1
            self.send(g.source, header, MCAST_CTRL_BYTES, PacketKind.CONTROL)

    def _on_member_ack(self, ack: McAck, pkt: Packet) -> None:
        g = self.group
        now = g.sim.now
        self.last_heard[ack.member] = now
        if ack.member in g.stale_members:
            g.stale_members.discard(ack.member)
            logger.info("multicast %s: member %d is back", g.flow_id, ack.member)
        self.member_acked[ack.member] = max(self.member_acked[ack.member], ack.cumulative)
        if not g.aggregation:
            self.send(g.source, ack, MCAST_CTRL_BYTES, PacketKind.ACK)
            g.stats.upstream_acks += 1
            return
        self._maybe_emit()

    def _maybe_emit(self) -> None:
        g = self.group
        group_ack = hpt_aggregate_acks(self.member_acked, g.stale_members)
        if group_ack is None or group_ack <= self.emitted:
            return
        now = g.sim.now
        if self._last_emit is None or now - self._last_emit >= g.agg_interval or group_ack >= g.packets:
            self._emit(group_ack)
        elif self._flush_timer is None:
            self._flush_timer = g.sim.schedule(self._last_emit + g.agg_interval, self._on_flush)

    def _on_flush(self) -> None:
        self._flush_timer = None
        self._maybe_emit()

    def _emit(self, group_ack: int) -> None:
        g = self.group
        g.sim.cancel(self._flush_timer)
        self._flush_timer = None
        self.emitted = group_ack
        self._last_emit = g.sim.now
        g.stats.upstream_acks += 1
        self.send(g.source, McGroupAck(group_ack, g.n_members - len(g.stale_members)), MCAST_CTRL_BYTES, PacketKind.ACK)

    def _check_stale(self) -> None:
        g = self.group
        if g.stats.completed_at is not None:
            return
        now = g.sim.now
        for member, heard in self.last_heard.items():
            if member in g.stale_members or self.member_acked[member] >= g.packets:
                continue
            if now - heard > g.stale_after:
                g.stale_members.add(member)
                g.stats.stale_events += 1
                logger.info("multicast %s: member %d silent for %.3fs, excluded from the group ack",
                            g.flow_id, member, to_seconds(now - heard))
        if g.aggregation:
            self._maybe_emit()
        g.check_done()
        self._watchdog = g.sim.schedule_in(g.agg_interval, self._check_stale)


class McEdge(_McEndpoint):
    """Forwards to its member and keeps the last `capacity` packets for local repair"""

    def __init__(self, group: "MulticastTransfer", node: str, member: int, capacity: int):
        super().__init__(group, node)
        self.member = member
        self.capacity = capacity
        self.cache: "OrderedDict[int, bytes]" = OrderedDict()
        self.repairs = 0

    def on_packet(self, pkt: Packet) -> None:
        g = self.group
        header = pkt.header
        if isinstance(header, McData):
            self._cache(header.seq, header.data)
            self.send(g.member_node(self.member), header, g.payload_bytes, PacketKind.DATA)
        elif isinstance(header, McNack):
            missing = []
            for seq in header.seqs:
                if seq in self.cache:
                    self.repairs += 1
                    g.stats.edge_repairs += 1
                    logger.debug("multicast %s: edge %s repairs %d", g.flow_id, self.node, seq)
                    repair = McData(seq, repair=True, target=self.member, data=self.cache[seq])
                    self.send(g.member_node(self.member), repair, g.payload_bytes, PacketKind.DATA)
                else:
                    missing.append(seq)
            if missing:
                self.send(g.gateway, McNack(header.member, tuple(missing)), MCAST_CTRL_BYTES, PacketKind.CONTROL)

    def _cache(self, seq: int, data: bytes) -> None:
        if self.capacity <= 0:
            return
        self.cache[seq] = data
        self.cache.move_to_end(seq)
        while len(self.cache) > self.capacity:
            self.cache.popitem(last=False)


class McMember(_McEndpoint):
    """Receives the group stream, acknowledges cumulatively and NACKs gaps"""

    def __init__(self, group: "MulticastTransfer", node: str, index: int):
        super().__init__(group, node)
        self.index = index
        self.received: Set[int] = set()
        self.chunks: Dict[int, bytes] = {}
        self.bytes_received = 0
        self.digest_ok: Optional[bool] = None
        self.cumulative = 0
        self.highest = -1
        self.acks_sent = 0
        self.nacks_sent = 0
        self._nacked: Dict[int, SimTime] = {}

    def on_packet(self, pkt: Packet) -> None:
        g = self.group
        header: McData = pkt.header
        now = g.sim.now
        if header.seq not in self.received:
            self.received.add(header.seq)
            self.chunks[header.seq] = header.data
            self.bytes_received += len(header.data)
            self._nacked.pop(header.seq, None)
            g.metrics.on_receive(g.flow_id, now, (header.seq,), g.payload_bytes * 8, pkt.sent_at)
            while self.cumulative in self.received:
                self.cumulative += 1
        self.highest = max(self.highest, header.seq)
        self._send_ack()
        self._nack_gaps()
        if self.cumulative >= g.packets:
            self._verify()
            g.on_member_done(self.index)

    def _verify(self) -> None:
        if self.digest_ok is not None:
            return
        g = self.group
        data = b"".join(self.chunks[seq] for seq in range(g.packets))
        self.digest_ok = hashlib.sha256(data).digest() == g.digest
        g.stats.member_digest_ok[self.index] = self.digest_ok
        if not self.digest_ok:
            logger.error("multicast %s: member %d object digest mismatch", g.flow_id, self.index)

    def _send_ack(self) -> None:
        g = self.group
        self.acks_sent += 1
        g.stats.member_acks += 1
        if g.mode == MulticastMode.GROUP:
            self.send(g.gateway, McAck(self.index, self.cumulative), MCAST_CTRL_BYTES, PacketKind.ACK)
        else:
            self.send(g.source, McAck(self.index, self.cumulative), MCAST_CTRL_BYTES, PacketKind.ACK)

    def _nack_gaps(self) -> None:
        g = self.group
        now = g.sim.now
        gaps = []
        for seq in range(self.cumulative, self.highest):
            if seq in self.received:
                continue
            asked = self._nacked.get(seq)
            if asked is None or now - asked >= g.nack_timeout:
                self._nacked[seq] = now
                gaps.append(seq)
        if not gaps:
            return
        self.nacks_sent += 1
        dst = g.edge_node(self.index) if g.mode == MulticastMode.GROUP else g.source
        self.send(dst, McNack(self.index, tuple(gaps)), MCAST_CTRL_BYTES, PacketKind.CONTROL)


class MulticastTransfer:
    """One object sent from the source to every member of the group.

    In unicast mode the same object goes to each member over its own path,
    giving the baseline for the uplink saving.
    """

    def __init__(
        self,
        topo: Topology,
        metrics: MetricsCollector,
        flow_id: str,
        object_bits: int,
        mode: MulticastMode = MulticastMode.GROUP,
        payload_bytes: int = MAX_PACKET_BYTES,
        window: int = 64,
        edge_buffer: int = 64,
        aggregation: bool = True,
        agg_interval: SimTime = 0,
        stale_after_rtts: float = 4.0,
        payload: Optional[bytes] = None,
    ):
        self.topo = topo
        self.sim = topo.sim
        self.metrics = metrics
        self.flow_id = flow_id
        self.mode = MulticastMode(mode)
        self.payload_bytes = payload_bytes
        self.packets = max(math.ceil(object_bits / (payload_bytes * 8)), 1)
        if payload is None:
            payload = object_payload(-(-object_bits // 8), self.sim.rng(f"workload/{flow_id}"))
        self.payload = payload
        self.digest = hashlib.sha256(payload).digest()
        self.window = window
        self.aggregation = aggregation
        self.source = topo.server
        self.gateway = "gateway"
        self.n_members = sum(1 for name in topo.nodes if name.startswith("member"))
        if self.n_members < 1:
            raise ValueError("multicast group needs at least one member")

        self.rtt = topo.base_rtt(self.source, self.member_node(0), payload_bytes * 8, MCAST_CTRL_BYTES * 8)
        self.agg_interval = agg_interval or max(self.rtt // 4, 1)
        self.stale_after = int(stale_after_rtts * self.rtt)
        self.nack_timeout = self.rtt
        self.repair_timeout = max(4 * self.rtt, millis(200))
        self.stale_members: Set[int] = set()

        self.stats = GroupTransferStats(self.n_members, self.packets, self.mode.value)
        metrics.flow(flow_id, "hpt-multicast" if self.mode == MulticastMode.GROUP else "unicast", "")

        self.source_ep = McSource(self, self.source)
        self.members = [McMember(self, self.member_node(i), i) for i in range(self.n_members)]
        self.gateway_ep: Optional[McGateway] = None
        self.edges: List[McEdge] = []
        if self.mode == MulticastMode.GROUP:
            self.gateway_ep = McGateway(self, self.gateway)
            self.edges = [McEdge(self, self.edge_node(i), i, edge_buffer) for i in range(self.n_members)]
        self.handle: Optional[TransferHandle] = None

    def chunk(self, seq: int) -> bytes:
        return self.payload[seq * self.payload_bytes:(seq + 1) * self.payload_bytes]

    @staticmethod
    def member_node(i: int) -> str:
        return f"member{i}"

    @staticmethod
    def edge_node(i: int) -> str:
        return f"edge{i}"

    def start(self) -> TransferHandle:
        self.stats.started_at = self.sim.now
        self.handle = TransferHandle(self.flow_id, len(self.payload), self.sim.now)
        self.metrics.on_request(self.flow_id, self.sim.now)
        logger.info("multicast %s: %d packets to %d members (%s)", self.flow_id, self.packets,
                    self.n_members, self.mode.value)
        if self.gateway_ep is not None:
            self.gateway_ep.start()
        self.source_ep.start()
        return self.handle

    def on_member_done(self, member: int) -> None:
        if member not in self.stats.member_done_at:
            self.stats.member_done_at[member] = self.sim.now
        self.check_done()

    def check_done(self) -> None:
        if self.stats.completed_at is not None:
            return
        live = [i for i in range(self.n_members) if i not in self.stale_members]
        if not live or any(i not in self.stats.member_done_at for i in live):
            return
        now = self.sim.now
        self.stats.completed_at = now
        self.metrics.on_complete(self.flow_id, now)
        unverified = [i for i in range(self.n_members) if not self.stats.member_digest_ok.get(i, False)]
        if unverified:
            logger.warning("multicast %s: done without a verified copy at members %s", self.flow_id, unverified)
        if self.handle is not None:
            # bytes held by the member with the least
            self.handle.delivered_bytes = min(m.bytes_received for m in self.members)
            self.handle.digest_ok = not unverified
            self.handle.finish(now)


def hpt_multicast_send(topo: Topology, metrics: MetricsCollector, object_bits: int, **kwargs: Any) -> MulticastTransfer:
    """Start a group transfer; its `stats` fill in as the simulation runs"""
    transfer = MulticastTransfer(topo, metrics, kwargs.pop("flow_id", "mcast"), object_bits, **kwargs)
    transfer.start()
    return transfer
