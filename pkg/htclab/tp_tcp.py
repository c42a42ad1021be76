# htclab/tp_tcp.py - in-order byte stream with one send and one receive buffer
#
# Cumulative ACKs only (no SACK), NewReno-style fast recovery, go-back-N on
# timeout and Karn's rule for RTT sampling. The handshake (SYN plus TLS) is
# two round trips of control packets and carries no crypto.
import hashlib
import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum, IntFlag
from typing import Callable, Deque, Dict, List, Optional, Tuple

from htclab.cc import CongestionController, LossKind
from htclab.metrics import MetricsCollector, TraceKind
from htclab.netgraph import Packet, PacketKind, Topology
from htclab.sim_core import EventHandle, SimTime, seconds, to_seconds
from htclab.workload import TransferHandle

logger = logging.getLogger(__name__)

MSS = 1460
HEADER_BYTES = 40
ACK_BYTES = 40
HANDSHAKE_BYTES = 64
HANDSHAKE_ROUNDS = 2
MAX_RTO = seconds(60)


class TcpState(str, Enum):
    CLOSED = "Closed"
    HANDSHAKING = "Handshaking"
    ESTABLISHED = "Established"
    CLOSING = "Closing"


class TcpFlag(IntFlag):
    SYN = 1
    ACK = 2
    FIN = 4


@dataclass(slots=True)
class TcpSegmentHeader:
    seq: int
    ack: int
    flags: TcpFlag
    window: int
    payload: bytes = b""
    hs_round: int = 0


@dataclass(slots=True)
class _SentSegment:
    length: int
    sent_at: SimTime
    retransmitted: bool = False


class RtoEstimator:
    """SRTT/RTTVAR retransmission timer with exponential backoff"""

    def __init__(self, initial: SimTime = seconds(1), minimum: SimTime = seconds(0.2)):
        self.minimum = minimum
        self.srtt: Optional[float] = None
        self.rttvar = 0.0
        self._base = initial
        self._backoff = 1

    @property
    def rto(self) -> SimTime:
        return min(self._base * self._backoff, MAX_RTO)

    def update(self, sample: SimTime) -> None:
        if self.srtt is None:
            self.srtt = float(sample)
            self.rttvar = sample / 2.0
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - sample)
            self.srtt = 0.875 * self.srtt + 0.125 * sample
        self._base = max(self.minimum, int(self.srtt + 4.0 * self.rttvar))

    def backoff(self) -> None:
        if self.rto < MAX_RTO:
            self._backoff *= 2

    def reset_backoff(self) -> None:
        self._backoff = 1


class TcpConnection:
    def __init__(
        self,
        topo: Topology,
        metrics: MetricsCollector,
        flow_id: str,
        local: str,
        peer: str,
        port: int,
        cc: CongestionController,
        snd_buf: int = 128 * 1024,
        rcv_buf: int = 128 * 1024,
        rto_initial: SimTime = seconds(1),
        rto_min: SimTime = seconds(0.2),
    ):
        self.topo = topo
        self.sim = topo.sim
        self.metrics = metrics
        self.flow_id = flow_id
        self.local = local
        self.peer = peer
        self.port = port
        self.cc = cc
        self.snd_buf = snd_buf
        self.rcv_buf = rcv_buf
        self.rto = RtoEstimator(rto_initial, rto_min)
        self.state = TcpState.CLOSED

        # send side
        self.snd_una = 0
        self.snd_nxt = 0
        self.snd_max = 0
        self._app_end = 0
        self._buf = bytearray()
        self._buf_start = 0
        self._segs: Dict[int, _SentSegment] = {}
        self._seg_order: Deque[int] = deque()
        self.dup_acks = 0
        self.recover = 0
        self.inflation = 0
        self.peer_window = rcv_buf
        self._rto_timer: Optional[EventHandle] = None
        self._closing = False
        self.timeouts = 0
        self.fast_retransmits = 0

        # receive side
        self.rcv_nxt = 0
        self._ooo: Dict[int, bytes] = {}
        self._ooo_bytes = 0
        self.discarded = 0
        # end of the peer's byte stream once its FIN segment arrives
        self.peer_fin: Optional[int] = None
        self.delivery_log: List[Tuple[SimTime, int, int]] = []

        # handshake
        self._hs_round = 0
        self._hs_sent_at: SimTime = 0
        self._hs_retried = False
        self._hs_timer: Optional[EventHandle] = None
        self.connected_at: Optional[SimTime] = None

        self.on_established: List[Callable[["TcpConnection"], None]] = []
        self.on_writable: Optional[Callable[["TcpConnection"], None]] = None
        self.on_deliver: Optional[Callable[[int, bytes], None]] = None

        cc.on_change = self._trace_cwnd
        topo.attach(local, port, self.on_packet)

    # ------------------------------------------------------------------
    # handshake
    # ------------------------------------------------------------------
    def connect(self) -> None:
        """Active open; the connection is usable HANDSHAKE_ROUNDS round trips later"""
        if self.state != TcpState.CLOSED:
            raise RuntimeError(f"tcp {self.flow_id}: connect() in state {self.state.value}")
        self.state = TcpState.HANDSHAKING
        self._hs_round = 1
        self._send_handshake()

    def _send_handshake(self) -> None:
        hdr = TcpSegmentHeader(0, 0, TcpFlag.SYN, self.rcv_buf, hs_round=self._hs_round)
        self._hs_sent_at = self.sim.now
        self._send_control(hdr, HANDSHAKE_BYTES)
        self.sim.cancel(self._hs_timer)
        self._hs_timer = self.sim.schedule_in(self.rto.rto, self._on_handshake_timeout)

    def _on_handshake_timeout(self) -> None:
        if self.state != TcpState.HANDSHAKING:
            return
        logger.info("tcp %s: handshake round %d timed out", self.flow_id, self._hs_round)
        self._hs_retried = True
        self.rto.backoff()
        self._send_handshake()

    def _on_handshake(self, hdr: TcpSegmentHeader) -> None:
        if not hdr.flags & TcpFlag.ACK:
            # passive side answers every round, retransmissions included
            reply = TcpSegmentHeader(0, 0, TcpFlag.SYN | TcpFlag.ACK, self.rcv_buf, hs_round=hdr.hs_round)
            self._send_control(reply, HANDSHAKE_BYTES)
            if hdr.hs_round >= HANDSHAKE_ROUNDS and self.state == TcpState.CLOSED:
                self.state = TcpState.ESTABLISHED
            return
        if self.state != TcpState.HANDSHAKING or hdr.hs_round != self._hs_round:
            return
        if not self._hs_retried:
            self.rto.update(self.sim.now - self._hs_sent_at)
        self._hs_retried = False
        self.rto.reset_backoff()
        self.peer_window = hdr.window
        if self._hs_round < HANDSHAKE_ROUNDS:
            self._hs_round += 1
            self._send_handshake()
            return
        self.sim.cancel(self._hs_timer)
        self.state = TcpState.CLOSING if self._closing else TcpState.ESTABLISHED
        self.connected_at = self.sim.now
        logger.debug("tcp %s established at %.6fs", self.flow_id, to_seconds(self.sim.now))
        for callback in self.on_established:
            callback(self)
        self._try_send()

    def _send_control(self, hdr: TcpSegmentHeader, size_bytes: int) -> None:
        kind = PacketKind.CONTROL if hdr.flags & TcpFlag.SYN else PacketKind.ACK
        pkt = Packet(self.topo.next_uid(), self.flow_id, self.local, self.peer, self.port, size_bytes * 8, kind, hdr)
        self.topo.send(pkt)

    # ------------------------------------------------------------------
    # application interface
    # ------------------------------------------------------------------
    @property
    def send_space(self) -> int:
        return self.snd_buf - (len(self._buf) - self._buf_start)

    @property
    def flight(self) -> int:
        return self.snd_nxt - self.snd_una

    @property
    def advertised_window(self) -> int:
        return self.rcv_buf - self._ooo_bytes

    def send(self, data: bytes, fin: bool = False) -> int:
        """Copy as much of data as the send buffer holds; returns the accepted count.

        With fin set and all of data accepted the connection closes, so the
        segment carrying the last byte goes out with FIN.
        """
        if self.state not in (TcpState.ESTABLISHED, TcpState.HANDSHAKING) or self._closing:
            raise RuntimeError(f"tcp {self.flow_id}: send() in state {self.state.value}")
        n = min(self.send_space, len(data))
        if n > 0:
            self._buf += data[:n]
            self._app_end += n
        if fin and n == len(data):
            self.close()
        self._try_send()
        return n

    def close(self) -> None:
        """No more data; Closing until every byte is acknowledged, then Closed"""
        self._closing = True
        if self.state == TcpState.ESTABLISHED:
            self.state = TcpState.CLOSING
        self._maybe_closed()

    def _maybe_closed(self) -> None:
        if self.state == TcpState.CLOSING and self.snd_una == self._app_end:
            self.state = TcpState.CLOSED
            self.sim.cancel(self._rto_timer)

    # ------------------------------------------------------------------
    # sending
    # ------------------------------------------------------------------
    def _window(self) -> int:
        return min(int(self.cc.cwnd * MSS) + self.inflation, self.peer_window)

    def _try_send(self) -> None:
        if self.state not in (TcpState.ESTABLISHED, TcpState.CLOSING):
            return
        while True:
            if self.snd_nxt < self.snd_max:
                seq = self.snd_nxt
                length = self._segs[seq].length
                retransmit = True
            else:
                available = self._app_end - self.snd_nxt
                if available <= 0:
                    break
                seq, length, retransmit = self.snd_nxt, min(MSS, available), False
            flight = self.snd_nxt - self.snd_una
            # one segment may always be outstanding so a shrunken window cannot wedge the flow
            if flight > 0 and flight + length > self._window():
                break
            self._emit(seq, length, retransmit)
            self.snd_nxt = seq + length
            self.snd_max = max(self.snd_max, self.snd_nxt)
        if self.snd_max > self.snd_una and (self._rto_timer is None or not self._rto_timer.pending):
            self._arm_rto()

    def _emit(self, seq: int, length: int, retransmit: bool) -> None:
        now = self.sim.now
        offset = self._buf_start + seq - self.snd_una
        payload = bytes(self._buf[offset:offset + length])
        flags = TcpFlag.ACK
        if self._closing and seq + length == self._app_end:
            flags |= TcpFlag.FIN
        hdr = TcpSegmentHeader(seq, self.rcv_nxt, flags, self.advertised_window, payload)
        pkt = Packet(
            self.topo.next_uid(), self.flow_id, self.local, self.peer, self.port,
            (length + HEADER_BYTES) * 8, PacketKind.DATA, hdr, data_key=(seq,),
        )
        info = self._segs.get(seq)
        if info is None:
            self._segs[seq] = _SentSegment(length, now)
            self._seg_order.append(seq)
        else:
            info.sent_at = now
            info.retransmitted = True
        self.metrics.on_send(self.flow_id, now, pkt.data_key, length * 8, retransmit)
        self.topo.send(pkt)

    def _retransmit_una(self) -> None:
        info = self._segs.get(self.snd_una)
        if info is not None:
            self._emit(self.snd_una, info.length, True)

    def _arm_rto(self) -> None:
        self.sim.cancel(self._rto_timer)
        self._rto_timer = self.sim.schedule_in(self.rto.rto, self._on_rto)

    def _on_rto(self) -> None:
        if self.snd_max <= self.snd_una:
            return
        self.timeouts += 1
        flight_pkts = (self.snd_max - self.snd_una) / MSS
        logger.info(
            "tcp %s: RTO at %.6fs, snd_una=%d, rto=%.3fs",
            self.flow_id, to_seconds(self.sim.now), self.snd_una, to_seconds(self.rto.rto),
        )
        self.rto.backoff()
        self.cc.on_loss(LossKind.TIMEOUT, flight_pkts)
        for info in self._segs.values():
            info.retransmitted = True
        self.recover = self.snd_max
        self.snd_nxt = self.snd_una
        self.dup_acks = 0
        self.inflation = 0
        self._try_send()
        self._arm_rto()

    # ------------------------------------------------------------------
    # receiving
    # ------------------------------------------------------------------
    def on_packet(self, pkt: Packet) -> None:
        hdr: TcpSegmentHeader = pkt.header
        if hdr.flags & TcpFlag.SYN:
            self._on_handshake(hdr)
        elif hdr.payload:
            self._on_data(pkt, hdr)
        else:
            self._on_ack(hdr)

    def _on_ack(self, hdr: TcpSegmentHeader) -> None:
        if self.state == TcpState.HANDSHAKING:
            return
        ack = hdr.ack
        self.peer_window = hdr.window
        if ack > self.snd_una:
            newly = ack - self.snd_una
            karn_ok = True
            last: Optional[_SentSegment] = None
            while self._seg_order and self._seg_order[0] < ack:
                last = self._segs.pop(self._seg_order.popleft())
                karn_ok = karn_ok and not last.retransmitted
            sample = self.sim.now - last.sent_at if (karn_ok and last is not None) else None
            if sample is not None:
                self.rto.update(sample)
                self.metrics.record_trace(TraceKind.RTT, self.flow_id, self.sim.now, to_seconds(sample))
            self._buf_start += newly
            if self._buf_start >= 65536 and 2 * self._buf_start >= len(self._buf):
                del self._buf[:self._buf_start]
                self._buf_start = 0
            self.snd_una = ack
            self.snd_nxt = max(self.snd_nxt, ack)
            self.rto.reset_backoff()

            self.cc.on_ack(newly / MSS, sample, self.snd_una, self.snd_max)
            if self.cc.in_recovery:
                if ack >= self.recover:
                    self.cc.exit_recovery()
                    self.inflation = 0
                    self.dup_acks = 0
                else:
                    # partial ACK: deflate by what was acked, resend the next hole
                    self.inflation = max(self.inflation - newly, 0) + MSS
                    self._retransmit_una()
            else:
                self.dup_acks = 0

            if self.snd_max > self.snd_una:
                self._arm_rto()
            else:
                self.sim.cancel(self._rto_timer)
            self._maybe_closed()
            if self.on_writable is not None and self.send_space > 0:
                self.on_writable(self)
        elif ack == self.snd_una and self.snd_max > self.snd_una:
            # the window field may shrink with out-of-order data, so it is not compared here
            self.dup_acks += 1
            if self.cc.in_recovery:
                self.inflation += MSS
            elif self.dup_acks == 3:
                self.fast_retransmits += 1
                self.recover = self.snd_max
                self.cc.on_loss(LossKind.FAST_RETRANSMIT, (self.snd_max - self.snd_una) / MSS)
                self.inflation = 3 * MSS
                self._retransmit_una()
        self._try_send()

    def _on_data(self, pkt: Packet, hdr: TcpSegmentHeader) -> None:
        if self.state == TcpState.CLOSED and self.connected_at is None:
            self.state = TcpState.ESTABLISHED
        data = hdr.payload
        self.metrics.on_receive(self.flow_id, self.sim.now, pkt.data_key, len(data) * 8, pkt.sent_at)
        seq, end = hdr.seq, hdr.seq + len(data)
        if hdr.flags & TcpFlag.FIN:
            self.peer_fin = end
        if end <= self.rcv_nxt:
            pass
        elif end - self.rcv_nxt > self.rcv_buf:
            self.discarded += 1
        elif seq > self.rcv_nxt:
            if seq not in self._ooo:
                self._ooo[seq] = data
                self._ooo_bytes += len(data)
        else:
            self._deliver(data[self.rcv_nxt - seq:])
            while self.rcv_nxt in self._ooo:
                chunk = self._ooo.pop(self.rcv_nxt)
                self._ooo_bytes -= len(chunk)
                self._deliver(chunk)
        ack = TcpSegmentHeader(0, self.rcv_nxt, TcpFlag.ACK, self.advertised_window)
        self._send_control(ack, ACK_BYTES)

    def _deliver(self, data: bytes) -> None:
        offset = self.rcv_nxt
        self.rcv_nxt += len(data)
        self.delivery_log.append((self.sim.now, offset, len(data)))
        if self.on_deliver is not None:
            self.on_deliver(offset, data)

    def _trace_cwnd(self, state) -> None:
        self.metrics.record_trace(TraceKind.CWND, self.flow_id, self.sim.now, state.cwnd)


class TcpFlow:
    """Sender at `src` pushing bytes to a receiver at `dst`.

    The sender performs the active open, so the first data segment leaves
    exactly two handshake round trips after start. send_object() moves one
    object and closes; start_stream()/push() keep the connection open.
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
        snd_buf: int = 128 * 1024,
        rcv_buf: int = 128 * 1024,
        rto_initial: SimTime = seconds(1),
        rto_min: SimTime = seconds(0.2),
    ):
        self.topo = topo
        self.sim = topo.sim
        self.metrics = metrics
        self.flow_id = flow_id
        self.sender = TcpConnection(topo, metrics, flow_id, src, dst, port, cc_factory(), snd_buf, rcv_buf, rto_initial, rto_min)
        self.receiver = TcpConnection(topo, metrics, flow_id, dst, src, port, cc_factory(), snd_buf, rcv_buf, rto_initial, rto_min)
        metrics.flow(flow_id, "tcp", self.sender.cc.algo.value)
        self.handle: Optional[TransferHandle] = None
        self._payload = bytearray()
        self._written = 0
        self._open_ended = False
        self._digest = b""
        self._hasher = hashlib.sha256()
        self._received = 0
        self.receiver.on_deliver = self._on_deliver

    def _open(self) -> None:
        self.metrics.on_request(self.flow_id, self.sim.now)
        self.sender.on_writable = lambda conn: self._fill()
        self.sender.on_established.append(lambda conn: self._fill())
        self.sender.connect()

    def send_object(self, payload: bytes) -> TransferHandle:
        self._payload = bytearray(payload)
        self._digest = hashlib.sha256(payload).digest()
        self.handle = TransferHandle(self.flow_id, len(payload), self.sim.now)
        self._open()
        return self.handle

    def start_stream(self) -> None:
        self._open_ended = True
        self._open()

    def push(self, data: bytes) -> None:
        """Append application bytes to an open-ended transfer"""
        self._payload += data
        if self.sender.state == TcpState.ESTABLISHED:
            self._fill()

    def _fill(self) -> None:
        while self._written < len(self._payload):
            chunk = bytes(self._payload[self._written:self._written + 64 * 1024])
            last = not self._open_ended and self._written + len(chunk) >= len(self._payload)
            n = self.sender.send(chunk, fin=last)
            if n == 0:
                break
            self._written += n
        if not self._open_ended and self._written >= len(self._payload):
            self.sender.close()

    def _on_deliver(self, offset: int, data: bytes) -> None:
        self._hasher.update(data)
        self._received += len(data)
        handle = self.handle
        if handle is None:
            return
        handle.delivered_bytes = self._received
        if self._received >= handle.total_bytes:
            handle.digest_ok = self._hasher.digest() == self._digest
            self.metrics.on_complete(self.flow_id, self.sim.now)
            handle.finish(self.sim.now)

    @property
    def first_data_at(self) -> Optional[SimTime]:
        return self.sender.connected_at
