# htclab/metrics.py - packet event log, per-flow statistics and time-series traces
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np

from htclab.errors import SimulationFault
from htclab.models import FlowStats
from htclab.sim_core import SimTime, to_seconds

logger = logging.getLogger(__name__)


REQUEST_EVENT = "request"
COMPLETE_EVENT = "complete"
# order of events sharing a timestamp; receives and drops sit between sends and completion
_EVENT_RANK = {REQUEST_EVENT: 0, "send": 1, COMPLETE_EVENT: 3}


class TraceKind(str, Enum):
    CWND = "cwnd"
    RTT = "rtt"
    QUEUE = "queue"


@dataclass(slots=True)
class PacketRecord:
    t: SimTime
    event: str  # "send" | "recv" | "drop:<reason>" | "request" | "complete"
    flow_id: str
    key: str
    bits: int
    retransmit: bool = False
    sent_at: SimTime = 0


@dataclass
class FlowLog:
    flow_id: str
    proto: str = ""
    cc: str = ""
    request_at: Optional[SimTime] = None
    completed_at: Optional[SimTime] = None
    sends: List[PacketRecord] = field(default_factory=list)
    recvs: List[PacketRecord] = field(default_factory=list)
    drops: List[PacketRecord] = field(default_factory=list)


class Trace:
    """Step-function time series; a sample at an existing timestamp replaces it"""

    def __init__(self, kind: TraceKind, series: str):
        self.kind = kind
        self.series = series
        self.times: List[SimTime] = []
        self.values: List[float] = []

    def __len__(self) -> int:
        return len(self.times)

    def append(self, t: SimTime, value: float) -> None:
        if self.times:
            last = self.times[-1]
            if t == last:
                self.values[-1] = value
                return
            if t < last:
                raise SimulationFault(f"trace {self.kind.value}/{self.series}: sample at {t}ns after {last}ns")
        self.times.append(t)
        self.values.append(float(value))

    def time_average(self, t0: SimTime, t1: SimTime) -> float:
        """Time-weighted mean of the step function over [t0, t1]"""
        if t1 <= t0 or not self.times:
            return 0.0
        times = np.asarray(self.times, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        # Value in force at t0 is the last sample at or before it (0 before the first).
        start = int(np.searchsorted(times, t0, side="right")) - 1
        edges = [t0]
        levels = [values[start] if start >= 0 else 0.0]
        inside = (times > t0) & (times < t1)
        edges.extend(times[inside].tolist())
        levels.extend(values[inside].tolist())
        edges.append(t1)
        widths = np.diff(np.asarray(edges, dtype=np.int64))
        return float(np.dot(widths, levels) / (t1 - t0))

    def values_between(self, t0: SimTime, t1: SimTime) -> np.ndarray:
        times = np.asarray(self.times, dtype=np.int64)
        mask = (times >= t0) & (times <= t1)
        return np.asarray(self.values, dtype=float)[mask]


def _key(data_key: Any) -> str:
    if isinstance(data_key, tuple):
        return ":".join(str(part) for part in data_key)
    return str(data_key)


class MetricsCollector:
    """Collects the event log and traces of one simulation run"""

    def __init__(self, packet_log: bool = True):
        self.flows: Dict[str, FlowLog] = {}
        self.traces: Dict[Tuple[TraceKind, str], Trace] = {}
        self.packet_log = packet_log

    def flow(self, flow_id: str, proto: str = "", cc: str = "") -> FlowLog:
        log = self.flows.get(flow_id)
        if log is None:
            log = self.flows[flow_id] = FlowLog(flow_id, proto, cc)
        return log

    def on_request(self, flow_id: str, t: SimTime) -> None:
        self.flow(flow_id).request_at = t

    def on_complete(self, flow_id: str, t: SimTime) -> None:
        log = self.flow(flow_id)
        if log.completed_at is None:
            log.completed_at = t
            logger.info("flow %s complete at %.6fs", flow_id, to_seconds(t))

    def on_send(self, flow_id: str, t: SimTime, data_key: Any, bits: int, retransmit: bool = False) -> None:
        self.flow(flow_id).sends.append(PacketRecord(t, "send", flow_id, _key(data_key), bits, retransmit, t))

    def on_receive(self, flow_id: str, t: SimTime, data_key: Any, bits: int, sent_at: SimTime) -> None:
        self.flow(flow_id).recvs.append(PacketRecord(t, "recv", flow_id, _key(data_key), bits, False, sent_at))

    def on_drop(self, flow_id: str, t: SimTime, data_key: Any, bits: int, reason: str) -> None:
        if data_key is None:
            return
        self.flow(flow_id).drops.append(PacketRecord(t, f"drop:{reason}", flow_id, _key(data_key), bits))

    def trace(self, kind: TraceKind, series: str) -> Trace:
        trace = self.traces.get((kind, series))
        if trace is None:
            trace = self.traces[(kind, series)] = Trace(kind, series)
        return trace

    def record_trace(self, kind: TraceKind, series: str, t: SimTime, value: float) -> None:
        self.trace(kind, series).append(t, value)

    def packet_rows(self) -> Iterable[PacketRecord]:
        for flow_id in sorted(self.flows):
            log = self.flows[flow_id]
            rows = log.sends + log.recvs + log.drops
            if log.request_at is not None:
                rows.append(PacketRecord(log.request_at, REQUEST_EVENT, flow_id, "", 0))
            if log.completed_at is not None:
                rows.append(PacketRecord(log.completed_at, COMPLETE_EVENT, flow_id, "", 0))
            rows.sort(key=lambda r: (r.t, _EVENT_RANK.get(r.event, 2)))
            yield from rows


def compute_stats(log: FlowLog, scenario: str = "") -> FlowStats:
    """Flow statistics from the event log.

    throughput: distinct delivered bits over (last first-delivery - first send).
    delay and jitter use the first arrival of every distinct data unit, in
    arrival order; jitter is the mean absolute difference of consecutive delays.
    """
    sent_keys = {}
    retransmissions = 0
    bits_on_wire = 0
    first_send: Optional[SimTime] = None
    for rec in log.sends:
        bits_on_wire += rec.bits
        if rec.retransmit:
            retransmissions += 1
        sent_keys.setdefault(rec.key, rec.bits)
        if first_send is None or rec.t < first_send:
            first_send = rec.t

    seen = set()
    delays: List[int] = []
    delivered_bits = 0
    last_delivery: Optional[SimTime] = None
    for rec in log.recvs:
        if rec.key in seen:
            continue
        seen.add(rec.key)
        delivered_bits += rec.bits
        delays.append(rec.t - rec.sent_at)
        last_delivery = rec.t

    stats = FlowStats(
        flow_id=log.flow_id,
        proto=log.proto,
        cc=log.cc,
        scenario=scenario,
        sent_pkts=len(sent_keys),
        delivered_pkts=len(seen),
        retransmissions=retransmissions,
        bits_on_wire=bits_on_wire,
        delivered_bits=delivered_bits,
    )
    if log.request_at is not None and log.completed_at is not None:
        stats.retrieval_time_s = to_seconds(log.completed_at - log.request_at)
    if not seen or first_send is None:
        return stats

    duration = last_delivery - first_send
    d = np.asarray(delays, dtype=np.float64) / 1e9
    stats.defined = duration > 0
    stats.duration_s = to_seconds(duration)
    stats.throughput_bps = delivered_bits / stats.duration_s if duration > 0 else 0.0
    stats.avg_delay_s = float(d.mean())
    stats.jitter_s = float(np.abs(np.diff(d)).mean()) if d.size > 1 else 0.0
    stats.delivery_ratio = len(seen) / len(sent_keys) if sent_keys else 0.0
    return stats


def flow_log_from_rows(flow_id: str, rows: Iterable[Dict[str, str]]) -> FlowLog:
    """Rebuild a FlowLog from exported packet rows (strings as written to CSV)"""
    log = FlowLog(flow_id)
    for row in rows:
        if row["flow"] != flow_id:
            continue
        rec = PacketRecord(
            t=int(row["t_ns"]),
            event=row["event"],
            flow_id=flow_id,
            key=row["key"],
            bits=int(row["bits"]),
            retransmit=row["retransmit"] == "1",
            sent_at=int(row["sent_at_ns"]),
        )
        if rec.event == REQUEST_EVENT:
            log.request_at = rec.t
        elif rec.event == COMPLETE_EVENT:
            log.completed_at = rec.t
        elif rec.event == "send":
            log.sends.append(rec)
        elif rec.event == "recv":
            log.recvs.append(rec)
        else:
            log.drops.append(rec)
    return log
