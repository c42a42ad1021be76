# htclab/harness.py - builds, runs and summarizes scenario points, sweeps and comparisons
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from htclab.cc import CcParams, CongestionController, estimate_queue_backlog
from htclab.errors import ConfigError
from htclab.metrics import MetricsCollector, Trace, TraceKind, compute_stats
from htclab.models import (
    ComparisonTable,
    Proto,
    ResultRow,
    ResultSet,
    RunCounters,
    ScenarioConfig,
    SchedulerKind,
    WorkloadKind,
)
from htclab.netgraph import ScenarioKind, Topology, TopologyParams, build_scenario
from htclab.results import result_store
from htclab.scenario import apply_overrides, expand_sweep
from htclab.sim_core import SimTime, Simulator, to_seconds
from htclab.tp_hpt import (
    AppProfile,
    HptFlow,
    HptSegment,
    MulticastTransfer,
    PriorityScheduler,
    segment_object,
)
from htclab.tp_quic import QuicFlow, QuicState, TicketStore
from htclab.tp_tcp import TcpFlow
from htclab.tp_udp import UdpFlow
from htclab.workload import (
    ObjectSpec,
    SensorStream,
    SensorStreamSpec,
    TransferHandle,
    gen_object,
    object_payload,
    plan_segments,
    split_bytes,
    tile_priority,
    visible_sectors,
)

logger = logging.getLogger(__name__)

FLOW_ID = "flow0"
BOTTLENECK_SERIES = "bottleneck"
SECOND_INTERFACE = "client_eth"

# metrics compared by compare(); a higher value wins the verdict
VERDICT_METRICS = (
    "throughput_bps",
    "avg_delay_s",
    "jitter_s",
    "delivery_ratio",
    "retrieval_time_s",
    "queue_avg",
    "rtt_std_s",
)


@dataclass
class PointOutput:
    """Everything one sweep point hands back to the parent process"""

    index: int
    sweep: Dict[str, str]
    row: ResultRow
    traces: Dict[str, List[Tuple[str, int, float]]] = field(default_factory=dict)
    packets: List[Tuple[int, str, str, str, int, bool, int]] = field(default_factory=list)


# ====================
# Building blocks
# ====================

def topology_params(config: ScenarioConfig) -> TopologyParams:
    n, w = config.network, config.wireless
    return TopologyParams.build(
        lan_rate=n.lan_rate,
        lan_prop=n.lan_prop,
        wan_bottleneck_rate=n.wan_bottleneck_rate,
        wan_access_rate=n.wan_access_rate,
        wan_one_way=n.wan_one_way,
        access_prop=n.access_prop,
        wifi_rate=w.wifi_rate,
        p_loss=w.p_loss,
        max_retries=w.max_retries,
        retry_delay=w.retry_delay,
        impairment_enabled=w.enabled,
        downlink_loss=n.downlink_loss,
        queue_capacity=n.queue_capacity,
        dual_homed=n.dual_homed,
        members=config.multicast.members,
        scale=config.scenario.scale,
    )


def cc_factory(config: ScenarioConfig) -> Callable[[], CongestionController]:
    c = config.cc
    params = CcParams(
        vegas_alpha=c.vegas_alpha,
        vegas_beta=c.vegas_beta,
        vegas_gamma=c.vegas_gamma,
        yeah_alpha_q=c.yeah_alpha_q,
        yeah_phy=c.yeah_phy,
        yeah_delta=c.yeah_delta,
        yeah_epsilon=c.yeah_epsilon,
    )
    algo, initial = config.transport.cc, config.transport.initial_cwnd
    return lambda: CongestionController(algo, params, initial)


def _check_combination(config: ScenarioConfig) -> None:
    kind, proto = config.scenario.kind, config.transport.proto
    workload = config.workload.kind
    if (workload == WorkloadKind.MULTICAST) != (kind == ScenarioKind.MULTICAST):
        raise ConfigError("workload.kind", "the multicast workload runs on the MULTICAST scenario only")
    if workload == WorkloadKind.MULTICAST and proto != Proto.HPT:
        raise ConfigError("transport.proto", "group transfer is an hpt feature")
    if config.transport.migrate_at is not None:
        if proto not in (Proto.QUIC, Proto.HPT):
            raise ConfigError("transport.migrate_at", "only quic and hpt connections migrate")
        if kind != ScenarioKind.WAN_WIFI or not config.network.dual_homed:
            raise ConfigError("transport.migrate_at", "needs a WAN_WIFI scenario with network.dual_homed = true")
    if config.workload.best_effort_share + config.workload.deadline_share > 1.0:
        raise ConfigError("workload.best_effort_share", "class shares exceed 1.0")


def _scaled(value: float, scale: float, floor: int = 1) -> int:
    return max(int(value * scale), floor)


class _Point:
    """Wiring of one simulation run: topology, flow, workload and completion"""

    def __init__(self, config: ScenarioConfig):
        _check_combination(config)
        self.config = config
        self.scale = config.scenario.scale
        self.sim = Simulator(config.scenario.seed)
        self.topo: Topology = build_scenario(self.sim, config.scenario.kind, topology_params(config))
        self.metrics = MetricsCollector(packet_log=config.scenario.packet_log)
        self.handles: List[TransferHandle] = []
        self.flow: Any = None
        self.transfer: Optional[MulticastTransfer] = None
        self.visible_streams: List[int] = []
        self.tickets = TicketStore()
        if self.topo.bottleneck is not None:
            self.topo.bottleneck.monitor = self._on_queue_sample

        w = config.workload
        self.object_bits = _scaled(w.object_bits, self.scale, 8)
        self.object_bytes = -(-self.object_bits // 8)
        self.request_at: SimTime = w.request_at

    def _on_queue_sample(self, t: SimTime, occupancy: int) -> None:
        self.metrics.record_trace(TraceKind.QUEUE, BOTTLENECK_SERIES, t, occupancy)

    def _watch(self, handle: TransferHandle) -> None:
        self.handles.append(handle)
        handle.on_complete.append(self._on_handle_complete)

    def _on_handle_complete(self, handle: TransferHandle) -> None:
        if all(h.complete for h in self.handles):
            self.sim.stop()

    def _payload(self) -> bytes:
        return object_payload(self.object_bytes, self.sim.rng("workload/object"))

    def _sensor_stream(self, sink: Callable[[int, int, int], None]) -> SensorStream:
        w = self.config.workload
        spec = SensorStreamSpec(n_sensors=w.sensors, per_sensor_rate=w.sensor_rate * self.scale, fps=w.fps)
        return SensorStream(self.sim, spec, sink, until=self.config.scenario.duration)

    def _tile_order(self) -> Tuple[bytes, int, int]:
        """Payload laid out visible tiles first; also the visible tile count and prefix length in bytes"""
        w = self.config.workload
        obj = gen_object(ObjectSpec(self.object_bits, w.tiles, w.sectors, self.request_at))
        visible = visible_sectors(w.view_angle, w.fov, w.sectors)
        ordered = tile_priority(obj, w.view_angle, w.fov)
        shown = [t for t in ordered if t.view_angles & visible]
        return self._payload(), len(shown), sum(t.bits for t in shown) // 8

    # ------------------------------------------------------------------
    # per-protocol wiring
    # ------------------------------------------------------------------
    def build(self) -> None:
        proto = self.config.transport.proto
        if self.config.workload.kind == WorkloadKind.MULTICAST:
            self._build_multicast()
        elif proto == Proto.UDP:
            self._build_udp()
        elif proto == Proto.TCP:
            self._build_tcp()
        elif proto == Proto.QUIC:
            self._build_quic()
        else:
            self._build_hpt()
        if self.config.transport.migrate_at is not None:
            self.flow.receiver.bind(SECOND_INTERFACE)
            self.sim.schedule(self.config.transport.migrate_at, self._migrate)

    def _migrate(self) -> None:
        receiver = self.flow.receiver
        if receiver.state != QuicState.ESTABLISHED:
            logger.warning("migration at %.6fs skipped: connection is %s", to_seconds(self.sim.now), receiver.state.value)
            return
        receiver.migrate(SECOND_INTERFACE)

    def _build_udp(self) -> None:
        t = self.config.transport
        rate = t.send_rate * self.scale
        flow = self.flow = UdpFlow(self.topo, self.metrics, FLOW_ID, self.topo.server, self.topo.client,
                                   send_rate=rate, pkt_size=t.pkt_size)
        if self.config.workload.kind == WorkloadKind.STREAM:
            def sink(sensor: int, frame_no: int, frame_bytes: int) -> None:
                for size in split_bytes(frame_bytes, -(-frame_bytes // t.pkt_size)):
                    flow.send_datagram(size)
            self.metrics.on_request(FLOW_ID, self.request_at)
            self._sensor_stream(sink).start(self.request_at)
            return
        self.sim.schedule(self.request_at, lambda: self._watch(flow.send_object(self.object_bits)))

    def _build_tcp(self) -> None:
        t = self.config.transport
        flow = self.flow = TcpFlow(
            self.topo, self.metrics, FLOW_ID, self.topo.server, self.topo.client, cc_factory(self.config),
            snd_buf=_scaled(t.snd_buf, self.scale, 1500), rcv_buf=_scaled(t.rcv_buf, self.scale, 1500),
            rto_initial=t.rto_initial, rto_min=t.rto_min,
        )
        if self.config.workload.kind == WorkloadKind.STREAM:
            self.sim.schedule(self.request_at, flow.start_stream)
            self._sensor_stream(lambda sensor, frame_no, n: flow.push(bytes(n))).start(self.request_at)
            return
        payload = self._payload()
        self.sim.schedule(self.request_at, lambda: self._watch(flow.send_object(payload)))

    def _resume(self) -> bool:
        if not self.config.transport.resume:
            return False
        # a returning client: the server issued a ticket in an earlier session
        self.tickets.issue(self.topo.server, self.topo.client)
        return True

    def _build_quic(self) -> None:
        t, w = self.config.transport, self.config.workload
        n_streams = w.tiles if w.kind == WorkloadKind.TILES else t.streams
        scheduler = PriorityScheduler(self.config.hpt.starvation_quantum) if t.scheduler == SchedulerKind.PRIORITY else None
        flow = self.flow = QuicFlow(
            self.topo, self.metrics, FLOW_ID, self.topo.server, self.topo.client, cc_factory(self.config),
            n_streams=n_streams, buf=_scaled(t.buf, self.scale, 1500),
            max_data=t.max_data, max_stream_data=t.max_stream_data,
            tickets=self.tickets, scheduler=scheduler,
        )
        resume = self._resume()
        if w.kind == WorkloadKind.STREAM:
            self.sim.schedule(self.request_at, flow.start_stream, resume)
            sink = lambda sensor, frame_no, n: flow.push(sensor % n_streams, bytes(n))
            self._sensor_stream(sink).start(self.request_at)
            return
        if w.kind == WorkloadKind.TILES:
            # stream i carries the i-th tile in priority order
            payload, n_visible, _ = self._tile_order()
            self.visible_streams = list(range(n_visible))
        else:
            payload = self._payload()
        self.sim.schedule(self.request_at, lambda: self._watch(flow.send_object(payload, resume)))

    def _build_hpt(self) -> None:
        t, w, h = self.config.transport, self.config.workload, self.config.hpt
        profile = AppProfile(h.reliability_mode, h.latency_target, h.priority)
        priorities = {0: 0, 1: 1} if w.kind == WorkloadKind.TILES else {0: h.priority}
        flow = self.flow = HptFlow(
            self.topo, self.metrics, FLOW_ID, self.topo.server, self.topo.client, cc_factory(self.config),
            profile=profile, buf=_scaled(t.buf, self.scale, 1500),
            max_data=t.max_data, max_stream_data=t.max_stream_data,
            starvation_quantum=h.starvation_quantum, tickets=self.tickets, stream_priorities=priorities,
        )
        resume = self._resume()
        segment_bytes = _scaled(w.segment_bytes, self.scale, 1200)
        if w.kind == WorkloadKind.STREAM:
            self._build_hpt_stream(flow, resume)
            return
        if w.kind == WorkloadKind.TILES:
            payload, _, visible_bytes = self._tile_order()
            stream_of = lambda seg_id, offset: 0 if offset < visible_bytes else 1
            self.visible_streams = [0]
        else:
            payload, stream_of = self._payload(), None
        plan = plan_segments(len(payload), segment_bytes, w.best_effort_share, w.deadline_share)
        segments = segment_object(payload, plan, stream_of)
        self.sim.schedule(self.request_at, lambda: self._watch(flow.send_object(segments, w.deadline, resume)))

    def _build_hpt_stream(self, flow: HptFlow, resume: bool) -> None:
        w = self.config.workload
        frames = w.sensors * w.fps * (-(-self.config.scenario.duration // 1_000_000_000) + 1)
        classes = [cls for _, _, cls in plan_segments(frames, 1, w.best_effort_share, w.deadline_share)]
        counter = iter(range(frames))

        def sink(sensor: int, frame_no: int, n: int) -> None:
            seg_id = next(counter, None)
            if seg_id is None:
                return
            flow.push_segment(HptSegment(seg_id, bytes(n), classes[seg_id], stream_id=0))

        self.sim.schedule(self.request_at, flow.start_stream, w.deadline, resume)
        self._sensor_stream(sink).start(self.request_at)

    def _build_multicast(self) -> None:
        m = self.config.multicast
        transfer = self.transfer = MulticastTransfer(
            self.topo, self.metrics, FLOW_ID, self.object_bits, mode=m.mode, window=m.window,
            edge_buffer=m.edge_buffer, aggregation=m.aggregation, agg_interval=m.agg_interval,
            stale_after_rtts=m.stale_after_rtts, payload=self._payload(),
        )
        self.sim.schedule(self.request_at, lambda: self._watch(transfer.start()))

    # ------------------------------------------------------------------
    # summary
    # ------------------------------------------------------------------
    def extras(self) -> Dict[str, float]:
        extra: Dict[str, float] = {}
        flow = self.flow
        if self.transfer is not None:
            s = self.transfer.stats
            extra.update(
                members=float(s.members),
                source_uplink_packets=float(s.source_uplink_packets),
                source_repairs=float(s.source_repairs),
                source_timeouts=float(s.source_timeouts),
                edge_repairs=float(s.edge_repairs),
                nacks_escalated=float(s.nacks_escalated),
                member_acks=float(s.member_acks),
                upstream_acks=float(s.upstream_acks),
                stale_events=float(s.stale_events),
                members_verified=float(sum(s.member_digest_ok.values())),
            )
            return extra
        if isinstance(flow, UdpFlow):
            extra.update(datagrams_sent=float(flow.sent), datagrams_dropped=float(flow.dropped))
            return extra
        if flow.first_data_at is not None:
            extra["first_data_s"] = to_seconds(flow.first_data_at - self.request_at)
        if isinstance(flow, TcpFlow):
            extra.update(timeouts=float(flow.sender.timeouts), fast_retransmits=float(flow.sender.fast_retransmits))
        else:
            extra.update(
                packets_lost=float(flow.sender.packets_lost),
                handshake_packets=float(flow.sender.handshake_packets),
                zero_rtt=1.0 if flow.sender.zero_rtt else 0.0,
                migrations=float(len(flow.receiver.migrations)),
            )
        if self.visible_streams:
            done = [flow.stream_done_at(s) for s in self.visible_streams]
            if None not in done:
                extra["visible_done_s"] = to_seconds(max(done) - self.request_at)
        if isinstance(flow, HptFlow):
            for cls, totals in flow.class_totals().items():
                for name, value in totals.items():
                    extra[f"{cls.lower()}_{name}"] = float(value)
        return extra


def _step_values(trace: Trace, at: np.ndarray) -> np.ndarray:
    """Values of a step trace in force at each of the given times"""
    times = np.asarray(trace.times, dtype=np.int64)
    idx = np.searchsorted(times, at, side="right") - 1
    values = np.asarray(trace.values, dtype=float)
    return np.where(idx >= 0, values[np.clip(idx, 0, None)], 0.0)


def steady_backlog(cwnd: Trace, rtt: Trace, t0: SimTime, t1: SimTime) -> float:
    """Mean estimated queue backlog of a flow over the RTT samples in [t0, t1]"""
    if not len(rtt) or not len(cwnd):
        return 0.0
    base = int(min(rtt.values) * 1e9)
    times = np.asarray(rtt.times, dtype=np.int64)
    mask = (times >= t0) & (times <= t1)
    if not mask.any():
        return 0.0
    samples = np.asarray(rtt.values, dtype=float)[mask]
    windows = _step_values(cwnd, times[mask])
    backlog = [estimate_queue_backlog(w, base, int(s * 1e9)) for w, s in zip(windows, samples)]
    return float(np.mean(backlog))


def run_point(index: int, sweep: Dict[str, str], config: ScenarioConfig) -> PointOutput:
    """Build and run one independent simulation; safe to call in a worker process"""
    logger.info(f"point {index} {config.label} {sweep or ''} starting")
    point = _Point(config)
    point.build()
    summary = point.sim.run_until(config.scenario.duration)
    point.topo.check_conservation()

    metrics, topo = point.metrics, point.topo
    log = metrics.flows[FLOW_ID]
    stats = compute_stats(log, config.scenario.kind.value)
    if not stats.defined:
        logger.warning(f"point {index} {config.label}: no data delivered, statistics undefined")

    end = summary.final_clock
    start = point.request_at
    t0 = end - int(config.scenario.steady_fraction * max(end - start, 0))
    queue = metrics.traces.get((TraceKind.QUEUE, BOTTLENECK_SERIES))
    cwnd = metrics.traces.get((TraceKind.CWND, FLOW_ID))
    rtt = metrics.traces.get((TraceKind.RTT, FLOW_ID))

    extra = point.extras()
    if cwnd is not None and rtt is not None:
        extra["backlog_avg"] = steady_backlog(cwnd, rtt, t0, end)
    counters = RunCounters(
        events_scheduled=summary.events_scheduled,
        events_executed=summary.events_executed,
        events_cancelled=summary.events_cancelled,
        events_pending=summary.events_pending,
        final_clock_ns=summary.final_clock,
        packets_injected=topo.counters.injected,
        packets_delivered=topo.counters.delivered,
        drops=dict(topo.counters.drops),
    )
    suffix = ",".join(f"{k}={v}" for k, v in sweep.items())
    row = ResultRow(
        point=index,
        label=f"{config.label}[{suffix}]" if suffix else config.label,
        scenario=config.scenario.kind.value,
        proto=config.transport.proto.value,
        cc=log.cc,
        sweep=sweep,
        stats=stats,
        queue_avg=queue.time_average(t0, end) if queue is not None else 0.0,
        cwnd_avg=cwnd.time_average(t0, end) if cwnd is not None else 0.0,
        rtt_std_s=float(np.std(rtt.values)) if rtt is not None and len(rtt) > 1 else 0.0,
        extra=extra,
        counters=counters,
    )

    traces: Dict[str, List[Tuple[str, int, float]]] = {kind.value: [] for kind in TraceKind}
    for (kind, series), trace in sorted(metrics.traces.items(), key=lambda item: (item[0][0].value, item[0][1])):
        traces[kind.value].extend((series, t, v) for t, v in zip(trace.times, trace.values))
    packets = []
    if config.scenario.packet_log:
        packets = [(r.t, r.event, r.flow_id, r.key, r.bits, r.retransmit, r.sent_at) for r in metrics.packet_rows()]

    logger.info(
        f"point {index} {config.label} finished at {to_seconds(end):.6f}s after "
        f"{summary.events_executed} events (complete={log.completed_at is not None})"
    )
    return PointOutput(index, sweep, row, traces, packets)


# ====================
# Runs, sweeps and comparisons
# ====================

def execute(config: ScenarioConfig, jobs: int = 1) -> List[PointOutput]:
    """Run every sweep point of a config; output order follows the sweep order"""
    points = expand_sweep(config)
    if jobs <= 1 or len(points) == 1:
        return [run_point(i, labels, cfg) for i, (labels, cfg) in enumerate(points)]
    with ProcessPoolExecutor(max_workers=min(jobs, len(points))) as pool:
        futures = [pool.submit(run_point, i, labels, cfg) for i, (labels, cfg) in enumerate(points)]
        return [f.result() for f in futures]


def _result_set(config: ScenarioConfig, outputs: Sequence[PointOutput]) -> ResultSet:
    return ResultSet(
        label=config.label,
        config=config.model_dump(mode="json"),
        rows=[o.row for o in outputs],
    )


def _export(result: ResultSet, outputs: Sequence[PointOutput], out: Optional[str]) -> ResultSet:
    if out is None:
        return result
    result.files = result_store.write(out, result, outputs)
    return result


def run(config: ScenarioConfig, out: Optional[str] = None, seed: Optional[int] = None,
        scale: Optional[float] = None, jobs: int = 1) -> ResultSet:
    config = apply_overrides(config, seed, scale)
    logger.info(f"run {config.label}: {config.scenario.kind.value} {config.transport.proto.value}")
    outputs = execute(config, jobs)
    return _export(_result_set(config, outputs), outputs, out)


def sweep(config: ScenarioConfig, out: Optional[str] = None, seed: Optional[int] = None,
          scale: Optional[float] = None, jobs: int = 1) -> ResultSet:
    if not config.sweep:
        raise ConfigError("sweep", "the scenario has no [sweep] section")
    return run(config, out, seed, scale, jobs)


def verdicts(rows: Sequence[ResultRow]) -> Dict[str, str]:
    """For every metric, the label of the row with the highest value (first wins ties)"""
    result = {}
    for metric in VERDICT_METRICS:
        best: Optional[Tuple[float, str]] = None
        for row in rows:
            value = getattr(row, metric, None)
            if value is None:
                value = getattr(row.stats, metric, None)
            if value is None:
                continue
            if best is None or value > best[0]:
                best = (value, row.label)
        if best is not None:
            result[metric] = best[1]
    return result


def compare(configs: Sequence[ScenarioConfig], out: Optional[str] = None, seed: Optional[int] = None,
            scale: Optional[float] = None, jobs: int = 1) -> ComparisonTable:
    if len(configs) < 2:
        raise ConfigError("compare", "needs at least two configs")
    kinds = {c.scenario.kind for c in configs}
    if len(kinds) != 1:
        names = ", ".join(sorted(k.value for k in kinds))
        raise ConfigError("scenario.kind", f"compare needs configs of one scenario kind, got {names}")

    rows: List[ResultRow] = []
    outputs: List[PointOutput] = []
    for config in configs:
        config = apply_overrides(config, seed, scale)
        for output in execute(config, jobs):
            output.index = len(outputs)
            output.row.point = output.index
            outputs.append(output)
            rows.append(output.row)

    table = ComparisonTable(scenario=configs[0].scenario.kind.value, rows=rows, verdicts=verdicts(rows))
    if out is not None:
        result_store.write(out, ResultSet(label="compare", rows=rows), outputs, table)
    return table
