# htclab/models.py - enums and pydantic models shared by the harness, exports and API
from enum import Enum
from typing import Annotated, Any, Dict, List, Optional, Union

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator

from htclab.cc import SUPPORTED_ALGOS, CcAlgo
from htclab.netgraph import ScenarioKind
from htclab.units import parse_rate, parse_size, parse_time

# ====================
# ENUMS
# ====================

class Proto(str, Enum):
    UDP = "udp"
    TCP = "tcp"
    QUIC = "quic"
    HPT = "hpt"

class WorkloadKind(str, Enum):
    OBJECT = "object"
    TILES = "tiles"
    STREAM = "stream"
    MIXED = "mixed"
    MULTICAST = "multicast"

class ReliabilityMode(str, Enum):
    FULL = "FULL"
    SEGMENT_CLASS = "SEGMENT_CLASS"

class SegmentClass(str, Enum):
    RELIABLE = "RELIABLE"
    BEST_EFFORT = "BEST_EFFORT"
    DEADLINE = "DEADLINE"

class SchedulerKind(str, Enum):
    ROUND_ROBIN = "round_robin"
    PRIORITY = "priority"

class MulticastMode(str, Enum):
    GROUP = "group"
    UNICAST = "unicast"

# ====================
# UNIT-SUFFIXED FIELD TYPES
# ====================
Bytes = Annotated[int, BeforeValidator(parse_size)]
Bits = Annotated[float, BeforeValidator(parse_rate)]
Rate = Annotated[float, BeforeValidator(parse_rate)]
Duration = Annotated[int, BeforeValidator(parse_time)]

# ====================
# SCENARIO CONFIG SECTIONS
# ====================

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False, validate_assignment=True)

class ScenarioSection(_Section):
    kind: ScenarioKind = ScenarioKind.WAN
    label: str = ""
    seed: int = 1
    scale: float = Field(1.0, gt=0.0, le=1.0)
    duration: Duration = Field(60_000_000_000, gt=0)
    packet_log: bool = False
    # Fraction of the run, counted from the end, used for steady-state averages.
    steady_fraction: float = Field(0.5, gt=0.0, le=1.0)

class TransportSection(_Section):
    proto: Proto = Proto.TCP
    cc: CcAlgo = CcAlgo.YEAH
    snd_buf: Bytes = Field(128 * 1024, gt=0)
    rcv_buf: Bytes = Field(128 * 1024, gt=0)
    buf: Bytes = Field(4 * 1024 * 1024, gt=0)
    streams: int = Field(8, ge=1, le=256)
    resume: bool = False
    send_rate: Rate = Field(0.0, ge=0.0)
    pkt_size: Bytes = Field(1500, ge=64, le=65507)
    initial_cwnd: float = Field(10.0, ge=1.0)
    rto_initial: Duration = Field(1_000_000_000, gt=0)
    rto_min: Duration = Field(200_000_000, gt=0)
    max_data: Bytes = Field(64 * 1024 * 1024, gt=0)
    max_stream_data: Bytes = Field(16 * 1024 * 1024, gt=0)
    scheduler: SchedulerKind = SchedulerKind.ROUND_ROBIN
    migrate_at: Optional[Duration] = None

    @field_validator("cc")
    @classmethod
    def _implemented(cls, value: CcAlgo) -> CcAlgo:
        if value not in SUPPORTED_ALGOS:
            raise ValueError(f"{value.value} is reserved and not implemented")
        return value

class WorkloadSection(_Section):
    kind: WorkloadKind = WorkloadKind.OBJECT
    object_bits: Bits = Field(400e6, gt=0)
    request_at: Duration = Field(0, ge=0)
    tiles: int = Field(8, ge=1)
    sectors: int = Field(8, ge=1)
    view_angle: float = 0.0
    # Width of the viewport in degrees; 0 selects only the sector under view_angle.
    fov: float = Field(0.0, ge=0.0, le=360.0)
    sensors: int = Field(8, ge=1)
    sensor_rate: Rate = Field(40e6, gt=0)
    fps: int = Field(30, ge=1, le=1000)
    segment_bytes: Bytes = Field(64 * 1024, gt=0)
    best_effort_share: float = Field(0.0, ge=0.0, le=1.0)
    deadline_share: float = Field(0.0, ge=0.0, le=1.0)
    deadline: Duration = Field(100_000_000, gt=0)

class NetworkSection(_Section):
    lan_rate: Rate = Field(400e6, gt=0)
    lan_prop: Duration = Field(100_000, ge=0)
    wan_bottleneck_rate: Rate = Field(400e6, gt=0)
    wan_access_rate: Rate = Field(1e9, gt=0)
    wan_one_way: Duration = Field(25_000_000, gt=0)
    access_prop: Duration = Field(500_000, ge=0)
    queue_capacity: int = Field(100, ge=1)
    downlink_loss: float = Field(0.0, ge=0.0, le=1.0)
    dual_homed: bool = False

class WirelessSection(_Section):
    enabled: bool = True
    p_loss: float = Field(0.2, ge=0.0, le=1.0)
    max_retries: int = Field(7, ge=0)
    retry_delay: Duration = Field(500_000, ge=0)
    # unset runs the wifi hop at network.wan_access_rate
    wifi_rate: Optional[Rate] = Field(None, gt=0)

class CcSection(_Section):
    vegas_alpha: float = Field(2.0, gt=0)
    vegas_beta: float = Field(4.0, gt=0)
    vegas_gamma: float = Field(1.0, gt=0)
    yeah_alpha_q: float = Field(80.0, gt=0)
    yeah_phy: float = Field(8.0, gt=0)
    yeah_delta: float = Field(3.0, gt=0)
    yeah_epsilon: float = Field(1.0, gt=0)

class HptSection(_Section):
    reliability_mode: ReliabilityMode = ReliabilityMode.SEGMENT_CLASS
    latency_target: Duration = Field(100_000_000, gt=0)
    priority: int = Field(0, ge=0, le=7)
    starvation_quantum: int = Field(64, ge=1)

class MulticastSection(_Section):
    members: int = Field(4, ge=1, le=64)
    mode: MulticastMode = MulticastMode.GROUP
    edge_buffer: int = Field(64, ge=0)
    window: int = Field(64, ge=1)
    aggregation: bool = True
    # 0 selects a quarter of the group round trip.
    agg_interval: Duration = Field(0, ge=0)
    stale_after_rtts: float = Field(4.0, gt=0)

class SweepAxis(_Section):
    field: str
    values: List[str] = Field(min_length=1)

class ScenarioConfig(_Section):
    scenario: ScenarioSection = Field(default_factory=ScenarioSection)
    transport: TransportSection = Field(default_factory=TransportSection)
    workload: WorkloadSection = Field(default_factory=WorkloadSection)
    network: NetworkSection = Field(default_factory=NetworkSection)
    wireless: WirelessSection = Field(default_factory=WirelessSection)
    cc: CcSection = Field(default_factory=CcSection)
    hpt: HptSection = Field(default_factory=HptSection)
    multicast: MulticastSection = Field(default_factory=MulticastSection)
    sweep: List[SweepAxis] = Field(default_factory=list)

    @property
    def label(self) -> str:
        if self.scenario.label:
            return self.scenario.label
        t = self.transport
        if t.proto in (Proto.TCP, Proto.QUIC, Proto.HPT):
            return f"{t.proto.value}-{t.cc.value}"
        return t.proto.value

# ====================
# RESULT MODELS
# ====================

class FlowStats(BaseModel):
    flow_id: str
    proto: str = ""
    cc: str = ""
    scenario: str = ""
    defined: bool = False
    throughput_bps: float = 0.0
    avg_delay_s: float = 0.0
    jitter_s: float = 0.0
    delivery_ratio: float = 0.0
    retrieval_time_s: Optional[float] = None
    duration_s: float = 0.0
    sent_pkts: int = 0
    delivered_pkts: int = 0
    retransmissions: int = 0
    bits_on_wire: int = 0
    delivered_bits: int = 0

class RunCounters(BaseModel):
    events_scheduled: int = 0
    events_executed: int = 0
    events_cancelled: int = 0
    events_pending: int = 0
    final_clock_ns: int = 0
    packets_injected: int = 0
    packets_delivered: int = 0
    drops: Dict[str, int] = {}

class ResultRow(BaseModel):
    point: int
    label: str
    scenario: str
    proto: str
    cc: str
    sweep: Dict[str, str] = {}
    stats: FlowStats
    queue_avg: float = 0.0
    cwnd_avg: float = 0.0
    rtt_std_s: float = 0.0
    extra: Dict[str, float] = {}
    counters: RunCounters = RunCounters()

class ResultSet(BaseModel):
    label: str
    config: Dict = {}
    rows: List[ResultRow] = []
    files: List[str] = []

class ComparisonTable(BaseModel):
    scenario: str
    rows: List[ResultRow] = []
    # metric -> label of the best row for that metric
    verdicts: Dict[str, str] = {}

# ====================
# API REQUEST MODELS
# ====================

class RunRequest(BaseModel):
    config: Union[str, Dict[str, Any]] = Field(..., description="Scenario file contents (INI) or the same sections as JSON")
    seed: Optional[int] = None
    scale: Optional[float] = Field(None, gt=0.0, le=1.0)
    out: Optional[str] = None

class SweepRequest(RunRequest):
    jobs: int = Field(1, ge=1, le=64)

class CompareRequest(BaseModel):
    configs: List[Union[str, Dict[str, Any]]] = Field(..., min_length=2)
    seed: Optional[int] = None
    scale: Optional[float] = Field(None, gt=0.0, le=1.0)
    out: Optional[str] = None
