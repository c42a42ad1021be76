# htclab/workload.py - holographic objects, view-dependent tiles and sensor streams
import logging
from dataclasses import dataclass, field
from typing import Callable, FrozenSet, List, Optional, Tuple

from htclab.errors import ConfigError
from htclab.models import SegmentClass
from htclab.sim_core import Rng, SimTime, Simulator

logger = logging.getLogger(__name__)

DEFAULT_OBJECT_BITS = 400_000_000


@dataclass(frozen=True)
class ObjectSpec:
    total_bits: int = DEFAULT_OBJECT_BITS
    n_tiles: int = 8
    n_sectors: int = 8
    request_time: SimTime = 0

    def __post_init__(self):
        if self.total_bits <= 0:
            raise ConfigError("workload.object_bits", "must be positive")
        if self.n_tiles < 1:
            raise ConfigError("workload.tiles", "must be >= 1")
        if self.n_sectors < 1:
            raise ConfigError("workload.sectors", "must be >= 1")


@dataclass(frozen=True)
class Tile:
    tile_id: int
    bits: int
    view_angles: FrozenSet[int]


@dataclass
class HtcObject:
    total_bits: int
    tiles: List[Tile]
    request_time: SimTime = 0
    n_sectors: int = 8

    @property
    def total_bytes(self) -> int:
        return -(-self.total_bits // 8)


@dataclass(frozen=True)
class SensorStreamSpec:
    n_sensors: int = 8
    per_sensor_rate: float = 40e6
    frame_raw_bits: float = 70e6
    fps: int = 30

    @property
    def aggregate_rate(self) -> float:
        return self.n_sensors * self.per_sensor_rate

    @property
    def raw_rate(self) -> float:
        """Uncompressed bits/s of one sensor"""
        return self.frame_raw_bits * self.fps

    @property
    def frame_bits(self) -> int:
        return int(self.per_sensor_rate / self.fps)


def gen_object(spec: ObjectSpec) -> HtcObject:
    """Split the object into equal tiles, tile i covering sector i mod n_sectors"""
    base, remainder = divmod(spec.total_bits, spec.n_tiles)
    tiles = []
    for i in range(spec.n_tiles):
        bits = base + (remainder if i == spec.n_tiles - 1 else 0)
        tiles.append(Tile(i, bits, frozenset({i % spec.n_sectors})))
    return HtcObject(spec.total_bits, tiles, spec.request_time, spec.n_sectors)


def sector_of(angle: float, n_sectors: int) -> int:
    width = 360.0 / n_sectors
    return int((angle % 360.0) // width) % n_sectors


def visible_sectors(view_angle: float, fov: float, n_sectors: int) -> FrozenSet[int]:
    if fov >= 360.0:
        return frozenset(range(n_sectors))
    width = 360.0 / n_sectors
    lo = view_angle - fov / 2.0
    hi = view_angle + fov / 2.0
    sectors = {sector_of(view_angle, n_sectors)}
    edge = (lo // width) * width
    while edge < hi:
        if edge + width > lo:
            sectors.add(sector_of(edge + width / 2.0, n_sectors))
        edge += width
    return frozenset(sectors)


def tile_priority(obj: HtcObject, view_angle: float, fov: float = 0.0) -> List[Tile]:
    """Visible tiles first, keeping the original order inside each group"""
    visible = visible_sectors(view_angle, fov, obj.n_sectors)
    front = [t for t in obj.tiles if t.view_angles & visible]
    back = [t for t in obj.tiles if not t.view_angles & visible]
    return front + back


def object_payload(n_bytes: int, rng: Rng) -> bytes:
    return rng.random_bytes(n_bytes)


def split_bytes(total: int, parts: int) -> List[int]:
    base, remainder = divmod(total, parts)
    return [base + (1 if i < remainder else 0) for i in range(parts)]


def plan_segments(
    total_bytes: int,
    segment_bytes: int,
    best_effort_share: float = 0.0,
    deadline_share: float = 0.0,
) -> List[Tuple[int, int, SegmentClass]]:
    """Cut an object into segments and assign classes by largest deficit.

    The assignment is deterministic: after n segments every class holds
    within one segment of its target share.
    """
    if best_effort_share + deadline_share > 1.0:
        raise ConfigError("workload.best_effort_share", "class shares exceed 1.0")
    shares = {
        SegmentClass.RELIABLE: 1.0 - best_effort_share - deadline_share,
        SegmentClass.BEST_EFFORT: best_effort_share,
        SegmentClass.DEADLINE: deadline_share,
    }
    counts = {cls: 0 for cls in shares}
    plan = []
    offset, seg_id = 0, 0
    while offset < total_bytes:
        size = min(segment_bytes, total_bytes - offset)
        n = seg_id + 1
        cls = max(shares, key=lambda c: shares[c] * n - counts[c])
        counts[cls] += 1
        plan.append((seg_id, size, cls))
        offset += size
        seg_id += 1
    return plan


@dataclass
class SensorStream:
    """Periodic frame source: every 1/fps each sensor emits one compressed frame"""

    sim: Simulator
    spec: SensorStreamSpec
    sink: Callable[[int, int, int], None]  # (sensor, frame_no, frame_bytes)
    until: SimTime
    frames_emitted: int = 0
    _frame_no: int = field(default=0, init=False)

    def start(self, at: SimTime = 0) -> None:
        self.sim.schedule(at, self._tick)

    def _tick(self) -> None:
        frame_bytes = max(self.spec.frame_bits // 8, 1)
        for sensor in range(self.spec.n_sensors):
            self.sink(sensor, self._frame_no, frame_bytes)
            self.frames_emitted += 1
        self._frame_no += 1
        nxt = self.sim.now + 1_000_000_000 // self.spec.fps
        if nxt < self.until:
            self.sim.schedule(nxt, self._tick)


@dataclass
class TransferHandle:
    """Progress of one object transfer, shared by every transport"""

    flow_id: str
    total_bytes: int
    started_at: SimTime
    completed_at: Optional[SimTime] = None
    delivered_bytes: int = 0
    digest_ok: Optional[bool] = None
    on_complete: List[Callable[["TransferHandle"], None]] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.completed_at is not None

    def finish(self, t: SimTime) -> None:
        if self.completed_at is not None:
            return
        self.completed_at = t
        for callback in self.on_complete:
            callback(self)
