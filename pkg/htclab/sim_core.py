# htclab/sim_core.py - discrete-event kernel: clock, event queue and seeded randomness
import heapq
import logging
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Tuple

import numpy as np

from htclab.errors import HandlerFault, SchedulingError, SimulationFault
from htclab.units import NS_PER_SEC

logger = logging.getLogger(__name__)

# Simulation time is an integer count of nanoseconds.
SimTime = int
MAX_TIME: SimTime = 2 ** 63 - 1


def seconds(value: float) -> SimTime:
    return int(round(value * NS_PER_SEC))


def millis(value: float) -> SimTime:
    return int(round(value * 1_000_000))


def micros(value: float) -> SimTime:
    return int(round(value * 1_000))


def to_seconds(t: SimTime) -> float:
    return t / NS_PER_SEC


def time_add(t: SimTime, delay: SimTime) -> SimTime:
    """Add a delay to a timestamp, saturating at MAX_TIME"""
    if delay < 0:
        raise SchedulingError(f"negative delay {delay}ns")
    if t > MAX_TIME - delay:
        return MAX_TIME
    return t + delay


@dataclass(order=True, slots=True)
class Event:
    fire_at: SimTime
    seq: int
    action: Callable[..., Any] = field(compare=False)
    args: Tuple[Any, ...] = field(compare=False, default=())
    cancelled: bool = field(compare=False, default=False)
    fired: bool = field(compare=False, default=False)

    @property
    def pending(self) -> bool:
        return not (self.cancelled or self.fired)


# Handles returned by schedule() are the events themselves.
EventHandle = Event


@dataclass(slots=True)
class RunSummary:
    events_scheduled: int
    events_executed: int
    events_cancelled: int
    events_pending: int
    final_clock: SimTime
    stopped: bool = False


def _handler_name(action: Callable[..., Any]) -> str:
    return getattr(action, "__qualname__", None) or repr(action)


class Simulator:
    """Single-threaded event loop.

    Events fire in (fire_at, seq) order, so ties resolve by insertion order.
    After run_until(t_end) the clock reads t_end unless stop() ended the run
    early, in which case it holds the time of the last executed event.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._queue: List[Event] = []
        self._now: SimTime = 0
        self._seq = 0
        self._executed = 0
        self._cancelled = 0
        self._running = False
        self._stop_requested = False

    @property
    def now(self) -> SimTime:
        return self._now

    @property
    def events_executed(self) -> int:
        return self._executed

    def schedule(self, fire_at: SimTime, action: Callable[..., Any], *args: Any) -> EventHandle:
        if fire_at < self._now:
            raise SchedulingError(
                f"cannot schedule {_handler_name(action)} at {fire_at}ns, clock is {self._now}ns"
            )
        if fire_at > MAX_TIME:
            raise SchedulingError(f"fire time {fire_at}ns exceeds the representable range")
        event = Event(fire_at, self._seq, action, args)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    def schedule_in(self, delay: SimTime, action: Callable[..., Any], *args: Any) -> EventHandle:
        return self.schedule(time_add(self._now, delay), action, *args)

    def cancel(self, handle: Optional[EventHandle]) -> None:
        # Cancelling a fired or already cancelled event is a no-op.
        if handle is None or not handle.pending:
            return
        handle.cancelled = True
        self._cancelled += 1

    def stop(self) -> None:
        """End the current run after the executing event returns"""
        self._stop_requested = True

    def run_until(self, t_end: SimTime) -> RunSummary:
        if self._running:
            raise SimulationFault("run_until() called from inside an event handler")
        if t_end < self._now:
            raise SchedulingError(f"run_until({t_end}ns) is before the clock ({self._now}ns)")

        self._running = True
        self._stop_requested = False
        queue = self._queue
        try:
            while queue and queue[0].fire_at <= t_end:
                event = heapq.heappop(queue)
                if event.cancelled:
                    continue
                self._now = event.fire_at
                event.fired = True
                try:
                    event.action(*event.args)
                except SimulationFault:
                    raise
                except Exception as exc:
                    fault = HandlerFault(event.fire_at, event.seq, _handler_name(event.action), exc)
                    logger.error(str(fault))
                    raise fault from exc
                self._executed += 1
                if self._stop_requested:
                    break
            stopped = self._stop_requested
            if not stopped:
                self._now = t_end
        finally:
            self._running = False

        pending = sum(1 for event in queue if not event.cancelled)
        return RunSummary(
            events_scheduled=self._seq,
            events_executed=self._executed,
            events_cancelled=self._cancelled,
            events_pending=pending,
            final_clock=self._now,
            stopped=stopped,
        )

    def rng(self, stream_id: str) -> "Rng":
        return Rng(self.seed, stream_id)


class Rng:
    """Independent random substream derived from (seed, stream_id).

    Substreams never share state, so adding a consumer does not perturb the
    draws seen by any other component.
    """

    def __init__(self, seed: int, stream_id: str):
        self.seed = seed
        self.stream_id = stream_id
        sequence = np.random.SeedSequence(
            entropy=seed & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(zlib.crc32(stream_id.encode("utf-8")),),
        )
        self._gen = np.random.Generator(np.random.PCG64(sequence))

    def random(self) -> float:
        return float(self._gen.random())

    def bernoulli(self, p: float) -> bool:
        if p <= 0.0:
            return False
        if p >= 1.0:
            return True
        return self._gen.random() < p

    def uniform(self, low: float, high: float) -> float:
        return float(self._gen.uniform(low, high))

    def integers(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))

    def random_bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)

    def substream(self, label: str) -> "Rng":
        return Rng(self.seed, f"{self.stream_id}/{label}")
