# htclab/errors.py - error hierarchy shared by the simulator, harness and API
from typing import Optional


class HtcLabError(Exception):
    """Base class for every error raised by htclab"""


class ConfigError(HtcLabError):
    """Invalid scenario configuration; `field` names the offending key"""

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


class SimulationFault(HtcLabError):
    """Runtime fault inside a simulation run (programming error, abort run)"""


class SchedulingError(SimulationFault):
    """An event was scheduled before the current simulation time"""


class HandlerFault(SimulationFault):
    def __init__(self, fire_at: int, seq: int, handler: str, cause: Optional[BaseException] = None):
        self.fire_at = fire_at
        self.seq = seq
        self.handler = handler
        detail = f"{type(cause).__name__}: {cause}" if cause is not None else "unknown error"
        super().__init__(f"handler {handler} failed at t={fire_at}ns (event #{seq}): {detail}")
