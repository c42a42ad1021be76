# htclab/cc.py - window-based congestion control: NewReno, Vegas and YeAH
#
# The algorithms are pure transitions over an immutable CcState; the
# CongestionController below owns one state and feeds it ACK, RTT and loss
# signals from a transport. Windows are counted in packets.
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional

from htclab.errors import ConfigError
from htclab.sim_core import SimTime

logger = logging.getLogger(__name__)

INITIAL_SSTHRESH = 1_000_000.0
MIN_SSTHRESH = 2.0


class CcAlgo(str, Enum):
    NEWRENO = "newreno"
    VEGAS = "vegas"
    YEAH = "yeah"
    # Reserved names, rejected at configuration time.
    CUBIC = "cubic"
    BBR = "bbr"


SUPPORTED_ALGOS = (CcAlgo.NEWRENO, CcAlgo.VEGAS, CcAlgo.YEAH)


class CcMode(str, Enum):
    SLOW_START = "SlowStart"
    AVOIDANCE = "CongestionAvoidance"
    FAST_RECOVERY = "FastRecovery"


class YeahMode(str, Enum):
    FAST = "Fast"
    SLOW = "Slow"


class LossKind(str, Enum):
    FAST_RETRANSMIT = "FastRetransmit"
    TIMEOUT = "Timeout"


@dataclass(frozen=True, slots=True)
class CcParams:
    vegas_alpha: float = 2.0
    vegas_beta: float = 4.0
    vegas_gamma: float = 1.0
    yeah_alpha_q: float = 80.0
    yeah_phy: float = 8.0
    yeah_delta: float = 3.0
    yeah_epsilon: float = 1.0

    def __post_init__(self):
        if not 0 < self.vegas_alpha <= self.vegas_beta:
            raise ConfigError("cc.vegas_alpha", "need 0 < alpha <= beta")
        if self.vegas_gamma <= 0:
            raise ConfigError("cc.vegas_gamma", "must be positive")
        for name in ("yeah_alpha_q", "yeah_phy", "yeah_delta", "yeah_epsilon"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"cc.{name}", "must be positive")


@dataclass(frozen=True, slots=True)
class CcState:
    cwnd: float = 10.0
    ssthresh: float = INITIAL_SSTHRESH
    base_rtt: Optional[SimTime] = None
    last_rtt: Optional[SimTime] = None
    min_rtt_epoch: Optional[SimTime] = None
    mode: CcMode = CcMode.SLOW_START
    yeah_mode: YeahMode = YeahMode.SLOW
    round: int = 0
    round_start_cwnd: float = 10.0
    decongested_round: int = -1

    @property
    def round_rtt(self) -> Optional[SimTime]:
        return self.min_rtt_epoch if self.min_rtt_epoch is not None else self.last_rtt


def estimate_queue_backlog(cwnd: float, base_rtt: Optional[SimTime], rtt: Optional[SimTime]) -> float:
    """Packets this flow keeps queued in the network: cwnd * (rtt - base) / rtt"""
    if base_rtt is None or rtt is None or rtt <= 0 or rtt <= base_rtt:
        return 0.0
    return cwnd * (rtt - base_rtt) / rtt


def on_rtt_sample(state: CcState, rtt: SimTime) -> CcState:
    base = rtt if state.base_rtt is None else min(state.base_rtt, rtt)
    epoch = rtt if state.min_rtt_epoch is None else min(state.min_rtt_epoch, rtt)
    return replace(state, base_rtt=base, last_rtt=rtt, min_rtt_epoch=epoch)


def newreno_on_ack(state: CcState, acked: float = 1.0) -> CcState:
    if state.mode == CcMode.FAST_RECOVERY:
        return state
    if state.cwnd < state.ssthresh:
        cwnd = state.cwnd + acked
        mode = CcMode.AVOIDANCE if cwnd >= state.ssthresh else CcMode.SLOW_START
        return replace(state, cwnd=cwnd, mode=mode)
    return replace(state, cwnd=state.cwnd + acked / state.cwnd, mode=CcMode.AVOIDANCE)


def vegas_on_ack(state: CcState, acked: float = 1.0) -> CcState:
    # Outside slow start Vegas only moves the window once per round.
    if state.mode != CcMode.SLOW_START:
        return state
    return replace(state, cwnd=state.cwnd + acked)


def vegas_on_rtt_round(state: CcState, params: CcParams = CcParams()) -> CcState:
    rtt = state.round_rtt
    if rtt is None or state.base_rtt is None or state.mode == CcMode.FAST_RECOVERY:
        return state
    backlog = estimate_queue_backlog(state.cwnd, state.base_rtt, rtt)

    if state.mode == CcMode.SLOW_START:
        if backlog <= params.vegas_gamma:
            return state
        target = state.cwnd * state.base_rtt / rtt + 1.0
        cwnd = max(min(state.cwnd, target), MIN_SSTHRESH)
        return replace(
            state,
            cwnd=cwnd,
            ssthresh=max(min(state.ssthresh, cwnd), MIN_SSTHRESH),
            mode=CcMode.AVOIDANCE,
        )

    if backlog < params.vegas_alpha:
        return replace(state, cwnd=state.cwnd + 1.0)
    if backlog > params.vegas_beta:
        return replace(state, cwnd=max(state.cwnd - 1.0, MIN_SSTHRESH))
    return state


def yeah_on_ack(state: CcState, params: CcParams = CcParams(), acked: float = 1.0) -> CcState:
    if state.mode == CcMode.FAST_RECOVERY:
        return state
    if state.cwnd < state.ssthresh:
        cwnd = state.cwnd + acked
        mode = CcMode.AVOIDANCE if cwnd >= state.ssthresh else CcMode.SLOW_START
        return replace(state, cwnd=cwnd, mode=mode)

    rtt = state.round_rtt
    backlog = estimate_queue_backlog(state.cwnd, state.base_rtt, rtt)
    if state.base_rtt and rtt is not None:
        ratio = (rtt - state.base_rtt) / state.base_rtt
    else:
        ratio = 0.0

    if backlog < params.yeah_alpha_q and ratio < 1.0 / params.yeah_phy:
        # Fast mode: aggressive growth, at most doubling per round.
        cap = max(2.0 * state.round_start_cwnd, state.cwnd)
        return replace(
            state,
            cwnd=min(state.cwnd + acked, cap),
            yeah_mode=YeahMode.FAST,
            mode=CcMode.AVOIDANCE,
        )

    if backlog >= params.yeah_alpha_q and state.decongested_round != state.round:
        cwnd = max(state.cwnd - backlog / params.yeah_epsilon, state.ssthresh, 1.0)
        return replace(
            state,
            cwnd=cwnd,
            yeah_mode=YeahMode.SLOW,
            mode=CcMode.AVOIDANCE,
            decongested_round=state.round,
        )
    return replace(
        state,
        cwnd=state.cwnd + acked / state.cwnd,
        yeah_mode=YeahMode.SLOW,
        mode=CcMode.AVOIDANCE,
    )


def on_loss(
    state: CcState,
    kind: LossKind,
    algo: CcAlgo = CcAlgo.NEWRENO,
    params: CcParams = CcParams(),
    flight: Optional[float] = None,
) -> CcState:
    flight = state.cwnd if flight is None else flight
    if kind == LossKind.TIMEOUT:
        return replace(
            state,
            cwnd=1.0,
            ssthresh=max(flight / 2.0, MIN_SSTHRESH),
            mode=CcMode.SLOW_START,
        )

    if algo == CcAlgo.YEAH:
        backlog = estimate_queue_backlog(state.cwnd, state.base_rtt, state.round_rtt)
        clamped = min(max(backlog, state.cwnd / params.yeah_delta), state.cwnd / 2.0)
        ssthresh = max(clamped, MIN_SSTHRESH)
    else:
        ssthresh = max(state.cwnd / 2.0, MIN_SSTHRESH)
    return replace(state, cwnd=ssthresh, ssthresh=ssthresh, mode=CcMode.FAST_RECOVERY)


def on_recovery_exit(state: CcState) -> CcState:
    if state.mode != CcMode.FAST_RECOVERY:
        return state
    return replace(state, cwnd=max(state.ssthresh, 1.0), mode=CcMode.AVOIDANCE)


def check_algo(algo: str) -> CcAlgo:
    try:
        parsed = CcAlgo(str(algo).lower())
    except ValueError:
        raise ConfigError("transport.cc", f"unknown congestion control {algo!r}") from None
    if parsed not in SUPPORTED_ALGOS:
        raise ConfigError("transport.cc", f"{parsed.value} is reserved and not implemented")
    return parsed


class CongestionController:
    """Drives one CcState from transport feedback.

    Rounds are delimited by a marker: the amount sent when the round began.
    A round ends once the cumulative acknowledged amount reaches it.
    """

    def __init__(
        self,
        algo: CcAlgo = CcAlgo.NEWRENO,
        params: Optional[CcParams] = None,
        initial_cwnd: float = 10.0,
        on_change: Optional[Callable[[CcState], None]] = None,
    ):
        self.algo = check_algo(algo)
        self.params = params or CcParams()
        self.initial_cwnd = initial_cwnd
        self.state = CcState(cwnd=initial_cwnd, round_start_cwnd=initial_cwnd)
        self.on_change = on_change
        self._round_marker = 0

    @property
    def cwnd(self) -> float:
        return self.state.cwnd

    @property
    def in_recovery(self) -> bool:
        return self.state.mode == CcMode.FAST_RECOVERY

    def _set(self, state: CcState) -> None:
        changed = state.cwnd != self.state.cwnd
        self.state = state
        if changed and self.on_change is not None:
            self.on_change(state)

    def on_ack(
        self,
        acked: float,
        rtt_sample: Optional[SimTime],
        acked_total: int,
        sent_total: int,
    ) -> None:
        state = self.state
        if rtt_sample is not None and rtt_sample > 0:
            state = on_rtt_sample(state, rtt_sample)

        if self.algo == CcAlgo.YEAH:
            state = yeah_on_ack(state, self.params, acked)
        elif self.algo == CcAlgo.VEGAS:
            state = vegas_on_ack(state, acked)
        else:
            state = newreno_on_ack(state, acked)

        if acked_total >= self._round_marker:
            if self.algo == CcAlgo.VEGAS:
                state = vegas_on_rtt_round(state, self.params)
            state = replace(state, round=state.round + 1, min_rtt_epoch=None, round_start_cwnd=state.cwnd)
            self._round_marker = sent_total
        self._set(state)

    def on_loss(self, kind: LossKind, flight: Optional[float] = None) -> None:
        before = self.state.cwnd
        self._set(on_loss(self.state, kind, self.algo, self.params, flight))
        logger.debug("%s %s: cwnd %.1f -> %.1f", self.algo.value, kind.value, before, self.state.cwnd)

    def exit_recovery(self) -> None:
        self._set(on_recovery_exit(self.state))

    def reset(self) -> None:
        """Forget all path state (new path after migration)"""
        self._round_marker = 0
        self._set(CcState(cwnd=self.initial_cwnd, round_start_cwnd=self.initial_cwnd))
