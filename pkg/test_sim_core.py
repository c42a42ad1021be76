import pytest
from hypothesis import given, strategies as st

from htclab.errors import HandlerFault, SchedulingError, SimulationFault
from htclab.sim_core import MAX_TIME, Rng, Simulator, millis, seconds, time_add, to_seconds


@given(st.lists(st.integers(min_value=0, max_value=1_000), min_size=1, max_size=60))
def test_events_fire_in_time_then_insertion_order(times):
    sim = Simulator()
    fired = []
    for i, t in enumerate(times):
        sim.schedule(t, fired.append, (t, i))
    sim.run_until(1_000)
    assert fired == sorted(fired)
    assert len(fired) == len(times)


def test_clock_reads_end_time_after_run(sim):
    sim.schedule(millis(5), lambda: None)
    summary = sim.run_until(seconds(1))
    assert sim.now == seconds(1)
    assert summary.events_executed == 1
    assert summary.events_pending == 0
    assert not summary.stopped


def test_events_after_end_stay_pending(sim):
    fired = []
    sim.schedule(10, fired.append, 1)
    sim.schedule(20, fired.append, 2)
    summary = sim.run_until(15)
    assert fired == [1]
    assert summary.events_pending == 1
    sim.run_until(30)
    assert fired == [1, 2]


def test_schedule_in_the_past_is_rejected(sim):
    sim.schedule(100, lambda: None)
    sim.run_until(100)
    with pytest.raises(SchedulingError):
        sim.schedule(50, lambda: None)


def test_cancelled_event_never_fires(sim):
    fired = []
    handle = sim.schedule(10, fired.append, "x")
    sim.cancel(handle)
    sim.cancel(handle)
    summary = sim.run_until(20)
    assert fired == []
    assert summary.events_cancelled == 1


def test_stop_keeps_clock_at_last_event(sim):
    sim.schedule(10, sim.stop)
    sim.schedule(20, lambda: None)
    summary = sim.run_until(100)
    assert summary.stopped
    assert sim.now == 10
    assert summary.events_pending == 1


def test_handler_error_is_wrapped_with_diagnostics(sim):
    def broken():
        raise ValueError("boom")

    sim.schedule(42, broken)
    with pytest.raises(HandlerFault) as info:
        sim.run_until(100)
    assert info.value.fire_at == 42
    assert "broken" in info.value.handler
    assert isinstance(info.value, SimulationFault)


def test_run_until_inside_handler_is_a_fault(sim):
    sim.schedule(1, lambda: sim.run_until(5))
    with pytest.raises(SimulationFault):
        sim.run_until(10)


def test_time_add_saturates():
    assert time_add(MAX_TIME - 1, 10) == MAX_TIME
    assert time_add(5, 10) == 15
    with pytest.raises(SchedulingError):
        time_add(5, -1)


def test_unit_helpers():
    assert seconds(1.5) == 1_500_000_000
    assert millis(25) == 25_000_000
    assert to_seconds(seconds(2)) == 2.0


def test_rng_substreams_are_reproducible_and_independent():
    a = [Rng(3, "link/a").random() for _ in range(1)] + [Rng(3, "link/a").random()]
    assert a[0] == a[1]
    first = Rng(3, "link/a")
    second = Rng(3, "link/b")
    assert [first.random() for _ in range(5)] != [second.random() for _ in range(5)]
    assert Rng(3, "x").random_bytes(16) == Rng(3, "x").random_bytes(16)
    assert Rng(3, "x").random_bytes(16) != Rng(4, "x").random_bytes(16)


def test_bernoulli_edges():
    rng = Rng(1, "p")
    assert not any(rng.bernoulli(0.0) for _ in range(100))
    assert all(rng.bernoulli(1.0) for _ in range(100))
