import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wbcluster.sim_engine import (MINUTE, MS, SECOND, ChannelSpec, EventKind, Network, SimulationError, Simulator,
                                  format_time, inject_all, parse_duration, seconds)


def test_timer_constants_are_exact():
    assert parse_duration("9s") == 9_000_000
    assert parse_duration("90s") == 90 * SECOND
    assert parse_duration("500ms") == 500_000
    assert parse_duration("5min") == 5 * MINUTE == 300 * SECOND
    assert parse_duration("20ms") == 20 * MS
    assert parse_duration("250us") == 250
    assert parse_duration("1h") == 3600 * SECOND
    assert parse_duration("1.5") == 1_500_000
    assert parse_duration("0.1s") == 100_000
    assert seconds(0.5) == 500 * MS


@pytest.mark.parametrize("bad", ["", "abc", "5 parsecs", "-3s", "1e400s"])
def test_parse_duration_rejects_garbage(bad):
    with pytest.raises(ValueError):
        parse_duration(bad)


def test_format_time():
    assert format_time(1_500_000) == "1.500000s"


def test_equal_times_pop_fifo():
    sim = Simulator()
    order = []
    sim.schedule(5, order.append, "a")
    sim.schedule(5, order.append, "b")
    sim.schedule(3, order.append, "c")
    sim.run()
    assert order == ["c", "a", "b"]
    assert sim.now == 5


def test_empty_queue_leaves_clock_alone():
    sim = Simulator()
    assert sim.run(10 * SECOND) == 0
    assert sim.now == 0


def test_until_zero_processes_nothing_in_future():
    sim = Simulator()
    hits = []
    sim.schedule(1, hits.append, 1)
    assert sim.run(0) == 0
    assert hits == [] and sim.now == 0
    assert sim.run(1) == 1


def test_scheduling_in_the_past_is_loud():
    sim = Simulator()
    sim.schedule(10, lambda: None)
    sim.run()
    with pytest.raises(SimulationError, match="cannot schedule"):
        sim.schedule(5, lambda: None)


def test_cancelled_events_are_skipped():
    sim = Simulator()
    hits = []
    ev = sim.schedule(1, hits.append, "x")
    sim.schedule(2, hits.append, "y")
    ev.cancel()
    sim.run()
    assert hits == ["y"]
    assert sim.pending == 0


def test_inject_all_marks_kind():
    sim = Simulator(record_trace=True)
    hits = []
    inject_all(sim, [(3, lambda: hits.append(3)), (1, lambda: hits.append(1))])
    sim.run()
    assert hits == [1, 3]
    assert {k for _, _, k in sim.trace} == {EventKind.INJECT.value}


def _random_trace(seed: int, n: int):
    sim = Simulator(seed, record_trace=True)

    def spawn(depth):
        if depth < 3 and sim.rng.random() < 0.5:
            sim.call_later(sim.rng.randrange(0, 1000), spawn, depth + 1)

    for _ in range(n):
        sim.schedule(sim.rng.randrange(0, 10_000), spawn, 0)
    sim.run()
    return sim.trace


def test_determinism_100k_events():
    a = _random_trace(42, 100_000)
    b = _random_trace(42, 100_000)
    assert len(a) >= 100_000
    assert a == b
    times = [t for t, _, _ in a]
    assert times == sorted(times)


def _net(n=4, spec=ChannelSpec(), seed=0):
    sim = Simulator(seed)
    net = Network(sim)
    inbox = {i: [] for i in range(n)}
    for i in range(n):
        net.attach(i, lambda src, data, i=i: inbox[i].append((sim.now, src, data)), spec)
    return sim, net, inbox


def test_unicast_exact_latency():
    sim, net, inbox = _net(2)
    sim.schedule(7, lambda: net.send(0, 1, b"hi"))
    sim.run()
    assert inbox[1] == [(7 + 1 * MS, 0, b"hi")]


def test_multicast_fanout_excludes_sender():
    sim, net, inbox = _net(5)
    for i in range(5):
        net.subscribe(i, "224.1.0.10")
    net.send(0, "224.1.0.10", b"x")
    sim.run()
    assert inbox[0] == []
    assert all(len(inbox[i]) == 1 for i in range(1, 5))
    assert net.stats.delivered == 4


def test_loss_rate_half_within_two_percent():
    sim, net, inbox = _net(2, ChannelSpec(loss_rate=0.5), seed=11)
    for _ in range(10_000):
        net.send(0, 1, b"")
    sim.run()
    frac = len(inbox[1]) / 10_000
    assert abs(frac - 0.5) <= 0.02
    assert net.stats.conserved()


def test_unknown_destination_is_counted_drop():
    sim, net, _ = _net(2)
    net.send(0, 99, b"x")
    assert net.unknown_destination == 1
    assert net.stats.dropped == 1 and net.stats.conserved()


def test_dead_sender_is_programming_error():
    sim, net, _ = _net(2)
    net.set_live(0, False)
    with pytest.raises(SimulationError):
        net.send(0, 1, b"x")


def test_path_spec_takes_worse_attachment():
    sim, net, inbox = _net(2)
    net.set_spec(1, ChannelSpec(base_latency=15 * MS))
    net.send(0, 1, b"x")
    sim.run()
    assert inbox[1][0][0] == 15 * MS


def test_channel_spec_validation():
    with pytest.raises(ValueError):
        ChannelSpec(loss_rate=1.5)
    with pytest.raises(ValueError):
        ChannelSpec(base_latency=-1)


@given(st.integers(0, 5 * MS), st.integers(0, 5 * MS), st.integers(0, 2**32))
def test_jitter_never_negative(latency, jitter, seed):
    spec = ChannelSpec(latency, jitter)
    rng = random.Random(seed)
    for _ in range(20):
        d = spec.draw_delay(rng)
        assert d >= 0
        assert latency - jitter <= d <= latency + jitter


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2 * MS), st.integers(0, 10_000),
       st.lists(st.tuples(st.integers(0, 2), st.integers(0, 4), st.integers(0, 5000)), max_size=200),
       st.integers(0, 20_000))
def test_conservation_at_any_instant(loss, jitter, seed, sends, stop):
    sim, net, _ = _net(4, ChannelSpec(1 * MS, jitter, loss), seed)
    for i in range(4):
        net.subscribe(i, "g")
    for src, dst, t in sends:
        dest = "g" if dst == 4 else dst
        sim.schedule(t, lambda s=src, d=dest: net.send(s, d, b"p"))
    sim.schedule(2500, lambda: net.set_live(3, False))
    sim.run(stop)
    assert net.stats.conserved()
    sim.run()
    assert net.stats.in_flight == 0 and net.stats.conserved()
