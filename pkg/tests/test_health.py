import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import ECHAN, PLAIN, make_cluster, roles, unit_spec
from wbcluster.cluster import Cluster
from wbcluster.election import Role
from wbcluster.health import (HealthConfig, IfaceKind, InterfaceState, PrimaryMonitor, Reason, RttProber,
                              echan_failed, removal_deadline)
from wbcluster.sim_engine import MS, SECOND, ChannelSpec, Simulator
from wbcluster.wire import Keepalive, Mode, RadioInfo, SelectionInfo, WireRole, decode

CFG = HealthConfig()


def test_defaults():
    assert CFG.keepalive_interval == 1 * SECOND and CFG.miss_threshold == 3
    assert CFG.established_echan_removal == 9 * SECOND
    assert CFG.join_grace == 90 * SECOND
    assert CFG.non_echan_removal == 500 * MS
    assert CFG.ccl_rtt_bound == 20 * MS
    assert CFG.pong_timeout == 30 * SECOND


def test_config_validation():
    with pytest.raises(ValueError):
        HealthConfig(keepalive_interval=0)
    with pytest.raises(ValueError):
        HealthConfig(join_grace=5 * SECOND)


def test_interface_state_down_since_iff_down():
    i = InterfaceState("d0")
    i.set_up(False, 10)
    i.set_up(False, 20)
    assert i.down_since == 10
    i.set_up(True, 30)
    assert i.down_since is None and i.up


def _down(kind, at, monitored=True):
    i = InterfaceState("d0", kind, monitored=monitored)
    i.set_up(False, at)
    return i


def test_removal_deadline_rules():
    assert removal_deadline(_down(ECHAN, 100 * SECOND), 0, CFG) == 109 * SECOND
    assert removal_deadline(_down(IfaceKind.ETHERCHANNEL_MEMBER, 100 * SECOND), 0, CFG) == 109 * SECOND
    # inside the grace window the clock starts when the window closes
    assert removal_deadline(_down(ECHAN, 30 * SECOND), 0, CFG) == 99 * SECOND
    assert removal_deadline(_down(PLAIN, 10 * SECOND), 9 * SECOND, CFG) == 10_500_000
    assert removal_deadline(_down(ECHAN, 10, monitored=False), 0, CFG) is None
    assert removal_deadline(InterfaceState("up"), 0, CFG) is None


def test_echan_failed():
    assert echan_failed([False] * 4)
    assert not echan_failed([False, False, True, False])
    assert echan_failed([True, False], min_ports=2)
    assert not echan_failed([True, True], min_ports=2)


class _Harness:
    def __init__(self, mode=Mode.SPANNED_ETHERCHANNEL):
        self.sim = Simulator()
        self.removed = []
        self.forced = []
        self.mon = PrimaryMonitor(self.sim, CFG, mode, lambda u, r: self.removed.append((self.sim.now, u, r)),
                                  self.forced.append)

    def member(self, uid, kinds, joined_at=0):
        ifaces = [InterfaceState(f"d{i}", k) for i, k in enumerate(kinds)]
        self.mon.admit(uid, SelectionInfo(5, f"S{uid}"), RadioInfo(), joined_at, ifaces)
        return ifaces

    def flip(self, uid, iface, up, at):
        def go():
            iface.set_up(up, self.sim.now)
            self.mon.on_interface_change(uid, iface, self.sim.now)
        self.sim.schedule(at, go)


def test_established_echan_removed_after_9s():
    h = _Harness()
    (i,) = h.member(2, [ECHAN])
    h.flip(2, i, False, 100 * SECOND)
    h.sim.run(200 * SECOND)
    assert h.removed == [(109 * SECOND, 2, Reason.IFACE_9S)]
    assert h.forced == [2]


def test_recovery_before_deadline_cancels():
    h = _Harness()
    (i,) = h.member(2, [ECHAN])
    h.flip(2, i, False, 100 * SECOND)
    h.flip(2, i, True, 108 * SECOND)
    h.sim.run(200 * SECOND)
    assert h.removed == []


def test_flap_inside_grace_window_ignored():
    h = _Harness()
    (i,) = h.member(2, [ECHAN], joined_at=0)
    h.flip(2, i, False, 30 * SECOND)
    h.flip(2, i, True, 31 * SECOND)
    h.sim.run(300 * SECOND)
    assert h.removed == []


def test_non_echan_removed_after_500ms_even_when_just_joined():
    h = _Harness()
    (i,) = h.member(2, [PLAIN], joined_at=9 * SECOND)
    h.flip(2, i, False, 10 * SECOND)
    h.sim.run(20 * SECOND)
    assert h.removed == [(10_500_000, 2, Reason.IFACE_500MS)]


def test_all_monitored_down_reason():
    h = _Harness()
    a, b = h.member(2, [PLAIN, PLAIN])
    h.flip(2, a, False, 10 * SECOND)
    h.flip(2, b, False, 10 * SECOND + 100 * MS)
    h.sim.run(20 * SECOND)
    assert h.removed == [(10_500_000, 2, Reason.ALL_IFACES)]


def test_unmonitored_interface_never_removes():
    h = _Harness()
    ifaces = [InterfaceState("d0", PLAIN, monitored=False)]
    h.mon.admit(2, SelectionInfo(5, "S2"), RadioInfo(), 0, ifaces)
    h.flip(2, ifaces[0], False, 5 * SECOND)
    h.sim.run(60 * SECOND)
    assert h.removed == []


def test_mode_mismatch_forces_leave():
    h = _Harness()
    ka = Keepalive(SelectionInfo(5, "S9"), RadioInfo(Mode.INDIVIDUAL))
    assert h.mon.on_keepalive(9, ka) == "mode-mismatch"
    assert h.forced == [9] and h.removed[0][2] is Reason.MODE_MISMATCH
    assert 9 not in h.mon.members
    assert h.mon.on_keepalive(9, ka) == "ignored"
    good = Keepalive(SelectionInfo(5, "S8"), RadioInfo(Mode.SPANNED_ETHERCHANNEL))
    assert h.mon.on_keepalive(8, good) == "admitted"
    assert h.mon.on_keepalive(8, good) == "refreshed"


# -- in a running cluster -----------------------------------------------------

def _cluster_with_ifaces(kind, n=3, **kw):
    c = Cluster(**kw)
    for i in range(1, n + 1):
        c.add_unit(unit_spec(i, i, ifaces=[("data0", kind, True)]))
        c.at(0, "join", i)
    return c


def test_keepalive_period_and_content():
    c = make_cluster([1, 2, 3], record_trace=True)
    for i in (1, 2, 3):
        c.at(0, "join", i)
    c.run(20 * SECOND)
    times = [t for t, src, dest, tag in c.ccl.send_log if tag == "Keepalive" and src == 3]
    assert times[0] >= 9 * SECOND and len(times) >= 9
    assert all(b - a == SECOND for a, b in zip(times, times[1:]))
    assert c.units[2].info().role is WireRole.PRIMARY_STANDBY
    assert c.units[2].radio.snr_centi_db == 3600
    seen = []
    c.units[1].net.attach(99, lambda s, d: seen.append((s, decode(d))), ChannelSpec())
    c.units[1].net.subscribe(99, "224.1.0.12")
    c.run(22 * SECOND)
    roles_on_wire = {s: m.selection.role for s, m in seen}
    assert roles_on_wire[2] is WireRole.PRIMARY_STANDBY and roles_on_wire[3] is WireRole.SECONDARY


def test_keepalive_miss_removes_at_deadline():
    c = make_cluster([1, 2, 3], record_trace=True)
    for i in (1, 2, 3):
        c.at(0, "join", i)
    c.at(50 * SECOND + 500 * MS, "set_loss", 3, 1.0)
    c.run(70 * SECOND)
    removal = c.metrics.of_kind("removal")
    last_sent = max(t for t, src, _, tag in c.ccl.send_log if tag == "Keepalive" and src == 3 and t < 50_500_000)
    last_rx = last_sent + 1 * MS
    assert [(r[0], r[2], r[3]) for r in removal] == [(last_rx + 3 * SECOND + 1, 3, "keepalive-miss")]


def test_cluster_iface_rule_timings():
    c = _cluster_with_ifaces(ECHAN)
    c.at(200 * SECOND, "fail_interface", 3, "data0")
    c.run(230 * SECOND)
    assert [(r[0], r[2], r[3]) for r in c.metrics.of_kind("removal")] == [(209 * SECOND, 3, "iface-9s")]
    assert roles(c)[3] is Role.UNJOINED

    c = _cluster_with_ifaces(PLAIN)
    c.at(12 * SECOND, "fail_interface", 3, "data0")
    c.run(20 * SECOND)
    assert [(r[0], r[2], r[3]) for r in c.metrics.of_kind("removal")] == [(12_500_000, 3, "iface-500ms")]


def test_primary_applies_rules_to_itself():
    c = _cluster_with_ifaces(PLAIN)
    c.at(20 * SECOND, "fail_interface", 1, "data0")
    c.run(60 * SECOND)
    assert c.metrics.of_kind("removal")[0][:4] == (20_500_000, "removal", 1, "iface-self")
    assert roles(c)[2] is Role.PRIMARY


def test_mode_mismatch_in_cluster():
    c = Cluster()
    c.add_unit(unit_spec(1, 1))
    c.add_unit(unit_spec(2, 2, mode=Mode.INDIVIDUAL))
    c.at(0, "join", 1)
    c.at(0, "join", 2)
    c.run(30 * SECOND)
    assert roles(c) == {1: Role.PRIMARY, 2: Role.UNJOINED}
    assert c.metrics.of_kind("removal")[0][3] == "mode-mismatch"
    assert c.members() == [1]


def _prober(latency):
    sim = Simulator()
    samples, failures = [], []

    def ping(pid, now):
        sim.call_later(2 * latency, prober.on_pong, pid)

    prober = RttProber(sim, CFG, ping, samples.append, lambda: failures.append(sim.now), 7)
    return sim, prober, samples, failures


def test_rtt_is_twice_one_way_latency():
    sim, prober, samples, failures = _prober(2 * MS)
    prober.start()
    sim.run(35 * SECOND)
    assert [s.rtt for s in samples] == [4 * MS] * 3
    assert not any(s.degraded for s in samples) and failures == []


def test_slow_ccl_is_degraded_not_failed():
    sim, prober, samples, failures = _prober(15 * MS)
    prober.start()
    sim.run(35 * SECOND)
    assert [s.rtt for s in samples] == [30 * MS] * 3
    assert all(s.degraded for s in samples) and failures == []


def test_unanswered_probes_raise_ccl_failure():
    sim = Simulator()
    failures = []
    prober = RttProber(sim, CFG, lambda pid, now: None, lambda s: None, lambda: failures.append(sim.now), 7)
    prober.start()
    sim.run(100 * SECOND)
    # probes at 10, 20, 30 s go unanswered; the 40 s tick sees the first one 30 s old
    assert failures == [40 * SECOND]
    assert prober.missed == 3


def test_degraded_ccl_in_cluster():
    c = Cluster()
    for i in (1, 2, 3):
        c.add_unit(unit_spec(i, i, ccl=ChannelSpec(15 * MS) if i == 3 else None))
        c.at(0, "join", i)
    c.run(60 * SECOND)
    degraded = c.metrics.of_kind("degraded-ccl")
    assert degraded and {r[2] for r in degraded} == {3}
    assert roles(c)[3] is Role.SECONDARY


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 400 * MS), st.integers(0, 100 * MS), st.integers(0, 999))
def test_no_false_removal(latency, jitter, seed):
    c = make_cluster([1, 2, 3, 4], seed=seed, ccl_spec=ChannelSpec(latency, jitter))
    for i in (1, 2, 3, 4):
        c.at(i * 100 * MS, "join", i)
    c.run(120 * SECOND)
    assert c.removals == []
    assert sorted(r.value for r in roles(c).values()) == ["primary", "primary-2", "secondary", "secondary"]
