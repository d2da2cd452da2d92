import pytest

from helpers import ECHAN, make_cluster, roles, unit_spec
from wbcluster.cluster import Cluster
from wbcluster.election import Role
from wbcluster.membership import ClusterConfig, MainIp, RejoinCause, RejoinPolicy, RejoinScheduler, expand_pool
from wbcluster.sim_engine import MINUTE, SECOND, Simulator


def test_default_policies():
    at_join = RejoinPolicy.default(RejoinCause.CCL_FAIL_AT_JOIN)
    after = RejoinPolicy.default(RejoinCause.CCL_FAIL_AFTER_JOIN)
    data = RejoinPolicy.default(RejoinCause.DATA_IFACE_FAIL)
    assert not at_join.automatic and at_join.max_attempts == 0
    assert after.automatic and after.max_attempts is None and after.interval == 5 * MINUTE
    assert data.max_attempts == 4 and data.interval == 5 * MINUTE


def test_policy_validation():
    with pytest.raises(ValueError):
        RejoinPolicy(RejoinCause.DATA_IFACE_FAIL, interval=0)
    with pytest.raises(ValueError):
        RejoinPolicy(RejoinCause.CCL_FAIL_AT_JOIN, max_attempts=3)


def _scheduler(policies=None, result=False):
    sim = Simulator()
    calls = []
    sched = RejoinScheduler(sim, lambda n: calls.append((sim.now, n)) or result, policies)
    return sim, sched, calls


def test_data_iface_schedule_stops_after_four():
    sim, sched, calls = _scheduler()
    planned = sched.on_removed(RejoinCause.DATA_IFACE_FAIL)
    assert planned == [k * 5 * MINUTE for k in (1, 2, 3, 4)]
    sim.run(60 * MINUTE)
    assert calls == [(t, n) for n, t in enumerate(planned, 1)]
    assert sched.exhausted and not sched.pending


def test_ccl_after_join_retries_forever():
    sim, sched, calls = _scheduler()
    sched.on_removed(RejoinCause.CCL_FAIL_AFTER_JOIN)
    sim.run(61 * MINUTE)
    assert len(calls) == 12 and sched.pending


def test_ccl_at_join_never_retries():
    sim, sched, calls = _scheduler()
    assert sched.on_removed(RejoinCause.CCL_FAIL_AT_JOIN) == []
    sim.run(60 * MINUTE)
    assert calls == [] and sched.exhausted


def test_configured_policy_overrides_default():
    policy = RejoinPolicy(RejoinCause.DATA_IFACE_FAIL, interval=2 * MINUTE, max_attempts=2)
    sim, sched, calls = _scheduler({RejoinCause.DATA_IFACE_FAIL: policy})
    sched.on_removed(RejoinCause.DATA_IFACE_FAIL)
    sim.run(60 * MINUTE)
    assert [t for t, _ in calls] == [2 * MINUTE, 4 * MINUTE]


def test_success_and_cancel_stop_the_schedule():
    sim, sched, calls = _scheduler()
    sched.on_removed(RejoinCause.CCL_FAIL_AFTER_JOIN)
    sim.run(6 * MINUTE)
    sched.succeeded()
    sim.run(60 * MINUTE)
    assert len(calls) == 1 and sched.cause is None


def test_expand_pool():
    assert expand_pool("10.0.0.10-10.0.0.12, 10.0.0.20") == ["10.0.0.10", "10.0.0.11", "10.0.0.12", "10.0.0.20"]
    with pytest.raises(ValueError):
        expand_pool("10.0.0.5-10.0.0.1")
    with pytest.raises(ValueError):
        expand_pool("10.0.0.999")


def test_config_needs_dedicated_ccl_interface():
    with pytest.raises(ValueError):
        ClusterConfig(ccl_interface="data0")
    a = ClusterConfig()
    b = a.copy()
    assert a.digest() == b.digest()
    b.data_interfaces.append("data1")
    assert a.digest() != b.digest() and a.data_interfaces == ["data0"]


def test_main_ip_history():
    ip = MainIp("10.0.0.1")
    assert ip.transfer(None, 1, 0)
    assert not ip.transfer(1, 1, 5)
    assert ip.transfer(1, 2, 10)
    assert ip.history == [(0, None, 1), (10, 1, 2)] and ip.owner == 2


# -- cluster level ------------------------------------------------------------

def _joined(n=3, ifaces=None, **kw):
    c = Cluster(**kw)
    for i in range(1, n + 1):
        c.add_unit(unit_spec(i, i, ifaces=ifaces))
        c.at(0, "join", i)
    return c


def _attempts(c, uid):
    return [(r[0], r[3]) for r in c.metrics.of_kind("rejoin-attempt") if r[2] == uid]


def test_config_replicated_to_every_member():
    c = _joined(4)
    c.run(30 * SECOND)
    digests = {u.config_replica.digest() for u in c.units.values()}
    assert digests == {c.config.digest()}
    c.sim.schedule(31 * SECOND, lambda: c.set_interface_role("data1", "spanned"))
    c.run(32 * SECOND)
    assert {u.config_replica.digest() for u in c.units.values()} == {c.config.digest()}
    assert c.units[3].config_replica.interface_roles == {"data1": "spanned"}


def test_main_ip_follows_primary_through_failover():
    c = _joined(3)
    c.at(40 * SECOND, "fail_unit", 1)
    c.run(60 * SECOND)
    assert [(old, new) for _, old, new in c.main_ip.history] == [(None, 1), (1, 2)]
    assert c.main_ip.owner == c.primary_unit().uid == 2
    assert len(c.metrics.of_kind("main-ip")) == 2


def test_data_iface_rejoin_four_attempts_then_stop():
    c = _joined(3, ifaces=[("data0", ECHAN, True)])
    c.at(120 * SECOND, "fail_interface", 3, "data0")
    c.run(40 * MINUTE)
    attempts = _attempts(c, 3)
    assert [t for t, _ in attempts] == [129 * SECOND + k * 5 * MINUTE + 1000 for k in (1, 2, 3, 4)]
    assert all("failed" in d for _, d in attempts)
    assert roles(c)[3] is Role.UNJOINED


def test_data_iface_rejoin_succeeds_once_link_is_back():
    c = _joined(3, ifaces=[("data0", ECHAN, True)])
    c.at(120 * SECOND, "fail_interface", 3, "data0")
    c.at(200 * SECOND, "recover_interface", 3, "data0")
    c.run(15 * MINUTE)
    attempts = _attempts(c, 3)
    assert len(attempts) == 1 and "started" in attempts[0][1]
    assert roles(c)[3] is Role.SECONDARY and 3 in c.members()


def test_ccl_failure_after_join_keeps_retrying():
    c = _joined(3)
    c.at(60 * SECOND, "partition_ccl", 3, "down")
    c.run(65 * MINUTE)
    attempts = _attempts(c, 3)
    assert len(attempts) >= 12
    gaps = {b[0] - a[0] for a, b in zip(attempts, attempts[1:])}
    assert gaps == {5 * MINUTE}


def test_ccl_failure_at_join_needs_manual_rejoin():
    c = make_cluster([1, 2, 3])
    c.at(0, "join", 1)
    c.at(0, "join", 2)
    c.at(0, "partition_ccl", 3, "down")
    c.at(1 * SECOND, "join", 3)
    c.at(10 * MINUTE, "partition_ccl", 3, "heal")
    c.at(25 * MINUTE, "manual_rejoin", 3)
    c.run(24 * MINUTE)
    assert [d for _, d in _attempts(c, 3)] == []
    assert roles(c)[3] is Role.UNJOINED
    c.run(26 * MINUTE)
    assert [d for _, d in _attempts(c, 3)] == ["manual"]
    assert roles(c)[3] is Role.SECONDARY


def test_manual_rejoin_cancels_pending_attempts():
    c = _joined(3)
    c.at(60 * SECOND, "partition_ccl", 3, "down")
    c.at(3 * MINUTE, "partition_ccl", 3, "heal")
    c.at(4 * MINUTE, "manual_rejoin", 3)
    c.run(30 * MINUTE)
    assert [d for _, d in _attempts(c, 3)] == ["manual"]
    assert not c.units[3].rejoin.pending
    assert roles(c)[3] is Role.SECONDARY


def test_ex_primary_that_cannot_rejoin_is_disabled_with_mgmt_ip():
    cfg = ClusterConfig(ip_pool=["10.0.0.10", "10.0.0.11", "10.0.0.12", "10.0.0.13"])
    c = _joined(3, ifaces=[("data0", ECHAN, True)], config=cfg)
    c.at(40 * SECOND, "fail_unit", 1)
    c.at(50 * SECOND, "fail_interface", 1, "data0")
    c.at(60 * SECOND, "recover_unit", 1)
    c.run(90 * SECOND)
    u1 = c.units[1]
    assert u1.role is Role.DISABLED
    assert not u1.data_admin_up
    assert u1.mgmt_ip == "10.0.0.11"
    assert c.primary_unit().uid == 2 and 1 not in c.members()
