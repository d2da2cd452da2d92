"""Small builders shared by the tests."""

from typing import Optional, Sequence

from wbcluster.cluster import Cluster, UnitSpec
from wbcluster.election import Role, UnitConfig
from wbcluster.health import IfaceKind
from wbcluster.wire import Mode, RadioType


def unit_spec(uid: int, priority: int, name: Optional[str] = None, serial: Optional[str] = None,
              mode: Mode = Mode.SPANNED_ETHERCHANNEL, ifaces=None, **kw) -> UnitSpec:
    cfg = UnitConfig(name if name is not None else f"ap{uid}", serial or f"SN{uid:04d}", priority, mode,
                     RadioType.ACCESS_POINT, [])
    return UnitSpec(uid, cfg, ifaces=ifaces or [], **kw)


def make_cluster(priorities: Sequence[int], seed: int = 0, names=None, serials=None, **kw) -> Cluster:
    cluster = Cluster(seed=seed, **kw)
    for i, prio in enumerate(priorities, 1):
        cluster.add_unit(unit_spec(i, prio, names[i - 1] if names else None, serials[i - 1] if serials else None))
    return cluster


def roles(cluster: Cluster):
    return {uid: u.role for uid, u in cluster.units.items()}


def primaries(cluster: Cluster):
    return sorted(uid for uid, u in cluster.units.items() if u.alive and u.role is Role.PRIMARY)


ECHAN = IfaceKind.SPANNED_ETHERCHANNEL_MEMBER
PLAIN = IfaceKind.NON_ETHERCHANNEL
