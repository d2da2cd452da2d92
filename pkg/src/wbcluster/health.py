"""Unit and interface health monitoring.

Removal rules applied by the primary:

* keepalives: a member silent for ``miss_threshold`` intervals is removed;
* EtherChannel member interface down on an established member: removed
  9 s after the interface went down, unless it comes back first;
* no interface decisions at all during a member's first 90 s (EtherChannel);
* non-EtherChannel interface down: removed after 500 ms, whatever the state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional

from .sim_engine import MS, SECOND, Event, Simulator
from .wire import Keepalive, Mode, RadioInfo, SelectionInfo

logger = logging.getLogger(__name__)

KEEPALIVE_GROUP = "224.1.0.12"


@dataclass(frozen=True)
class HealthConfig:
    keepalive_interval: int = 1 * SECOND
    miss_threshold: int = 3
    established_echan_removal: int = 9 * SECOND
    join_grace: int = 90 * SECOND
    non_echan_removal: int = 500 * MS
    ccl_rtt_bound: int = 20 * MS
    rtt_probe_interval: int = 10 * SECOND

    def __post_init__(self):
        for name in ("keepalive_interval", "established_echan_removal", "join_grace", "non_echan_removal",
                     "ccl_rtt_bound", "rtt_probe_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.miss_threshold < 1:
            raise ValueError("miss_threshold must be >= 1")
        if self.join_grace <= self.established_echan_removal:
            raise ValueError("join_grace must exceed established_echan_removal")

    @property
    def liveness_window(self) -> int:
        return self.miss_threshold * self.keepalive_interval

    @property
    def pong_timeout(self) -> int:
        return 3 * self.rtt_probe_interval


class IfaceKind(Enum):
    SPANNED_ETHERCHANNEL_MEMBER = "spanned-etherchannel-member"
    ETHERCHANNEL_MEMBER = "etherchannel-member"
    NON_ETHERCHANNEL = "non-etherchannel"

    @property
    def is_etherchannel(self) -> bool:
        return self is not IfaceKind.NON_ETHERCHANNEL


class Reason(Enum):
    KEEPALIVE_MISS = "keepalive-miss"
    IFACE_9S = "iface-9s"
    IFACE_500MS = "iface-500ms"
    ALL_IFACES = "all-ifaces"
    MODE_MISMATCH = "mode-mismatch"
    FORCED_LEAVE = "forced-leave"


@dataclass
class InterfaceState:
    interface_id: str
    kind: IfaceKind = IfaceKind.SPANNED_ETHERCHANNEL_MEMBER
    up: bool = True
    monitored: bool = True
    down_since: Optional[int] = None

    def set_up(self, up: bool, at: int) -> None:
        self.up = up
        self.down_since = None if up else (self.down_since if self.down_since is not None else at)


def echan_failed(live_member_ifaces: Iterable[bool], min_ports: int = 1) -> bool:
    """An EtherChannel fails once fewer than ``min_ports`` member links are up."""
    return sum(1 for up in live_member_ifaces if up) < min_ports


def removal_deadline(iface: InterfaceState, joined_at: int, cfg: HealthConfig) -> Optional[int]:
    """When a down interface gets its unit removed, or None if no rule applies (yet)."""
    if iface.up or not iface.monitored or iface.down_since is None:
        return None
    if not iface.kind.is_etherchannel:
        return iface.down_since + cfg.non_echan_removal
    established_at = joined_at + cfg.join_grace
    # interface changes inside the grace window are not acted on; a link still
    # down when the window closes is treated as going down at that moment
    return max(iface.down_since, established_at) + cfg.established_echan_removal


@dataclass
class Member:
    uid: int
    selection: SelectionInfo
    radio: RadioInfo
    joined_at: int
    ifaces: Dict[str, InterfaceState] = field(default_factory=dict)
    removal: Optional[Event] = None


class PrimaryMonitor:
    """Membership table kept by the primary: admission, mode checks, interface timers.

    Keepalive silence is detected by the unit's peer view, which calls
    :meth:`remove` with ``Reason.KEEPALIVE_MISS``.
    """

    def __init__(self, sim: Simulator, cfg: HealthConfig, cluster_mode: Mode,
                 on_remove: Callable[[int, Reason], None],
                 on_forced_leave: Callable[[int], None]):
        self.sim = sim
        self.cfg = cfg
        self.cluster_mode = cluster_mode
        self.members: Dict[int, Member] = {}
        self.excluded: set = set()
        self.ignored_keepalives = 0
        self._on_remove = on_remove
        self._on_forced_leave = on_forced_leave

    def admit(self, uid: int, selection: SelectionInfo, radio: RadioInfo, joined_at: int,
              ifaces: Iterable[InterfaceState] = ()) -> Member:
        member = Member(uid, selection, radio, joined_at, {i.interface_id: i for i in ifaces})
        self.members[uid] = member
        self.excluded.discard(uid)
        for iface in member.ifaces.values():
            if not iface.up:
                self._rearm(member)
                break
        return member

    def allow(self, uid: int) -> None:
        """A fresh election request clears an earlier exclusion."""
        self.excluded.discard(uid)

    def on_keepalive(self, src: int, msg: Keepalive, ifaces: Iterable[InterfaceState] = ()) -> str:
        if src in self.excluded:
            self.ignored_keepalives += 1
            return "ignored"
        if msg.radio.mode != self.cluster_mode:
            self.members.pop(src, None)
            self.excluded.add(src)
            self._on_forced_leave(src)
            self._on_remove(src, Reason.MODE_MISMATCH)
            return "mode-mismatch"
        member = self.members.get(src)
        if member is None:
            self.admit(src, msg.selection, msg.radio, self.sim.now, ifaces)
            return "admitted"
        member.selection, member.radio = msg.selection, msg.radio
        return "refreshed"

    def on_interface_change(self, uid: int, iface: InterfaceState, at: int) -> Optional[int]:
        """Re-evaluate removal timers for ``uid``; returns the armed deadline, if any."""
        member = self.members.get(uid)
        if member is None:
            return None
        member.ifaces[iface.interface_id] = iface
        return self._rearm(member)

    def _rearm(self, member: Member) -> Optional[int]:
        if member.removal is not None:
            member.removal.cancel()
            member.removal = None
        best = None
        for iface in member.ifaces.values():
            deadline = removal_deadline(iface, member.joined_at, self.cfg)
            if deadline is None:
                continue
            rule = Reason.IFACE_500MS if not iface.kind.is_etherchannel else Reason.IFACE_9S
            if best is None or deadline < best[0]:
                best = (deadline, rule)
        if best is None:
            return None
        deadline, rule = best
        member.removal = self.sim.schedule(max(deadline, self.sim.now), self._expire, (member.uid, rule))
        return deadline

    def _expire(self, item) -> None:
        uid, rule = item
        member = self.members.get(uid)
        if member is None:
            return
        member.removal = None
        monitored = [i for i in member.ifaces.values() if i.monitored]
        if len(monitored) > 1 and all(not i.up for i in monitored):
            rule = Reason.ALL_IFACES
        self.remove(uid, rule, notify=True)

    def remove(self, uid: int, reason: Reason, notify: bool = True) -> bool:
        member = self.members.pop(uid, None)
        if member is None:
            return False
        if member.removal is not None:
            member.removal.cancel()
        self.excluded.add(uid)
        if notify:
            self._on_forced_leave(uid)
        self._on_remove(uid, reason)
        return True

    def dispose(self) -> None:
        for member in self.members.values():
            if member.removal is not None:
                member.removal.cancel()
        self.members.clear()


@dataclass
class Peer:
    selection: SelectionInfo
    radio: RadioInfo
    first_seen: int
    last_rx: int
    deadline: Optional[Event] = None


class PeerView:
    """Keepalive-driven liveness of every other unit, as seen by one unit.

    The check fires one tick after ``last_rx + miss_threshold * interval`` so a
    keepalive landing exactly on the deadline still counts.
    """

    def __init__(self, sim: Simulator, cfg: HealthConfig, on_expire: Callable[[int, Peer], None]):
        self.sim = sim
        self.cfg = cfg
        self.peers: Dict[int, Peer] = {}
        self._on_expire = on_expire

    def heard(self, uid: int, selection: SelectionInfo, radio: RadioInfo) -> Peer:
        now = self.sim.now
        peer = self.peers.get(uid)
        if peer is None:
            peer = Peer(selection, radio, now, now)
            self.peers[uid] = peer
        else:
            peer.selection, peer.radio, peer.last_rx = selection, radio, now
            if peer.deadline is not None:
                peer.deadline.cancel()
        peer.deadline = self.sim.schedule(now + self.cfg.liveness_window + 1, self._expire, uid)
        return peer

    def forget(self, uid: int) -> None:
        peer = self.peers.pop(uid, None)
        if peer is not None and peer.deadline is not None:
            peer.deadline.cancel()

    def clear(self) -> None:
        for uid in list(self.peers):
            self.forget(uid)

    def _expire(self, uid: int) -> None:
        peer = self.peers.pop(uid, None)
        if peer is not None:
            self._on_expire(uid, peer)


@dataclass
class RttSample:
    time: int
    unit: int
    rtt: int
    degraded: bool


class RttProber:
    """Ping-pong from a secondary to the primary over the CCL.

    A probe unanswered for ``3 * rtt_probe_interval`` is a CCL failure signal.
    """

    def __init__(self, sim: Simulator, cfg: HealthConfig, send_ping: Callable[[int, int], None],
                 on_sample: Callable[[RttSample], None], on_ccl_failure: Callable[[], None], uid: int):
        self.sim = sim
        self.cfg = cfg
        self.uid = uid
        self._send_ping = send_ping
        self._on_sample = on_sample
        self._on_ccl_failure = on_ccl_failure
        self._outstanding: Dict[int, int] = {}
        self._next_id = 1
        self._timer: Optional[Event] = None
        self.samples: List[RttSample] = []
        self.missed = 0

    def start(self) -> None:
        self.stop()
        self._timer = self.sim.call_later(self.cfg.rtt_probe_interval, self._tick)

    def stop(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        self._outstanding.clear()

    def _tick(self) -> None:
        now = self.sim.now
        oldest = min(self._outstanding.values(), default=None)
        if oldest is not None and now - oldest >= self.cfg.pong_timeout:
            self.missed = len(self._outstanding)
            self.stop()
            self._on_ccl_failure()
            return
        probe_id = self._next_id
        self._next_id += 1
        self._outstanding[probe_id] = now
        self._send_ping(probe_id, now)
        self._timer = self.sim.call_later(self.cfg.rtt_probe_interval, self._tick)

    def on_pong(self, probe_id: int) -> Optional[RttSample]:
        sent_at = self._outstanding.pop(probe_id, None)
        if sent_at is None:
            return None
        # answered: anything older was lost, not late
        for pid in [p for p, t in self._outstanding.items() if t < sent_at]:
            del self._outstanding[pid]
        rtt = self.sim.now - sent_at
        sample = RttSample(self.sim.now, self.uid, rtt, rtt > self.cfg.ccl_rtt_bound)
        self.samples.append(sample)
        self._on_sample(sample)
        return sample
