"""The clustering daemon running on one radio unit.

Glues the election state machine, keepalive liveness, the primary's
monitor, CCL probing and rejoin scheduling onto the simulated CCL.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Dict, List, Optional

from .election import (ELECTION_GROUP, FORCE_SECONDARY_GROUP, RESPONSE_TIMEOUT, Elector, Role, Send, UnitConfig,
                       outranks)
from .health import (KEEPALIVE_GROUP, HealthConfig, InterfaceState, Peer, PeerView, PrimaryMonitor, Reason,
                     RttProber, RttSample, removal_deadline)
from .membership import ClusterConfig, RejoinCause, RejoinScheduler
from .sim_engine import ChannelSpec, Event
from .wire import (CclPing, CclPong, DecodeError, DecodeStats, ElectionRequest, ElectionResponse, ForcedLeave,
                   ForceSecondary, Keepalive, ProbeInfo, RadioInfo, WireRole, decode, encode)

if TYPE_CHECKING:
    from .cluster import Cluster

logger = logging.getLogger(__name__)

# multicast payloads are decoded once per receiver; messages are immutable so
# clean decodes can be shared
_DECODED: Dict[bytes, object] = {}
_DECODE_CACHE_MAX = 4096


def _decode_shared(data: bytes, stats: DecodeStats):
    msg = _DECODED.get(data)
    if msg is not None:
        return msg
    local = DecodeStats()
    msg = decode(data, local)
    if local.unknown_components:
        stats.unknown_components += local.unknown_components
        return msg
    if len(_DECODED) >= _DECODE_CACHE_MAX:
        _DECODED.clear()
    _DECODED[data] = msg
    return msg


class Unit:
    def __init__(self, uid: int, config: UnitConfig, host: "Cluster", radio: RadioInfo,
                 ifaces: List[InterfaceState], ccl_spec: ChannelSpec):
        self.uid = uid
        self.config = config
        self.host = host
        self.sim = host.sim
        self.net = host.ccl
        self.hcfg: HealthConfig = host.health_cfg
        self.radio = radio
        self.ifaces: Dict[str, InterfaceState] = {i.interface_id: i for i in ifaces}
        self.ccl_spec = ccl_spec
        self.elector = Elector(uid, config)
        self.view = PeerView(self.sim, self.hcfg, self._peer_expired)
        self.monitor: Optional[PrimaryMonitor] = None
        self.prober = RttProber(self.sim, self.hcfg, self._send_ping, self._rtt_sample, self._ccl_failure, uid)
        self.rejoin = RejoinScheduler(self.sim, self._rejoin_attempt, host.rejoin_policies)
        self.decode_stats = DecodeStats()
        self.decode_errors = 0
        self.alive = False
        self.ccl_up = True
        self.ever_joined = False
        self.was_primary = False
        self.member_since: Optional[int] = None
        self.mgmt_ip: Optional[str] = None
        self.data_admin_up = True
        self.config_replica: Optional[ClusterConfig] = None
        self._ka_timer: Optional[Event] = None
        self._resp_timer: Optional[Event] = None
        self._loss_timer: Optional[Event] = None
        self._self_removal: Optional[Event] = None
        self._recent_expiries: List[int] = []
        self.primary2 = False
        self.net.attach(uid, self._on_bytes, ccl_spec)
        self.net.set_live(uid, False)

    # -- state ------------------------------------------------------------

    @property
    def role(self) -> Role:
        if self.elector.role is Role.SECONDARY and self.primary2:
            return Role.PRIMARY_2
        return self.elector.role

    @property
    def is_member(self) -> bool:
        return self.alive and self.elector.role.is_member

    @property
    def data_up(self) -> bool:
        data = [i for i in self.ifaces.values() if i.interface_id in self.host.config.data_interfaces]
        return self.data_admin_up and all(i.up for i in data)

    def monitored_down(self) -> bool:
        return any(not i.up for i in self.ifaces.values() if i.monitored)

    def info(self):
        role = {Role.PRIMARY: WireRole.PRIMARY, Role.PRIMARY_2: WireRole.PRIMARY_STANDBY}.get(self.role,
                                                                                             WireRole.SECONDARY)
        return self.config.selection_info(role)

    def _transition(self, old: Role, reason: str) -> None:
        new = self.role
        if new is not old:
            self.host.on_role_change(self, old, new, reason)

    # -- transport --------------------------------------------------------

    def send(self, dest, msg) -> None:
        if not self.alive:
            return
        self.net.send(self.uid, dest, encode(msg), tag=type(msg).__name__)

    def _send_all(self, sends: List[Send]) -> None:
        for s in sends:
            self.send(s.dest, s.msg)

    def _on_bytes(self, src: int, data: bytes) -> None:
        if not self.alive:
            return
        try:
            msg = _decode_shared(data, self.decode_stats)
        except DecodeError:
            self.decode_errors += 1
            return
        handler = self._handlers.get(type(msg))
        if handler is not None:
            handler(self, src, msg)

    # -- lifecycle --------------------------------------------------------

    def power_on(self) -> None:
        if self.alive:
            return
        self.alive = True
        self.net.set_live(self.uid, True)
        for group in (ELECTION_GROUP, FORCE_SECONDARY_GROUP, KEEPALIVE_GROUP):
            self.net.subscribe(self.uid, group)

    def join(self, reason: str = "join") -> bool:
        """Start the join procedure; False if the CCL is unusable."""
        self.power_on()
        if self.elector.role.is_member or self.elector.joining:
            return True
        old = self.role
        if not self.ccl_up:
            cause = RejoinCause.CCL_FAIL_AFTER_JOIN if self.ever_joined else RejoinCause.CCL_FAIL_AT_JOIN
            self.host.log_metric("ccl-failure", self.uid, f"join refused: {cause.value}")
            if not self.rejoin.pending and self.rejoin.cause is None:
                self.rejoin.on_removed(cause)
            return False
        self._send_all(self.elector.on_join())
        self._arm_response_timer()
        self._transition(old, reason)
        return True

    def _arm_response_timer(self) -> None:
        if self._resp_timer is not None:
            self._resp_timer.cancel()
        self._resp_timer = self.sim.call_later(RESPONSE_TIMEOUT, self._response_timeout)

    def _response_timeout(self) -> None:
        self._resp_timer = None
        if not self.elector.joining:
            return
        old = self.role
        sends = self.elector.on_response_timeout()
        self._send_all(sends)
        if self.elector.joining:
            self._arm_response_timer()
        else:
            self._after_role_change(old, "no-response")

    def _after_role_change(self, old: Role, reason: str) -> None:
        el = self.elector
        if el.role is Role.PRIMARY:
            if self.monitor is None:
                self.monitor = PrimaryMonitor(self.sim, self.hcfg, self.config.mode, self._member_removed,
                                              self._send_forced_leave)
                for uid, peer in sorted(self.view.peers.items()):
                    if uid != self.uid:
                        self.monitor.admit(uid, peer.selection, peer.radio, peer.first_seen,
                                           self.host.iface_snapshot(uid))
            self.prober.stop()
            self.was_primary = True
        else:
            if self.monitor is not None:
                self.monitor.dispose()
                self.monitor = None
        if el.role.is_member:
            if self._resp_timer is not None:
                self._resp_timer.cancel()
                self._resp_timer = None
            if not self.ever_joined or self.member_since is None:
                self.member_since = self.sim.now
            self.ever_joined = True
            self.rejoin.succeeded()
            if self._ka_timer is None:
                self._ka_timer = self.sim.call_later(self.hcfg.keepalive_interval, self._keepalive_tick)
            if el.role is not Role.PRIMARY and self.prober._timer is None:
                self.prober.start()
            self._recompute_primary2()
            self._check_own_ifaces()
        self._transition(old, reason)

    def _recompute_primary2(self) -> None:
        if self.elector.role is not Role.SECONDARY or self.elector.primary is None:
            self.primary2 = False
            return
        if self.member_since is None or self.sim.now - self.member_since < 2 * self.hcfg.keepalive_interval:
            # the view is not warm yet: peers that joined with us may still be unheard
            self.primary2 = False
            return
        me = self.config.selection_info()
        others = [p.selection for uid, p in self.view.peers.items() if uid != self.elector.primary]
        self.primary2 = all(outranks(me, o) for o in others)

    def leave(self, cause: Optional[RejoinCause], reason: str, role: Role = Role.UNJOINED) -> None:
        old = self.role
        for timer in (self._ka_timer, self._resp_timer, self._loss_timer, self._self_removal):
            if timer is not None:
                timer.cancel()
        self._ka_timer = self._resp_timer = self._loss_timer = self._self_removal = None
        self.prober.stop()
        if self.monitor is not None:
            self.monitor.dispose()
            self.monitor = None
        self.view.clear()
        self.elector.leave(role)
        self.primary2 = False
        self.member_since = None
        self._transition(old, reason)
        if cause is not None:
            planned = self.rejoin.on_removed(cause)
            if not planned:
                self.host.log_metric("rejoin-attempt", self.uid, f"{cause.value}: manual rejoin required")

    def fail(self) -> None:
        """Power loss / crash."""
        if not self.alive:
            return
        was_primary = self.elector.role is Role.PRIMARY
        self.leave(None, "unit-failure")
        self.rejoin.cancel()
        self.was_primary = was_primary
        self.alive = False
        self.net.set_live(self.uid, False)

    def recover(self) -> None:
        if self.alive:
            return
        self.power_on()
        if self.was_primary:
            if not self.join("recover") or self.monitored_down():
                self.on_primary_rejoin_failure()
            return
        if self.ever_joined:
            self.join("recover")

    def on_primary_rejoin_failure(self) -> None:
        """Ex-primary could not rejoin: data plane off, management stays reachable on a pool address."""
        old = self.role
        self.rejoin.cancel()
        if self._resp_timer is not None:
            self._resp_timer.cancel()
            self._resp_timer = None
        self.elector.leave(Role.DISABLED)
        self.data_admin_up = False
        pool = self.config.mgmt_ip_pool or self.host.config.ip_pool
        self.mgmt_ip = pool[self.uid % len(pool)] if pool else None
        self._transition(old, "primary-rejoin-failed")

    def manual_rejoin(self) -> None:
        self.rejoin.cancel()
        self.rejoin.cause = None
        if not self.alive:
            self.power_on()
        if self.elector.role is Role.DISABLED:
            self.data_admin_up = True
            self.elector.role = Role.UNJOINED
        self.host.log_metric("rejoin-attempt", self.uid, "manual")
        self.join("manual-rejoin")

    def _rejoin_attempt(self, n: int) -> bool:
        cause = self.rejoin.cause
        blocked = (not self.alive or not self.ccl_up
                   or (cause is RejoinCause.DATA_IFACE_FAIL and self.monitored_down()))
        self.host.log_metric("rejoin-attempt", self.uid,
                             f"{cause.value if cause else 'none'} #{n} {'failed' if blocked else 'started'}")
        if blocked:
            return False
        self.join("rejoin")
        return True

    # -- keepalives and liveness -----------------------------------------

    def _keepalive_tick(self) -> None:
        self._ka_timer = None
        if not self.is_member:
            return
        self.send(KEEPALIVE_GROUP, Keepalive(self.info(), self.radio))
        self._ka_timer = self.sim.call_later(self.hcfg.keepalive_interval, self._keepalive_tick)

    def _peer_expired(self, uid: int, peer: Peer) -> None:
        self._recent_expiries.append(self.sim.now)
        if self.monitor is not None:
            self.monitor.remove(uid, Reason.KEEPALIVE_MISS, notify=True)
        if not self.is_member:
            return
        if uid == self.elector.primary or self.elector.primary is None:
            if self._loss_timer is not None:
                self._loss_timer.cancel()
            # wait one more interval so every peer that went silent together has expired too
            self._loss_timer = self.sim.call_later(self.hcfg.keepalive_interval + 2, self._primary_loss_decision)
        else:
            old = self.role
            self._recompute_primary2()
            self._transition(old, "view-change")

    def _primary_loss_decision(self) -> None:
        self._loss_timer = None
        if not self.is_member or self.elector.role is Role.PRIMARY:
            return
        primary = self.elector.primary
        if primary is not None and primary in self.view.peers:
            return
        window = 2 * self.hcfg.keepalive_interval + 2
        recent = [t for t in self._recent_expiries if self.sim.now - t <= window]
        self._recent_expiries = recent
        if not self.view.peers and len(recent) >= 2:
            self._ccl_failure()
            return
        old = self.role
        sends = self.elector.on_primary_loss([p.selection for p in self.view.peers.values()])
        self._send_all(sends)
        self._after_role_change(old, "primary-lost")

    def _member_removed(self, uid: int, reason: Reason) -> None:
        self.host.on_member_removed(self, uid, reason)

    def _send_forced_leave(self, uid: int) -> None:
        self.send(uid, ForcedLeave(self.info()))

    # -- probing ----------------------------------------------------------

    def _send_ping(self, probe_id: int, now: int) -> None:
        if self.elector.primary is not None and self.elector.primary != self.uid:
            self.send(self.elector.primary, CclPing(ProbeInfo(probe_id, now)))

    def _rtt_sample(self, sample: RttSample) -> None:
        self.host.on_rtt(self, sample)

    def _ccl_failure(self) -> None:
        if not self.is_member:
            return
        self.host.log_metric("ccl-failure", self.uid, "probe timeout" if self.ccl_up else "link down")
        self.leave(RejoinCause.CCL_FAIL_AFTER_JOIN, "ccl-failure")

    # -- interfaces -------------------------------------------------------

    def set_interface(self, iface_id: str, up: bool) -> None:
        now = self.sim.now
        if iface_id == self.host.config.ccl_interface:
            self.set_ccl(up)
            return
        iface = self.ifaces.get(iface_id)
        if iface is None:
            raise KeyError(f"unit {self.uid} has no interface {iface_id}")
        iface.set_up(up, now)
        self.host.notify_interface(self, iface)
        self._check_own_ifaces()

    def _check_own_ifaces(self) -> None:
        """A primary applies the removal rules to its own interfaces."""
        if self._self_removal is not None:
            self._self_removal.cancel()
            self._self_removal = None
        if self.elector.role is not Role.PRIMARY or self.member_since is None:
            return
        deadlines = [d for d in (removal_deadline(i, self.member_since, self.hcfg) for i in self.ifaces.values())
                     if d is not None]
        if deadlines:
            self._self_removal = self.sim.schedule(max(min(deadlines), self.sim.now), self._self_remove)

    def _self_remove(self) -> None:
        self._self_removal = None
        self.host.log_metric("removal", self.uid, "iface-self")
        self.leave(RejoinCause.DATA_IFACE_FAIL, "iface-self")

    def set_ccl(self, up: bool) -> None:
        self.ccl_up = up
        spec = self.ccl_spec if up else ChannelSpec(self.ccl_spec.base_latency, self.ccl_spec.jitter, 1.0)
        self.net.set_spec(self.uid, spec)
        if not up:
            if self.elector.joining:
                self.leave(RejoinCause.CCL_FAIL_AT_JOIN if not self.ever_joined
                           else RejoinCause.CCL_FAIL_AFTER_JOIN, "ccl-down")
            elif self.is_member:
                self._ccl_failure()

    def set_ccl_spec(self, spec: ChannelSpec) -> None:
        self.ccl_spec = spec
        if self.ccl_up:
            self.net.set_spec(self.uid, spec)

    # -- message handlers -------------------------------------------------

    def _on_election_request(self, src: int, msg: ElectionRequest) -> None:
        if self.monitor is not None:
            self.monitor.allow(src)
        reply = self.elector.on_election_request(src, msg)
        if reply is not None:
            self.send(reply.dest, reply.msg)

    def _on_election_response(self, src: int, msg: ElectionResponse) -> None:
        old = self.role
        was_joining = self.elector.joining
        sends = self.elector.on_election_response(src, msg)
        self._send_all(sends)
        if was_joining:
            self._after_role_change(old, "election")

    def _on_force_secondary(self, src: int, msg: ForceSecondary) -> None:
        old = self.role
        if not (self.elector.joining or self.elector.role.is_member):
            return
        sends = self.elector.on_force_secondary(src, msg)
        self._send_all(sends)
        if self._loss_timer is not None and self.elector.primary is not None:
            self._loss_timer.cancel()
            self._loss_timer = None
        self._after_role_change(old, "force-secondary")

    def _on_forced_leave(self, src: int, msg: ForcedLeave) -> None:
        if not self.elector.role.is_member or src != self.elector.primary:
            return
        primary = self.view.peers.get(src)
        if primary is not None and primary.radio.mode != self.config.mode:
            self.leave(None, "forced-leave:mode-mismatch")
            self.host.log_metric("rejoin-attempt", self.uid, "mode-mismatch: manual rejoin required")
            return
        cause = RejoinCause.DATA_IFACE_FAIL if self.monitored_down() else RejoinCause.CCL_FAIL_AFTER_JOIN
        self.leave(cause, "forced-leave")

    def _on_keepalive(self, src: int, msg: Keepalive) -> None:
        if not (self.elector.role.is_member or self.elector.joining):
            return
        self.view.heard(src, msg.selection, msg.radio)
        if self.monitor is not None:
            verdict = self.monitor.on_keepalive(src, msg, self.host.iface_snapshot(src))
            if verdict == "mode-mismatch":
                self.view.forget(src)
            elif verdict == "admitted":
                self.host.sync()
        if self.elector.role is Role.SECONDARY:
            old = self.role
            self._recompute_primary2()
            self._transition(old, "view-change")

    def _on_ping(self, src: int, msg: CclPing) -> None:
        if self.elector.role is Role.PRIMARY:
            self.send(src, CclPong(msg.probe))

    def _on_pong(self, src: int, msg: CclPong) -> None:
        self.prober.on_pong(msg.probe.probe_id)

    _handlers = {
        ElectionRequest: _on_election_request,
        ElectionResponse: _on_election_response,
        ForceSecondary: _on_force_secondary,
        ForcedLeave: _on_forced_leave,
        Keepalive: _on_keepalive,
        CclPing: _on_ping,
        CclPong: _on_pong,
    }
