"""A simulated cluster: units on a shared CCL, data-plane traffic, metrics."""

from __future__ import annotations

import logging
import os
import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .election import Role, UnitConfig, rank_key
from .flow import FlowKey, FlowManager, HashFields, LinkBundle, Packet, PacketKind, PolicyMap, RebalancePolicy
from .health import HealthConfig, IfaceKind, InterfaceState, Reason, RttSample
from .linkmodel import LinkRates, RadioParams, TrafficFlow, effective_goodput, iperf_generator
from .membership import ClusterConfig, MainIp, RejoinCause, RejoinPolicy
from .metrics import MetricsLog
from .sim_engine import MS, ChannelSpec, EventKind, Network, Simulator, format_time
from .unit import Unit
from .wire import Mode, RadioInfo, encode

logger = logging.getLogger(__name__)


class InvariantViolation(RuntimeError):
    pass


@dataclass
class UnitSpec:
    uid: int
    config: UnitConfig
    radio: RadioParams = field(default_factory=RadioParams)
    rates: LinkRates = field(default_factory=LinkRates.symmetric)
    weight: int = 1
    ifaces: List[Tuple[str, IfaceKind, bool]] = field(default_factory=list)  # (id, kind, monitored)
    ccl: Optional[ChannelSpec] = None


@dataclass
class _Traffic:
    flow: TrafficFlow
    stage: int = 0


class Cluster:
    def __init__(self, seed: int = 0, mode: Mode = Mode.SPANNED_ETHERCHANNEL,
                 health_cfg: Optional[HealthConfig] = None, config: Optional[ClusterConfig] = None,
                 ccl_spec: ChannelSpec = ChannelSpec(), data_rtt: int = 2 * MS, sample_interval: int = 100 * MS,
                 rebalance: Optional[RebalancePolicy] = None, seq_randomization: bool = True,
                 rejoin_policies: Optional[Dict[RejoinCause, RejoinPolicy]] = None,
                 policy_rules: Sequence[Tuple[str, int]] = (), hash_fields: HashFields = HashFields.SRC_DST_IP,
                 check_invariants: bool = True,
                 record_trace: bool = False):
        self.sim = Simulator(seed, record_trace=record_trace)
        self.seed = seed
        self.mode = mode
        self.health_cfg = health_cfg or HealthConfig()
        self.config = config or ClusterConfig()
        self.ccl = Network(self.sim, "ccl")
        self.ccl_spec = ccl_spec
        self.data_rtt = data_rtt
        self.sample_interval = sample_interval
        self.rejoin_policies = rejoin_policies
        self.policy_rules = list(policy_rules)
        self.hash_fields = hash_fields
        self.check_invariants = check_invariants
        self.metrics = MetricsLog()
        self.units: Dict[int, Unit] = {}
        self.rates: Dict[int, LinkRates] = {}
        self.radio_params: Dict[int, RadioParams] = {}
        self.flows = FlowManager(transport=self._flow_transport, mode=mode, seq_randomization=seq_randomization,
                                 rebalance=rebalance, clock=lambda: self.sim.now, on_event=self._flow_event)
        self.main_ip = MainIp(self.config.main_cluster_ip)
        self.traffic: List[_Traffic] = []
        self._traffic_rng = random.Random(seed ^ 0x5EED)
        self._sampler = None
        self._members: Tuple[int, ...] = ()
        self._primary: Optional[int] = None
        self.primary_changes = 0
        self.removals: List[Tuple[int, int, str]] = []
        self.end_time = 0
        self.rtt_samples: List[RttSample] = []
        self.throughput: List[Tuple[int, float]] = []  # (time, aggregate delivered)
        self.event_times: List[Tuple[int, str]] = []
        self.dropped_packets = 0

    # -- construction -----------------------------------------------------

    def add_unit(self, spec: UnitSpec) -> Unit:
        if spec.uid in self.units:
            raise ValueError(f"duplicate unit id {spec.uid}")
        if not 0 <= spec.uid < 255:
            raise ValueError("unit ids must fit 8 bits (0-254)")
        for other in self.units.values():
            if rank_key(other.config.selection_info()) == rank_key(spec.config.selection_info()):
                raise ValueError(f"unit {spec.uid} duplicates the identity of unit {other.uid}")
            if other.config.serial == spec.config.serial:
                raise ValueError(f"serial {spec.config.serial!r} used twice")
        ifaces = spec.ifaces or [(name, IfaceKind.SPANNED_ETHERCHANNEL_MEMBER if self.mode is
                                  Mode.SPANNED_ETHERCHANNEL else IfaceKind.NON_ETHERCHANNEL, True)
                                 for name in self.config.data_interfaces]
        states = [InterfaceState(name, kind, monitored=mon) for name, kind, mon in ifaces]
        radio = RadioInfo(spec.config.mode, spec.config.radio_type, int(round(spec.radio.snr_db * 100)),
                          spec.weight)
        unit = Unit(spec.uid, spec.config, self, radio, states, spec.ccl or self.ccl_spec)
        self.units[spec.uid] = unit
        self.rates[spec.uid] = spec.rates
        self.radio_params[spec.uid] = spec.radio
        return unit

    def at(self, t: int, action: str, *args) -> None:
        """Schedule a scenario action."""
        self.sim.schedule(t, self._inject, (action, tuple(args)), kind=EventKind.INJECT)

    # -- scenario actions -------------------------------------------------

    def _inject(self, item) -> None:
        action, args = item
        detail = " ".join([action, *map(str, args)])
        self.log_metric("event", "", detail)
        self.event_times.append((self.sim.now, action))
        getattr(self, f"do_{action}")(*args)

    def do_join(self, uid: int) -> None:
        self.units[uid].join()

    def do_fail_unit(self, uid: int) -> None:
        self.units[uid].fail()
        self.sync()

    def do_recover_unit(self, uid: int) -> None:
        self.units[uid].recover()
        self.sync()

    def do_fail_interface(self, uid: int, iface: str) -> None:
        self.units[uid].set_interface(iface, False)
        self.sync()

    def do_recover_interface(self, uid: int, iface: str) -> None:
        self.units[uid].set_interface(iface, True)
        self.sync()

    def do_manual_rejoin(self, uid: int) -> None:
        self.units[uid].manual_rejoin()

    def do_partition_ccl(self, uid: int, state: str = "down") -> None:
        self.units[uid].set_ccl(state == "heal")
        self.sync()

    def do_set_loss(self, target, rate: float) -> None:
        targets = self.units.values() if target == "ccl" else [self.units[target]]
        for unit in targets:
            s = unit.ccl_spec
            unit.set_ccl_spec(ChannelSpec(s.base_latency, s.jitter, float(rate)))

    def do_start_traffic(self, connections: int = 50, window: int = 65536, duration: Optional[int] = None) -> None:
        end = self.sim.now + duration if duration else 1 << 62
        flows = iperf_generator(connections, window, end - self.sim.now, self.sim.now, self.data_rtt,
                                self._traffic_rng)
        self.traffic.extend(_Traffic(f) for f in flows)
        if self._sampler is None:
            self._sampler = self.sim.call_later(self.sample_interval, self._sample)

    def do_stop_traffic(self) -> None:
        self.traffic = []

    def set_interface_role(self, iface: str, role: str) -> None:
        self.config.interface_roles[iface] = role
        for uid in self._members:
            self._replicate_config(uid)

    # -- hooks from units -------------------------------------------------

    def log_metric(self, kind: str, unit, detail: str = "", **values) -> None:
        self.metrics.metric(self.sim.now, kind, unit, detail, **values)

    def on_role_change(self, unit: Unit, old: Role, new: Role, reason: str) -> None:
        self.metrics.transition(self.sim.now, unit.uid, old.value, new.value, reason)
        if new.is_member and not old.is_member:
            self._replicate_config(unit.uid)
        if not new.is_member and old.is_member:
            unit.config_replica = None
        self.sync()

    def on_member_removed(self, primary: Unit, uid: int, reason: Reason) -> None:
        self.removals.append((self.sim.now, uid, reason.value))
        self.log_metric("removal", uid, reason.value)
        self.sync()

    def on_rtt(self, unit: Unit, sample: RttSample) -> None:
        self.rtt_samples.append(sample)
        self.log_metric("rtt", unit.uid, rtt_us=sample.rtt)
        if sample.degraded:
            self.log_metric("degraded-ccl", unit.uid, f"rtt {sample.rtt}us > {self.health_cfg.ccl_rtt_bound}us",
                            rtt_us=sample.rtt)

    def notify_interface(self, unit: Unit, iface: InterfaceState) -> None:
        """Interface state reaches the primary out of band (bundle/LACP link status)."""
        primary = self.primary_unit()
        if primary is not None and primary.monitor is not None:
            primary.monitor.on_interface_change(unit.uid, iface, self.sim.now)

    def iface_snapshot(self, uid: int) -> List[InterfaceState]:
        unit = self.units.get(uid)
        return list(unit.ifaces.values()) if unit else []

    # -- membership view --------------------------------------------------

    def primary_unit(self) -> Optional[Unit]:
        claimants = [u for u in self.units.values() if u.alive and u.elector.role is Role.PRIMARY]
        if not claimants:
            return None
        return min(claimants, key=lambda u: rank_key(u.config.selection_info()))

    def members(self) -> List[int]:
        primary = self.primary_unit()
        if primary is None:
            return []
        return sorted({primary.uid, *primary.monitor.members})

    def roles(self) -> Dict[int, Role]:
        return {uid: u.role for uid, u in self.units.items()}

    def sync(self) -> None:
        primary = self.primary_unit()
        pid = primary.uid if primary else None
        if pid != self._primary:
            if self._primary is not None:
                self.primary_changes += 1
            self._primary = pid
            old = self.main_ip.owner
            if pid is not None and self.main_ip.transfer(old, pid, self.sim.now):
                self.log_metric("main-ip", pid, f"{self.main_ip.address} from {old if old is not None else '-'}")
                self.config_replica_for_primary(primary)
        if primary is None and any(u.is_member for u in self.units.values()):
            # interregnum: members keep their tables until a new primary takes over
            members = self._members
        else:
            members = tuple(self.members())
        if members != self._members:
            self._members = members
            summary = self.flows.set_members(members)
            if summary["lost"]:
                logger.info("%s: %d flows lost", format_time(self.sim.now), summary["lost"])
        if self.check_invariants:
            self._check()

    def config_replica_for_primary(self, primary: Unit) -> None:
        primary.config_replica = self.config.copy()

    def _replicate_config(self, uid: int) -> None:
        primary = self.primary_unit()
        unit = self.units[uid]
        if primary is None or primary.uid == uid:
            unit.config_replica = self.config.copy()
            return
        delay = self.ccl.path_spec(primary.uid, uid).base_latency
        snapshot = self.config.copy()

        def apply():
            if unit.is_member:
                unit.config_replica = snapshot

        self.sim.call_later(delay, apply)

    def _check(self) -> None:
        if self._primary is not None and self.main_ip.owner != self._primary:
            raise InvariantViolation(f"main IP bound to {self.main_ip.owner}, primary is {self._primary}")
        primary = self.units[self._primary] if self._primary is not None else None
        for uid in self._members:
            unit = self.units[uid]
            if primary is not None and unit.config.mode is not primary.config.mode:
                raise InvariantViolation(f"unit {uid} admitted with mode {unit.config.mode.label}")

    # -- data plane -------------------------------------------------------

    def _flow_transport(self, src: int, dst: int, msg) -> None:
        a, b = self.units.get(src), self.units.get(dst)
        if a is None or b is None or not a.alive:
            return
        self.ccl.send(src, dst, encode(msg), tag=type(msg).__name__)

    def _flow_event(self, t: int, key: FlowKey, event: str, proprietor, organizer) -> None:
        self.metrics.flow(t, key.label, event, proprietor, organizer)

    def goodput(self, uid: int) -> float:
        return effective_goodput(self.rates[uid], self.radio_params[uid].per)

    def bundle(self) -> LinkBundle:
        up = [uid for uid in self._members if self.units[uid].alive and self.units[uid].data_up]
        weights = [self.units[uid].radio.load_balancing_weight for uid in up]
        return LinkBundle(up, weights if any(weights) else None, self.hash_fields)

    def _select(self, bundle: LinkBundle, policy: Optional[PolicyMap], key: FlowKey) -> Optional[int]:
        if policy is not None:
            return policy.select(key, bundle.members)
        return bundle.select(key)

    def _sample(self) -> None:
        self._sampler = None
        now = self.sim.now
        bundle = self.bundle()
        policy = PolicyMap(self.policy_rules, bundle) if self.mode is Mode.INDIVIDUAL else None
        offered = {uid: 0.0 for uid in self.units}
        active = [t for t in self.traffic if t.flow.start <= now < t.flow.stop]
        for item in active:
            key = item.flow.key
            if item.stage == 0:
                pkt = Packet(key, PacketKind.SYN)
            elif item.stage == 1:
                rec = self.flows.record(key)
                pkt = Packet(key.reversed(), PacketKind.SYN_ACK, rec.syn_cookie if rec else None)
            else:
                pkt = Packet(key if item.stage % 2 == 0 else key.reversed(), PacketKind.DATA)
            arrival = self._select(bundle, policy, pkt.key)
            if arrival is None:
                self.dropped_packets += 1
                continue
            action = self.flows.on_packet(arrival, pkt)
            owner = action.proprietor
            if action.outcome == "dropped" or owner is None or not self.units[owner].alive:
                self.dropped_packets += 1
                continue
            item.stage += 1
            if item.stage > 2:
                offered[owner] += item.flow.rate_limit
        total = 0.0
        for uid in sorted(self.units):
            unit = self.units[uid]
            rates = self.rates[uid]
            up = unit.alive and unit.data_up and uid in self._members
            good = self.goodput(uid)
            delivered = min(offered[uid], good) if up else 0.0
            total += delivered
            self.log_metric("throughput", uid, offered_mbps=offered[uid], delivered_mbps=delivered,
                            phy_mbps=rates.phy_tx, duty_cycle=rates.duty_cycle_tx,
                            mac_efficiency=rates.mac_efficiency_tx, mac_mbps=rates.mac_tx, goodput_mbps=good)
        self.throughput.append((now, total))
        self.traffic = [t for t in self.traffic if t.flow.stop > now]
        if self.traffic:
            self._sampler = self.sim.call_later(self.sample_interval, self._sample)

    # -- running ----------------------------------------------------------

    def run(self, until: Optional[int] = None) -> MetricsLog:
        self.sim.run(until)
        self.end_time = max(self.sim.now, until if until is not None else 0)
        self.sync()
        return self.metrics

    def settled_roles(self) -> Dict[int, Role]:
        return {uid: u.role for uid, u in self.units.items() if u.alive}

    # -- reporting --------------------------------------------------------

    def phases(self) -> List[Dict[str, float]]:
        """Throughput per phase; phases are split at scenario events that fall inside the traffic window."""
        if not self.throughput:
            return []
        first, last = self.throughput[0][0], self.throughput[-1][0]
        cuts = sorted({t for t, action in self.event_times if first < t <= last and action != "start_traffic"})
        bounds = [first] + cuts + [last + 1]
        out = []
        for lo, hi in zip(bounds, bounds[1:]):
            samples = [v for t, v in self.throughput if lo <= t < hi]
            if not samples:
                continue
            tail = samples[len(samples) // 2:]
            out.append({"start_s": lo / 1e6, "end_s": min(hi, last) / 1e6,
                        "mean_mbps": sum(samples) / len(samples), "steady_mbps": sum(tail) / len(tail)})
        return out

    def summary(self, scenario: str = "") -> str:
        rtts = [s.rtt for s in self.rtt_samples]
        roles = self.settled_roles()
        primary = self.primary_unit()
        counters = self.flows.counters
        lines = [
            f"scenario={scenario}",
            f"seed={self.seed}",
            f"end_time_s={max(self.end_time, self.sim.now) / 1e6}",
            f"units={len(self.units)}",
            f"members={len(self._members)}",
            f"final_primary={'u%d' % primary.uid if primary else '-'}",
            "final_roles=" + ",".join(f"u{uid}:{r.value}" for uid, r in sorted(roles.items())),
            f"main_ip_owner={'u%d' % self.main_ip.owner if self.main_ip.owner is not None else '-'}",
            f"failovers={self.primary_changes}",
            f"removals={len(self.removals)}",
            f"flows_created={counters.created}",
            f"flows_owner_moved={counters.owner_moved}",
            f"flows_lost={counters.lost}",
            f"packets_dropped={self.dropped_packets}",
            f"ccl_rtt_samples={len(rtts)}",
            f"max_ccl_rtt_us={max(rtts) if rtts else 0}",
            f"degraded_ccl_events={sum(1 for s in self.rtt_samples if s.degraded)}",
            f"ccl_sent={self.ccl.stats.sent}",
            f"ccl_dropped={self.ccl.stats.dropped}",
        ]
        goodputs = sorted({self.goodput(uid) for uid in self.units})
        if len(goodputs) == 1:
            lines.append(f"unit_goodput_mbps={goodputs[0]!r}")
        for i, ph in enumerate(self.phases()):
            lines.append(f"phase{i}=start_s:{ph['start_s']!r} end_s:{ph['end_s']!r} "
                         f"mean_mbps:{ph['mean_mbps']!r} steady_mbps:{ph['steady_mbps']!r}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str, scenario: str = "") -> List[str]:
        paths = self.metrics.write(out_dir)
        path = os.path.join(out_dir, "summary.txt")
        with open(path, "w") as fh:
            fh.write(self.summary(scenario))
        return paths + [path]
