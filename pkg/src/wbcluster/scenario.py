"""Line-oriented scenario files.

::

    [cluster]
    name = lab
    mode = spanned-etherchannel
    duration = 120s

    [units]
    u1 priority=1 name=ap1 serial=SN001
    u2 priority=2 name=ap2 serial=SN002 phy=1000 cycle=0.5 efficiency=0.8

    [channels]
    ccl latency=1ms jitter=0 loss=0
    u2 latency=15ms

    [events]
    0s join u1
    30s start_traffic connections=50 window=65536
    60s fail_unit u2

Blank lines and ``#`` comments are ignored.  Every error carries the
file name and line number.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from .cluster import Cluster, UnitSpec
from .election import UnitConfig
from .flow import MAX_BUNDLE_LINKS, HashFields, RebalancePolicy
from .health import HealthConfig, IfaceKind
from .linkmodel import LinkRates, RadioParams
from .membership import ClusterConfig, RejoinCause, RejoinPolicy, expand_pool
from .sim_engine import MS, SECOND, ChannelSpec, parse_duration
from .wire import Mode, RadioType

SECTIONS = ("cluster", "units", "channels", "events")

ACTIONS = ("join", "fail_unit", "recover_unit", "fail_interface", "recover_interface", "manual_rejoin",
           "start_traffic", "stop_traffic", "set_loss", "partition_ccl")

MODES = {"spanned-etherchannel": Mode.SPANNED_ETHERCHANNEL, "spanned": Mode.SPANNED_ETHERCHANNEL,
         "individual": Mode.INDIVIDUAL}
RADIO_TYPES = {"access-point": RadioType.ACCESS_POINT, "ap": RadioType.ACCESS_POINT,
               "station": RadioType.STATION, "sta": RadioType.STATION}
IFACE_KINDS = {"spanned": IfaceKind.SPANNED_ETHERCHANNEL_MEMBER, "echan": IfaceKind.ETHERCHANNEL_MEMBER,
               "plain": IfaceKind.NON_ETHERCHANNEL}


class ScenarioError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, path: str = "<scenario>"):
        self.line = line
        self.path = path
        self.message = message
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")


@dataclass
class ScenarioEvent:
    time: int
    action: str
    args: Tuple
    line: int


@dataclass
class Scenario:
    name: str = "scenario"
    mode: Mode = Mode.SPANNED_ETHERCHANNEL
    seed: int = 0
    duration: int = 60 * SECOND
    config: ClusterConfig = field(default_factory=ClusterConfig)
    health: HealthConfig = field(default_factory=HealthConfig)
    sample_interval: int = 100 * MS
    data_rtt: int = 2 * MS
    hash_fields: HashFields = HashFields.SRC_DST_IP
    rebalance: Optional[RebalancePolicy] = None
    seq_randomization: bool = True
    rejoin: Dict[RejoinCause, RejoinPolicy] = field(default_factory=dict)
    policy_rules: List[Tuple[str, int]] = field(default_factory=list)
    ccl: ChannelSpec = field(default_factory=ChannelSpec)
    units: List[UnitSpec] = field(default_factory=list)
    events: List[ScenarioEvent] = field(default_factory=list)

    def build(self, seed: Optional[int] = None) -> Cluster:
        cluster = Cluster(seed=self.seed if seed is None else seed, mode=self.mode, health_cfg=self.health,
                          config=self.config.copy(), ccl_spec=self.ccl, data_rtt=self.data_rtt,
                          sample_interval=self.sample_interval, rebalance=self.rebalance,
                          seq_randomization=self.seq_randomization, rejoin_policies=self.rejoin or None,
                          policy_rules=self.policy_rules, hash_fields=self.hash_fields)
        for spec in self.units:
            cluster.add_unit(spec)
        for ev in self.events:
            cluster.at(ev.time, ev.action, *ev.args)
        return cluster


def _kv(tokens: List[str], line: int, path: str) -> Dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ScenarioError(f"expected key=value, got {tok!r}", line, path)
        k, v = tok.split("=", 1)
        if k in out:
            raise ScenarioError(f"{k} given twice", line, path)
        out[k] = v
    return out


def _unit_id(token: str, line: int, path: str) -> int:
    if not (token.startswith("u") and token[1:].isdigit()):
        raise ScenarioError(f"unit ids look like u1, u2 ... (got {token!r})", line, path)
    uid = int(token[1:])
    if not 0 <= uid <= 254:
        raise ScenarioError(f"unit id {token} out of range u0-u254", line, path)
    return uid


class _Parser:
    def __init__(self, text: str, path: str):
        self.text = text
        self.path = path
        self.sc = Scenario()
        self.unit_lines: Dict[int, int] = {}
        self.seen_sections: set = set()
        self.ccl_overrides: Dict[int, Tuple[Dict[str, str], int]] = {}

    def err(self, msg: str, line: Optional[int] = None) -> ScenarioError:
        return ScenarioError(msg, line, self.path)

    def duration(self, value: str, line: int, what: str) -> int:
        try:
            return parse_duration(value)
        except ValueError as exc:
            raise self.err(f"{what}: {exc}", line) from None

    def number(self, value: str, line: int, what: str, kind=float):
        try:
            return kind(value)
        except ValueError:
            raise self.err(f"{what}: not a number: {value!r}", line) from None

    def parse(self) -> Scenario:
        section = None
        for lineno, raw in enumerate(self.text.splitlines(), 1):
            stripped = raw.split("#", 1)[0].strip()
            if not stripped:
                continue
            if stripped.startswith("[") and stripped.endswith("]"):
                section = stripped[1:-1].strip()
                if section not in SECTIONS:
                    raise self.err(f"unknown section [{section}]", lineno)
                if section in self.seen_sections:
                    raise self.err(f"section [{section}] repeated", lineno)
                self.seen_sections.add(section)
                continue
            if section is None:
                raise self.err("content before the first [section]", lineno)
            getattr(self, f"_{section}")(stripped, lineno)
        self._finish()
        return self.sc

    # -- sections ---------------------------------------------------------

    def _cluster(self, text: str, line: int) -> None:
        if "=" not in text:
            raise self.err(f"expected key = value, got {text!r}", line)
        key, value = (s.strip() for s in text.split("=", 1))
        sc = self.sc
        try:
            if key == "name":
                sc.name = value
                sc.config.cluster_name = value
            elif key == "mode":
                if value not in MODES:
                    raise self.err(f"mode must be one of {', '.join(MODES)}", line)
                sc.mode = MODES[value]
            elif key == "seed":
                sc.seed = self.number(value, line, key, int)
            elif key == "duration":
                sc.duration = self.duration(value, line, key)
            elif key == "sample_interval":
                sc.sample_interval = self.duration(value, line, key)
            elif key == "data_rtt":
                sc.data_rtt = self.duration(value, line, key)
            elif key in ("keepalive_interval", "established_echan_removal", "join_grace", "non_echan_removal",
                         "ccl_rtt_bound", "rtt_probe_interval"):
                sc.health = replace(sc.health, **{key: self.duration(value, line, key)})
            elif key == "miss_threshold":
                sc.health = replace(sc.health, miss_threshold=self.number(value, line, key, int))
            elif key == "hash_fields":
                sc.hash_fields = HashFields(value)
            elif key == "rebalance":
                sc.rebalance = None if value == "off" else RebalancePolicy(True, self.number(value, line, key))
            elif key == "seq_randomization":
                if value not in ("on", "off"):
                    raise self.err("seq_randomization is on or off", line)
                sc.seq_randomization = value == "on"
            elif key == "main_ip":
                sc.config = replace(sc.config, main_cluster_ip=value)
            elif key == "ip_pool":
                sc.config = replace(sc.config, ip_pool=expand_pool(value))
            elif key == "ccl_interface":
                sc.config = replace(sc.config, ccl_interface=value)
            elif key in ("data_interfaces", "mgmt_interfaces"):
                sc.config = replace(sc.config, **{key: [v.strip() for v in value.split(",") if v.strip()]})
            elif key.startswith("role."):
                sc.config.interface_roles[key[5:]] = value
            elif key.startswith("policy."):
                sc.policy_rules.append((value.split()[0], _unit_id(value.split()[1], line, self.path)))
            elif key.startswith("rejoin."):
                self._rejoin(key[7:], value, line)
            else:
                raise self.err(f"unknown cluster setting {key!r}", line)
        except ScenarioError:
            raise
        except (ValueError, IndexError) as exc:
            raise self.err(f"{key}: {exc}", line) from None

    def _rejoin(self, key: str, value: str, line: int) -> None:
        # rejoin.<cause>.interval / rejoin.<cause>.attempts
        cause_name, _, attr = key.rpartition(".")
        try:
            cause = RejoinCause(cause_name)
        except ValueError:
            raise self.err(f"unknown rejoin cause {cause_name!r}", line) from None
        policy = self.sc.rejoin.get(cause, RejoinPolicy.default(cause))
        if attr == "interval":
            policy = replace(policy, interval=self.duration(value, line, key))
        elif attr == "attempts":
            policy = replace(policy, max_attempts=None if value == "unlimited" else self.number(value, line, key, int))
        else:
            raise self.err(f"unknown rejoin setting {attr!r}", line)
        self.sc.rejoin[cause] = policy

    def _units(self, text: str, line: int) -> None:
        tokens = text.split()
        uid = _unit_id(tokens[0], line, self.path)
        if uid in self.unit_lines:
            raise self.err(f"unit u{uid} already declared on line {self.unit_lines[uid]}", line)
        kv = _kv(tokens[1:], line, self.path)
        known = {"priority", "name", "serial", "mode", "radio", "phy", "cycle", "efficiency", "per", "snr",
                 "weight", "ifaces", "pool", "tx_power"}
        unknown = sorted(set(kv) - known)
        if unknown:
            raise self.err(f"unknown unit field {unknown[0]!r}", line)
        if "priority" not in kv:
            raise self.err("unit needs priority=", line)
        prio = self.number(kv["priority"], line, "priority", int)
        if not 1 <= prio <= 100:
            raise self.err(f"priority {prio} out of range 1-100", line)
        mode_name = kv.get("mode")
        if mode_name is not None and mode_name not in MODES:
            raise self.err(f"mode must be one of {', '.join(MODES)}", line)
        radio_name = kv.get("radio", "ap")
        if radio_name not in RADIO_TYPES:
            raise self.err(f"radio must be one of {', '.join(RADIO_TYPES)}", line)
        serial = kv.get("serial", f"SN{uid:05d}")
        try:
            cfg = UnitConfig(kv.get("name", f"u{uid}"), serial, prio,
                             MODES[mode_name] if mode_name else None, RADIO_TYPES[radio_name],
                             expand_pool(kv.get("pool", "")))
            cfg.selection_info().to_bytes()  # serial/name must be encodable
            phy = self.number(kv.get("phy", "1000"), line, "phy")
            rates = LinkRates.symmetric(phy, self.number(kv.get("cycle", "0.5"), line, "cycle"),
                                        self.number(kv.get("efficiency", "0.8"), line, "efficiency"))
            radio = RadioParams(snr_db=self.number(kv.get("snr", "36"), line, "snr"),
                                per=self.number(kv.get("per", "0.005"), line, "per"),
                                tx_power_dbm=self.number(kv.get("tx_power", "30"), line, "tx_power"))
        except ValueError as exc:
            raise self.err(str(exc), line) from None
        weight = self.number(kv.get("weight", "1"), line, "weight", int)
        if not 0 <= weight <= 0xFFFF:
            raise self.err("weight must fit 16 bits", line)
        ifaces = []
        for item in (s for s in kv.get("ifaces", "").split(",") if s):
            parts = item.split(":")
            if len(parts) > 3 or (len(parts) > 1 and parts[1] not in IFACE_KINDS) or \
                    (len(parts) == 3 and parts[2] not in ("monitored", "unmonitored")):
                raise self.err(f"bad interface {item!r}; use name[:spanned|echan|plain][:unmonitored]", line)
            default_kind = "spanned" if (MODES.get(mode_name) or self.sc.mode) is Mode.SPANNED_ETHERCHANNEL \
                else "plain"
            kind = IFACE_KINDS[parts[1] if len(parts) > 1 else default_kind]
            ifaces.append((parts[0], kind, not (len(parts) == 3 and parts[2] == "unmonitored")))
        self.unit_lines[uid] = line
        self.sc.units.append(UnitSpec(uid, cfg, radio, rates, weight, ifaces))

    def _channels(self, text: str, line: int) -> None:
        tokens = text.split()
        kv = _kv(tokens[1:], line, self.path)
        unknown = sorted(set(kv) - {"latency", "jitter", "loss"})
        if unknown:
            raise self.err(f"unknown channel field {unknown[0]!r}", line)
        if tokens[0] == "ccl":
            self.sc.ccl = self._spec(kv, self.sc.ccl, line)
        else:
            self.ccl_overrides[_unit_id(tokens[0], line, self.path)] = (kv, line)

    def _spec(self, kv: Dict[str, str], base: ChannelSpec, line: int) -> ChannelSpec:
        try:
            return ChannelSpec(self.duration(kv["latency"], line, "latency") if "latency" in kv else base.base_latency,
                               self.duration(kv["jitter"], line, "jitter") if "jitter" in kv else base.jitter,
                               self.number(kv["loss"], line, "loss") if "loss" in kv else base.loss_rate)
        except ValueError as exc:
            raise self.err(str(exc), line) from None

    def _events(self, text: str, line: int) -> None:
        try:
            tokens = shlex.split(text)
        except ValueError as exc:
            raise self.err(str(exc), line) from None
        if len(tokens) < 2:
            raise self.err("event lines are '<time> <action> [args]'", line)
        t = self.duration(tokens[0], line, "event time")
        action, rest = tokens[1], tokens[2:]
        if action not in ACTIONS:
            raise self.err(f"unknown action {action!r}", line)
        self.sc.events.append(ScenarioEvent(t, action, tuple(rest), line))

    # -- cross checks -----------------------------------------------------

    def _finish(self) -> None:
        sc = self.sc
        declared = {u.uid for u in sc.units}
        if not sc.units:
            raise self.err("no units declared")
        for uid, (kv, line) in sorted(self.ccl_overrides.items()):
            if uid not in declared:
                raise self.err(f"channel for undeclared unit u{uid}", line)
        fixed = []
        for spec in sc.units:
            cfg = spec.config if spec.config.mode is not None else replace(spec.config, mode=sc.mode)
            ifaces = spec.ifaces
            if not ifaces:
                kind = IfaceKind.SPANNED_ETHERCHANNEL_MEMBER if cfg.mode is Mode.SPANNED_ETHERCHANNEL \
                    else IfaceKind.NON_ETHERCHANNEL
                ifaces = [(name, kind, True) for name in sc.config.data_interfaces]
            ccl = None
            if spec.uid in self.ccl_overrides:
                kv, line = self.ccl_overrides[spec.uid]
                ccl = self._spec(kv, sc.ccl, line)
            fixed.append(replace(spec, config=cfg, ifaces=ifaces, ccl=ccl))
        sc.units = fixed
        seen = {}
        for spec in sc.units:
            key = (spec.config.priority, spec.config.name, spec.config.serial)
            if key in seen or spec.config.serial in {k[2] for k in seen}:
                raise self.err(f"unit u{spec.uid} duplicates the identity or serial of u{seen.get(key, '?')}",
                               self.unit_lines[spec.uid])
            seen[key] = spec.uid
        links = [(u.uid, name) for u in sc.units for name, kind, _ in u.ifaces
                 if kind is IfaceKind.SPANNED_ETHERCHANNEL_MEMBER and name in sc.config.data_interfaces]
        if len(links) > MAX_BUNDLE_LINKS:
            raise self.err(f"spanned bundle has {len(links)} data links; at most {MAX_BUNDLE_LINKS} allowed",
                           self.unit_lines[links[MAX_BUNDLE_LINKS][0]])
        ifaces_of = {u.uid: {name for name, _, _ in u.ifaces} for u in sc.units}
        events = []
        for ev in sc.events:
            events.append(replace(ev, args=self._event_args(ev, declared, ifaces_of)))
        sc.events = sorted(events, key=lambda e: e.time)
        if sc.duration <= 0:
            raise self.err("duration must be positive")

    def _event_args(self, ev: ScenarioEvent, declared, ifaces_of) -> Tuple:
        a, line = list(ev.args), ev.line

        def unit(tok):
            uid = _unit_id(tok, line, self.path)
            if uid not in declared:
                raise self.err(f"undeclared unit {tok}", line)
            return uid

        def arity(lo, hi):
            if not lo <= len(a) <= hi:
                want = str(lo) if lo == hi else f"{lo}-{hi}"
                raise self.err(f"{ev.action} takes {want} argument(s), got {len(a)}", line)

        if ev.action in ("join", "fail_unit", "recover_unit", "manual_rejoin"):
            arity(1, 1)
            return (unit(a[0]),)
        if ev.action in ("fail_interface", "recover_interface"):
            arity(2, 2)
            uid = unit(a[0])
            if a[1] not in ifaces_of[uid] and a[1] != self.sc.config.ccl_interface:
                raise self.err(f"unit {a[0]} has no interface {a[1]!r}", line)
            return (uid, a[1])
        if ev.action == "start_traffic":
            kv = _kv(a, line, self.path)
            unknown = sorted(set(kv) - {"connections", "window", "duration"})
            if unknown:
                raise self.err(f"unknown start_traffic field {unknown[0]!r}", line)
            conns = self.number(kv.get("connections", "50"), line, "connections", int)
            window = self.number(kv.get("window", "65536"), line, "window", int)
            if conns <= 0 or window <= 0:
                raise self.err("connections and window must be positive", line)
            dur = self.duration(kv["duration"], line, "duration") if "duration" in kv else None
            return (conns, window, dur)
        if ev.action == "stop_traffic":
            arity(0, 0)
            return ()
        if ev.action == "set_loss":
            arity(2, 2)
            target = "ccl" if a[0] == "ccl" else unit(a[0])
            rate = self.number(a[1], line, "loss")
            if not 0.0 <= rate <= 1.0:
                raise self.err("loss must be in [0, 1]", line)
            return (target, rate)
        if ev.action == "partition_ccl":
            arity(1, 2)
            state = a[1] if len(a) > 1 else "down"
            if state not in ("down", "heal"):
                raise self.err("partition_ccl takes 'down' or 'heal'", line)
            return (unit(a[0]), state)
        raise self.err(f"unknown action {ev.action!r}", line)  # pragma: no cover


def parse_scenario(text: str, path: str = "<scenario>") -> Scenario:
    return _Parser(text, path).parse()


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(f"cannot read: {exc.strerror}", None, path) from None
    except UnicodeDecodeError:
        raise ScenarioError("not a utf-8 text file", None, path) from None
    return parse_scenario(text, path)
