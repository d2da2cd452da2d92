"""Data-plane connection handling.

Every connection has one *proprietor* (the unit that owns and processes it)
and one *organizer* (hash-chosen, holds a backup copy of its state and answers
owner lookups). Any other unit that sees the connection's packets is a
*forwarder* and relays them to the proprietor.

Lookups and state updates are modelled as instantaneous RPCs over the CCL;
each still produces the corresponding wire message through ``transport`` so
the control traffic can be accounted for.
"""

from __future__ import annotations

import ipaddress
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .wire import (NO_UNIT, IpLayerConnInfo, Mode, OwnerInfo, OwnerQuery, OwnerReply, Replication, StateUpdate,
                   TcpState, UpperLayerConnInfo)

logger = logging.getLogger(__name__)

MAX_BUNDLE_LINKS = 6
ORGANIZER_SEED = 0x9E3779B9
MASK32 = 0xFFFFFFFF


class Protocol(Enum):
    TCP = "tcp"
    UDP = "udp"
    ICMP = "icmp"
    DNS = "dns"

    @property
    def ip_number(self) -> int:
        return {"tcp": 6, "udp": 17, "icmp": 1, "dns": 17}[self.value]

    @property
    def short_lived(self) -> bool:
        return self in (Protocol.ICMP, Protocol.DNS)


def _ip(value) -> int:
    return value if isinstance(value, int) else int(ipaddress.IPv4Address(value))


@dataclass(frozen=True)
class FlowKey:
    src_ip: int
    dst_ip: int
    src_port: int = 0
    dst_port: int = 0
    protocol: Protocol = Protocol.TCP

    @classmethod
    def make(cls, src_ip, dst_ip, src_port: int = 0, dst_port: int = 0,
             protocol: Protocol = Protocol.TCP) -> "FlowKey":
        return cls(_ip(src_ip), _ip(dst_ip), src_port, dst_port, protocol)

    def reversed(self) -> "FlowKey":
        return FlowKey(self.dst_ip, self.src_ip, self.dst_port, self.src_port, self.protocol)

    def canonical(self) -> "FlowKey":
        if (self.src_ip, self.src_port) <= (self.dst_ip, self.dst_port):
            return self
        return self.reversed()

    @property
    def label(self) -> str:
        return (f"{self.protocol.value}:{ipaddress.IPv4Address(self.src_ip)}:{self.src_port}"
                f"-{ipaddress.IPv4Address(self.dst_ip)}:{self.dst_port}")

    def ip_info(self) -> IpLayerConnInfo:
        return IpLayerConnInfo(str(ipaddress.IPv4Address(self.src_ip)), str(ipaddress.IPv4Address(self.dst_ip)),
                               self.protocol.ip_number)


# --------------------------------------------------------------------------
# hashing


class HashFields(Enum):
    SRC_DST_IP = "src-dst-ip"
    SRC_DST_IP_PORT = "src-dst-ip-port"


@dataclass(frozen=True)
class HashConfig:
    fields_used: HashFields = HashFields.SRC_DST_IP
    bucket_count: int = 1
    weights: Tuple[int, ...] = ()

    def __post_init__(self):
        if not 1 <= self.bucket_count <= MAX_BUNDLE_LINKS:
            raise ValueError(f"bucket_count must be 1-{MAX_BUNDLE_LINKS} (at most 6 bundled links)")
        if self.weights and len(self.weights) != self.bucket_count:
            raise ValueError("one weight per bucket")
        if self.weights and sum(self.weights) <= 0:
            raise ValueError("weights must not all be zero")


def mix32(x: int) -> int:
    """32-bit avalanche finalizer (multiply / xor-shift)."""
    x &= MASK32
    x ^= x >> 16
    x = (x * 0x85EBCA6B) & MASK32
    x ^= x >> 13
    x = (x * 0xC2B2AE35) & MASK32
    x ^= x >> 16
    return x


def flow_hash(key: FlowKey, fields_used: HashFields = HashFields.SRC_DST_IP, seed: int = 0) -> int:
    """Direction-independent 32-bit hash of a flow key."""
    if fields_used is HashFields.SRC_DST_IP:
        lo, hi = sorted((key.src_ip, key.dst_ip))
        h = mix32(lo ^ seed)
        return mix32(h ^ hi ^ 0x27D4EB2F)
    a, b = sorted(((key.src_ip, key.src_port), (key.dst_ip, key.dst_port)))
    h = mix32(a[0] ^ seed)
    h = mix32(h ^ b[0] ^ 0x27D4EB2F)
    return mix32(h ^ ((a[1] << 16) | b[1]))


def symmetric_hash(key: FlowKey, cfg: HashConfig) -> int:
    """Bucket index for ``key``; identical for both directions of a flow."""
    if cfg.bucket_count == 1:
        return 0
    h = flow_hash(key, cfg.fields_used)
    weights = cfg.weights or (1,) * cfg.bucket_count
    total = sum(weights)
    point = (h * total) >> 32
    acc = 0
    for index, w in enumerate(weights):
        acc += w
        if point < acc:
            return index
    return cfg.bucket_count - 1


def choose_organizer(key: FlowKey, members: Sequence[int], proprietor: Optional[int] = None) -> int:
    """Hash target among ``members`` (sorted); the next one in the ring if that is the proprietor."""
    if not members:
        raise ValueError("no members to choose an organizer from")
    ring = sorted(members)
    idx = flow_hash(key, HashFields.SRC_DST_IP, ORGANIZER_SEED) % len(ring)
    if ring[idx] == proprietor and len(ring) >= 2:
        idx = (idx + 1) % len(ring)
    return ring[idx]


def lookup_target(key: FlowKey, members: Sequence[int]) -> int:
    """Unit a stranger asks about ``key``: the plain hash target."""
    ring = sorted(members)
    return ring[flow_hash(key, HashFields.SRC_DST_IP, ORGANIZER_SEED) % len(ring)]


class LinkBundle:
    """Upstream switch view: which unit a packet lands on."""

    def __init__(self, members: Sequence[int], weights: Optional[Sequence[int]] = None,
                 fields_used: HashFields = HashFields.SRC_DST_IP):
        self.members = list(members)
        if weights is not None and len(weights) != len(self.members):
            raise ValueError("one weight per member")
        self.cfg = (HashConfig(fields_used, len(self.members), tuple(weights) if weights else ())
                    if self.members else None)

    def select(self, key: FlowKey) -> Optional[int]:
        if self.cfg is None:
            return None
        return self.members[symmetric_hash(key, self.cfg)]


class PolicyMap:
    """Individual-mode policy routing: ordered (network -> unit) rules.

    A rule matches when either endpoint lies in its network, so both
    directions of a connection hit the same unit.
    """

    def __init__(self, rules: Iterable[Tuple[str, int]] = (), fallback: Optional[LinkBundle] = None):
        self.rules = [(ipaddress.IPv4Network(net), unit) for net, unit in rules]
        self.fallback = fallback

    def select(self, key: FlowKey, live: Optional[Iterable[int]] = None) -> Optional[int]:
        live_set = None if live is None else set(live)
        src, dst = ipaddress.IPv4Address(key.src_ip), ipaddress.IPv4Address(key.dst_ip)
        for net, unit in self.rules:
            if (src in net or dst in net) and (live_set is None or unit in live_set):
                return unit
        return self.fallback.select(key) if self.fallback else None


# --------------------------------------------------------------------------
# SYN cookies: unit id (8) | salt (16) | crc-8 over the first three bytes (8)


class InvalidCookie(ValueError):
    pass


def _crc8_table() -> List[int]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = ((crc << 1) ^ 0x07) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
        table.append(crc)
    return table


_CRC8 = _crc8_table()


def crc8(data: bytes) -> int:
    crc = 0
    for b in data:
        crc = _CRC8[crc ^ b]
    return crc


def encode_syn_cookie(proprietor: int, salt: int) -> int:
    if not 0 <= proprietor <= 0xFF:
        raise ValueError("unit id must fit 8 bits")
    if not 0 <= salt <= 0xFFFF:
        raise ValueError("salt must fit 16 bits")
    head = bytes((proprietor, salt >> 8, salt & 0xFF))
    return (proprietor << 24) | (salt << 8) | crc8(head)


def decode_syn_cookie(cookie: int) -> int:
    if not 0 <= cookie <= MASK32:
        raise InvalidCookie("cookie must fit 32 bits")
    raw = cookie.to_bytes(4, "big")
    if crc8(raw[:3]) != raw[3]:
        raise InvalidCookie(f"checksum mismatch in {cookie:#010x}")
    return raw[0]


# --------------------------------------------------------------------------
# replicated extras


class StateCategory(Enum):
    UPTIME = "uptime"
    ARP_TABLE = "arp-table"
    MAC_TABLE = "mac-table"
    USER_IDENTITY = "user-identity"
    SNMP_ENGINE_ID = "snmp-engine-id"
    VPN_SITE_TO_SITE = "vpn-site-to-site"


def replicated_state_for(category: StateCategory, mode: Mode) -> bool:
    if category in (StateCategory.UPTIME, StateCategory.USER_IDENTITY):
        return True
    if category in (StateCategory.ARP_TABLE, StateCategory.MAC_TABLE):
        return mode is Mode.INDIVIDUAL
    return False


# --------------------------------------------------------------------------
# flow table


class PacketKind(Enum):
    SYN = "syn"
    SYN_ACK = "syn-ack"
    DATA = "data"
    FIN = "fin"
    RST = "rst"


@dataclass(frozen=True)
class Packet:
    key: FlowKey
    kind: PacketKind = PacketKind.DATA
    cookie: Optional[int] = None


@dataclass
class FlowRecord:
    key: FlowKey
    proprietor: int
    organizer: int
    forwarders: set = field(default_factory=set)
    tcp_state: TcpState = TcpState.NA
    syn_cookie: int = 0
    created_at: int = 0
    extras: Dict[StateCategory, bytes] = field(default_factory=dict)
    backup_state_fresh: bool = False

    def upper(self, mode: Mode) -> UpperLayerConnInfo:
        opaque = b"".join(f"{cat.value}=".encode() + blob + b";" for cat, blob in sorted(
            self.extras.items(), key=lambda kv: kv[0].value) if replicated_state_for(cat, mode))
        return UpperLayerConnInfo(self.key.src_port, self.key.dst_port, self.tcp_state,
                                  self.syn_cookie, 0, opaque[:1024])


@dataclass(frozen=True)
class Action:
    outcome: str  # local | forwarded | relayed | dropped
    path: Tuple[int, ...]
    proprietor: Optional[int] = None
    queried: bool = False
    reason: str = ""


@dataclass
class RebalancePolicy:
    enabled: bool = False
    threshold: float = 0.25


@dataclass
class FlowCounters:
    created: int = 0
    owner_moved: int = 0
    lost: int = 0
    dropped: int = 0
    queries: int = 0
    state_updates: int = 0
    cookie_hits: int = 0
    cookie_invalid: int = 0
    degenerate: int = 0


Transport = Callable[[int, int, object], None]


class FlowManager:
    """Per-unit flow tables for the whole cluster.

    ``owned[u]`` is what unit ``u`` holds as proprietor, ``backup[u]`` the
    copies it keeps as organizer, ``forwarding[u]`` its forwarder entries.
    Units only consult their own tables plus RPCs to the organizer.
    """

    def __init__(self, members: Iterable[int] = (), transport: Optional[Transport] = None,
                 mode: Mode = Mode.SPANNED_ETHERCHANNEL, seq_randomization: bool = True,
                 rebalance: Optional[RebalancePolicy] = None, clock: Callable[[], int] = lambda: 0,
                 on_event: Optional[Callable[[int, FlowKey, str, Optional[int], Optional[int]], None]] = None):
        self.transport = transport
        self.mode = mode
        self.seq_randomization = seq_randomization
        self.rebalance = rebalance or RebalancePolicy()
        self.clock = clock
        self.on_event = on_event
        self.counters = FlowCounters()
        self.owned: Dict[int, Dict[FlowKey, FlowRecord]] = {}
        self.backup: Dict[int, Dict[FlowKey, FlowRecord]] = {}
        self.forwarding: Dict[int, Dict[FlowKey, int]] = {}
        self.live: List[int] = []
        self.lost_keys: set = set()
        self.arrivals: Optional[List[Tuple[int, int, FlowKey]]] = None
        self._salt = 0
        self.set_members(members)

    # -- membership -------------------------------------------------------

    def _ensure(self, uid: int) -> None:
        self.owned.setdefault(uid, {})
        self.backup.setdefault(uid, {})
        self.forwarding.setdefault(uid, {})

    def set_members(self, members: Iterable[int]) -> Dict[str, int]:
        """Apply a new live member set; returns counts of dormant and lost flows."""
        new = sorted(set(members))
        gone = [u for u in self.live if u not in new]
        self.live = new
        for uid in new:
            self._ensure(uid)
        summary = {"dormant": 0, "lost": 0}
        for uid in gone:
            s = self._drop_unit(uid)
            summary["dormant"] += s["dormant"]
            summary["lost"] += s["lost"]
        self._rehome()
        return summary

    def on_owner_failure(self, failed: int) -> Dict[str, int]:
        """Remove ``failed``; its flows stay dormant until their next packet arrives somewhere."""
        return self.set_members(u for u in self.live if u != failed)

    def _drop_unit(self, failed: int) -> Dict[str, int]:
        owned = self.owned.pop(failed, {})
        self.backup.pop(failed, None)
        self.forwarding.pop(failed, None)
        lost = 0
        for key, rec in owned.items():
            if not any(key in self.backup.get(u, {}) for u in self.live):
                lost += 1
                self._lose(key, rec.proprietor, rec.organizer)
        self.owned[failed] = {}
        self.backup[failed] = {}
        self.forwarding[failed] = {}
        return {"dormant": len(owned) - lost, "lost": lost}

    def _lose(self, key: FlowKey, proprietor, organizer) -> None:
        if key in self.lost_keys:
            return
        self.lost_keys.add(key)
        self.counters.lost += 1
        self._emit(key, "lost", proprietor, organizer)

    def _rehome(self) -> None:
        """Keep every backup on the unit the lookup rule now points at."""
        if not self.live:
            return
        live = set(self.live)
        for uid in self.live:
            for key, rec in list(self.owned[uid].items()):
                want = choose_organizer(key, self.live, uid)
                if want != rec.organizer or key not in self.backup[want]:
                    old = rec.organizer
                    if old in live and old != want:
                        self.backup[old].pop(key, None)
                    rec.organizer = want
                    self._state_update(rec)
        for uid in self.live:
            for key, copy in list(self.backup[uid].items()):
                if copy.proprietor in live:
                    if self.owned[copy.proprietor].get(key) is None:
                        del self.backup[uid][key]
                    continue
                want = choose_organizer(key, self.live, None)
                if want != uid:
                    del self.backup[uid][key]
                    moved = replace(copy, organizer=want)
                    self.backup[want][key] = moved
                    self._send(uid, want, Replication(key.ip_info(), copy.upper(self.mode)))

    # -- helpers ----------------------------------------------------------

    def _emit(self, key: FlowKey, event: str, proprietor, organizer) -> None:
        if self.on_event is not None:
            self.on_event(self.clock(), key, event, proprietor, organizer)

    def _send(self, src: int, dst: int, msg) -> None:
        if self.transport is not None and src != dst:
            self.transport(src, dst, msg)

    def _state_update(self, rec: FlowRecord) -> None:
        self.counters.state_updates += 1
        copy = replace(rec, forwarders=set(rec.forwarders), extras=dict(rec.extras), backup_state_fresh=True)
        self.backup[rec.organizer][rec.key] = copy
        rec.backup_state_fresh = True
        self._send(rec.proprietor, rec.organizer,
                   StateUpdate(rec.key.ip_info(), OwnerInfo(rec.proprietor, rec.organizer), rec.upper(self.mode)))
        self._emit(rec.key, "state-update", rec.proprietor, rec.organizer)

    def _next_cookie(self, proprietor: int) -> int:
        self._salt = (self._salt + 0x9E37) & 0xFFFF
        return encode_syn_cookie(proprietor, self._salt)

    def record(self, key: FlowKey) -> Optional[FlowRecord]:
        key = key.canonical()
        for uid in self.live:
            rec = self.owned[uid].get(key)
            if rec is not None:
                return rec
        return None

    def records(self) -> List[FlowRecord]:
        return [rec for uid in self.live for rec in self.owned[uid].values()]

    def owner_load(self) -> Dict[int, int]:
        return {uid: len(self.owned[uid]) for uid in self.live}

    # -- packet walk ------------------------------------------------------

    def on_packet(self, unit: int, pkt: Packet) -> Action:
        if self.arrivals is not None:
            self.arrivals.append((self.clock(), unit, pkt.key.canonical()))
        if unit not in self.owned or unit not in self.live:
            self.counters.dropped += 1
            return Action("dropped", (unit,), reason="unit not in cluster")
        key = pkt.key.canonical()

        rec = self.owned[unit].get(key)
        if rec is not None:
            return self._at_proprietor(rec, pkt, (unit,))

        target = self.forwarding[unit].get(key)
        if target is not None:
            rec = self.owned.get(target, {}).get(key) if target in self.live else None
            if rec is not None:
                rec.forwarders.add(unit)
                return self._at_proprietor(rec, pkt, (unit, target), outcome="forwarded")
            del self.forwarding[unit][key]

        if pkt.kind is PacketKind.SYN and pkt.key.protocol is Protocol.TCP:
            return self._new_flow(unit, key, pkt)

        if pkt.kind is PacketKind.SYN_ACK and pkt.cookie is not None and self.seq_randomization:
            try:
                owner = decode_syn_cookie(pkt.cookie)
            except InvalidCookie:
                self.counters.cookie_invalid += 1
            else:
                rec = self.owned.get(owner, {}).get(key) if owner in self.live else None
                if rec is not None:
                    self.counters.cookie_hits += 1
                    self.forwarding[unit][key] = owner
                    rec.forwarders.add(unit)
                    return self._at_proprietor(rec, pkt, (unit, owner), outcome="forwarded")

        if not self.live:
            self.counters.dropped += 1
            return Action("dropped", (unit,), reason="no organizer")
        organizer = lookup_target(key, self.live)
        if pkt.key.protocol.short_lived:
            return self._short_lived(unit, organizer, key, pkt)
        return self._query(unit, organizer, key, pkt)

    def _new_flow(self, unit: int, key: FlowKey, pkt: Packet, path_prefix: Tuple[int, ...] = ()) -> Action:
        owner = unit
        path = path_prefix + (unit,)
        if self.rebalance.enabled and len(self.live) >= 2 and not path_prefix:
            loads = self.owner_load()
            mean = sum(loads.values()) / len(loads)
            if loads[unit] > mean * (1 + self.rebalance.threshold):
                owner = min(self.live, key=lambda u: (loads[u], u))
                if owner != unit:
                    self.forwarding[unit][key] = owner
                    path = path + (owner,)
        organizer = choose_organizer(key, self.live, owner)
        if organizer == owner:
            self.counters.degenerate += 1
        state = TcpState.SYN_SENT if key.protocol is Protocol.TCP else TcpState.NA
        rec = FlowRecord(key, owner, organizer, tcp_state=state, created_at=self.clock())
        rec.extras[StateCategory.UPTIME] = str(self.clock()).encode()
        if key.protocol is Protocol.TCP:
            rec.syn_cookie = self._next_cookie(owner) if self.seq_randomization else 0
        if owner != unit:
            rec.forwarders.add(unit)
        self.owned[owner][key] = rec
        self.lost_keys.discard(key)
        self.counters.created += 1
        self._emit(key, "created", owner, organizer)
        self._state_update(rec)
        return Action("local" if owner == unit and not path_prefix else "forwarded", path, owner)

    def _at_proprietor(self, rec: FlowRecord, pkt: Packet, path: Tuple[int, ...], outcome: str = "local",
                       queried: bool = False) -> Action:
        old = rec.tcp_state
        if rec.key.protocol is Protocol.TCP:
            if pkt.kind is PacketKind.SYN_ACK and old is TcpState.SYN_SENT:
                rec.tcp_state = TcpState.ESTABLISHED
            elif pkt.kind is PacketKind.FIN:
                rec.tcp_state = TcpState.CLOSED if old is TcpState.FIN_WAIT else TcpState.FIN_WAIT
            elif pkt.kind is PacketKind.RST:
                rec.tcp_state = TcpState.CLOSED
        if rec.tcp_state is not old:
            self._state_update(rec)
        return Action(outcome, path, rec.proprietor, queried)

    def _organizer_view(self, organizer: int, key: FlowKey) -> Tuple[Optional[int], Optional[FlowRecord]]:
        """What ``organizer`` knows: (proprietor, backup copy)."""
        if key in self.owned[organizer]:
            return organizer, None
        copy = self.backup[organizer].get(key)
        if copy is None:
            return None, None
        return copy.proprietor, copy

    def _query(self, unit: int, organizer: int, key: FlowKey, pkt: Packet) -> Action:
        self.counters.queries += 1
        self._send(unit, organizer, OwnerQuery(key.ip_info(), UpperLayerConnInfo(key.src_port, key.dst_port)))
        owner, copy = self._organizer_view(organizer, key)
        self._send(organizer, unit, OwnerReply(key.ip_info(), OwnerInfo(owner if owner is not None else NO_UNIT,
                                                                         organizer)))
        if owner is None:
            if key.protocol is Protocol.UDP:
                return self._new_flow(unit, key, pkt)
            self.counters.dropped += 1
            return Action("dropped", (unit, organizer), queried=True, reason="unknown flow")
        if owner in self.live and key in self.owned[owner]:
            rec = self.owned[owner][key]
            if owner != unit:
                self.forwarding[unit][key] = owner
                rec.forwarders.add(unit)
            return self._at_proprietor(rec, pkt, (unit, owner) if owner != unit else (unit,),
                                       outcome="forwarded" if owner != unit else "local", queried=True)
        return self._take_over(unit, organizer, copy, pkt, queried=True)

    def _short_lived(self, unit: int, organizer: int, key: FlowKey, pkt: Packet) -> Action:
        owner, copy = self._organizer_view(organizer, key)
        if owner is None:
            return self._new_flow(unit, key, pkt)
        if owner in self.live and key in self.owned[owner]:
            rec = self.owned[owner][key]
            path = tuple(dict.fromkeys((unit, organizer, owner)))
            return self._at_proprietor(rec, pkt, path, outcome="relayed" if len(path) > 1 else "local")
        return self._take_over(unit, organizer, copy, pkt)

    def _take_over(self, unit: int, organizer: int, copy: FlowRecord, pkt: Packet, queried: bool = False) -> Action:
        """Proprietor is gone: the asking unit becomes the new proprietor."""
        old_owner = copy.proprietor
        self._send(organizer, unit, Replication(copy.key.ip_info(), copy.upper(self.mode)))
        rec = replace(copy, proprietor=unit, forwarders=set(), extras=dict(copy.extras), backup_state_fresh=False)
        if rec.key.protocol is Protocol.TCP and self.seq_randomization:
            rec.syn_cookie = self._next_cookie(unit)
        new_org = choose_organizer(rec.key, self.live, unit)
        if new_org != organizer:
            self.backup[organizer].pop(rec.key, None)
        rec.organizer = new_org
        self.owned[unit][rec.key] = rec
        for uid in self.live:
            if self.forwarding[uid].get(rec.key) == old_owner:
                del self.forwarding[uid][rec.key]
        self.counters.owner_moved += 1
        self._emit(rec.key, "owner-moved", unit, new_org)
        self._state_update(rec)
        return self._at_proprietor(rec, pkt, (unit,), outcome="local", queried=queried)
