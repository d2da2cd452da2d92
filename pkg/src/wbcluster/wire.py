"""Binary encoding of cluster messages.

Layout (big-endian throughout)::

    header    msg_type:u16  version:u16  length:u16     (length = body bytes)
    body      component*    where component = type:u16 length:u16 value

Message and component codes share one numbering space. Unknown component
types are skipped on decode so newer peers can add fields.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Optional, Type, Union

VERSION = 1
HEADER = struct.Struct(">HHH")
TLV = struct.Struct(">HH")
SERIAL_LEN = 16
MAX_NAME_LEN = 32
MAX_OPAQUE = 1024
SNR_LIMIT = 10_000  # centi-dB, i.e. +/-100 dB
NO_UNIT = 0xFF


class Code(IntEnum):
    CLUSTER_KEEPALIVE = 1
    SELECTION_INFO_COMP = 2
    RADIO_INFO_COMP = 3
    CLUSTER_REPLICATION = 4
    IP_LAYER_CONN_INFO = 5
    UPPER_LAYER_CONN_INFO = 6
    ELECTION_REQUEST = 7
    ELECTION_RESPONSE = 8
    FORCE_SECONDARY = 9
    FORCED_LEAVE = 10
    OWNER_QUERY = 11
    OWNER_REPLY = 12
    STATE_UPDATE = 13
    CCL_PING = 14
    CCL_PONG = 15
    OWNER_INFO_COMP = 16
    PROBE_INFO_COMP = 17


class WireRole(IntEnum):
    PRIMARY_STANDBY = 1
    SECONDARY = 2
    PRIMARY = 3


class Mode(IntEnum):
    SPANNED_ETHERCHANNEL = 1
    INDIVIDUAL = 2

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


class RadioType(IntEnum):
    ACCESS_POINT = 1
    STATION = 2

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


class TcpState(IntEnum):
    NA = 0
    SYN_SENT = 1
    ESTABLISHED = 2
    FIN_WAIT = 3
    CLOSED = 4


class WireError(ValueError):
    pass


class EncodeError(WireError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name


class DecodeError(WireError):
    pass


class TruncatedError(DecodeError):
    pass


class VersionError(DecodeError):
    pass


class LengthMismatchError(DecodeError):
    pass


class PriorityError(DecodeError):
    pass


class UnknownMessageError(DecodeError):
    pass


class MalformedError(DecodeError):
    pass


# --------------------------------------------------------------------------
# components


def _ip_to_int(ip: str, name: str) -> int:
    try:
        return int(ipaddress.IPv4Address(ip))
    except (ipaddress.AddressValueError, ValueError) as exc:
        raise EncodeError(name, f"not an IPv4 address: {ip!r}") from exc


@dataclass(frozen=True)
class SelectionInfo:
    priority: int
    serial: str
    role: WireRole = WireRole.SECONDARY
    name: str = ""

    CODE = Code.SELECTION_INFO_COMP

    def to_bytes(self) -> bytes:
        if not isinstance(self.priority, int) or not 1 <= self.priority <= 100:
            raise EncodeError("unit_priority", f"must be 1-100, got {self.priority!r}")
        if (not self.serial.isascii() or not self.serial.isprintable() or len(self.serial) > SERIAL_LEN
                or self.serial != self.serial.rstrip(" ")):
            raise EncodeError("serial_number", f"must be <= {SERIAL_LEN} printable ascii chars, no trailing space")
        serial = self.serial.encode("ascii")
        name = self.name.encode("utf-8")
        if len(name) > MAX_NAME_LEN:
            raise EncodeError("name", f"must be <= {MAX_NAME_LEN} bytes")
        return (
            struct.pack(">BB", self.priority, int(WireRole(self.role)))
            + serial.ljust(SERIAL_LEN, b" ")
            + struct.pack(">B", len(name))
            + name
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "SelectionInfo":
        if len(data) < 2 + SERIAL_LEN + 1:
            raise TruncatedError("selection info too short")
        priority, role = struct.unpack_from(">BB", data)
        if not 1 <= priority <= 100:
            raise PriorityError(f"unit priority {priority} outside 1-100")
        try:
            role = WireRole(role)
        except ValueError:
            raise MalformedError(f"unknown role code {role}") from None
        raw_serial = data[2:2 + SERIAL_LEN]
        try:
            serial = raw_serial.decode("ascii").rstrip(" ")
        except UnicodeDecodeError:
            raise MalformedError("serial is not ascii") from None
        if not serial.isprintable():
            raise MalformedError("serial is not printable")
        name_len = data[2 + SERIAL_LEN]
        start = 3 + SERIAL_LEN
        if name_len > MAX_NAME_LEN:
            raise MalformedError("name too long")
        if len(data) != start + name_len:
            raise LengthMismatchError("selection info length does not match name length")
        try:
            name = data[start:].decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedError("name is not utf-8") from None
        return cls(priority, serial, role, name)


@dataclass(frozen=True)
class RadioInfo:
    mode: Mode = Mode.SPANNED_ETHERCHANNEL
    radio_type: RadioType = RadioType.ACCESS_POINT
    snr_centi_db: int = 3600
    load_balancing_weight: int = 1

    CODE = Code.RADIO_INFO_COMP
    _FMT = struct.Struct(">BBhH")

    @property
    def snr_db(self) -> float:
        return self.snr_centi_db / 100

    def to_bytes(self) -> bytes:
        if not -SNR_LIMIT <= self.snr_centi_db <= SNR_LIMIT:
            raise EncodeError("snr", "outside [-100 dB, +100 dB]")
        if not 0 <= self.load_balancing_weight <= 0xFFFF:
            raise EncodeError("load_balancing_weight", "must fit 16 bits")
        return self._FMT.pack(int(Mode(self.mode)), int(RadioType(self.radio_type)),
                              self.snr_centi_db, self.load_balancing_weight)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RadioInfo":
        if len(data) != cls._FMT.size:
            raise LengthMismatchError("radio info must be 6 bytes")
        mode, rtype, snr, weight = cls._FMT.unpack(data)
        try:
            mode, rtype = Mode(mode), RadioType(rtype)
        except ValueError:
            raise MalformedError("unknown mode or radio type code") from None
        if not -SNR_LIMIT <= snr <= SNR_LIMIT:
            raise MalformedError("snr out of range")
        return cls(mode, rtype, snr, weight)


@dataclass(frozen=True)
class IpLayerConnInfo:
    src_ip: str
    dst_ip: str
    protocol: int

    CODE = Code.IP_LAYER_CONN_INFO
    _FMT = struct.Struct(">IIB")

    def to_bytes(self) -> bytes:
        if not 0 <= self.protocol <= 0xFF:
            raise EncodeError("protocol", "must fit 8 bits")
        return self._FMT.pack(_ip_to_int(self.src_ip, "src_ip"), _ip_to_int(self.dst_ip, "dst_ip"),
                              self.protocol)

    @classmethod
    def from_bytes(cls, data: bytes) -> "IpLayerConnInfo":
        if len(data) != cls._FMT.size:
            raise LengthMismatchError("ip layer info must be 9 bytes")
        src, dst, proto = cls._FMT.unpack(data)
        return cls(str(ipaddress.IPv4Address(src)), str(ipaddress.IPv4Address(dst)), proto)


@dataclass(frozen=True)
class UpperLayerConnInfo:
    src_port: int
    dst_port: int
    tcp_state: TcpState = TcpState.NA
    seq_num: int = 0
    ack_num: int = 0
    opaque_state: bytes = b""

    CODE = Code.UPPER_LAYER_CONN_INFO
    _FMT = struct.Struct(">HHBIIH")

    def to_bytes(self) -> bytes:
        for name in ("src_port", "dst_port"):
            if not 0 <= getattr(self, name) <= 0xFFFF:
                raise EncodeError(name, "must fit 16 bits")
        for name in ("seq_num", "ack_num"):
            if not 0 <= getattr(self, name) <= 0xFFFFFFFF:
                raise EncodeError(name, "must fit 32 bits")
        if len(self.opaque_state) > MAX_OPAQUE:
            raise EncodeError("opaque_state", f"longer than {MAX_OPAQUE} bytes")
        return self._FMT.pack(self.src_port, self.dst_port, int(TcpState(self.tcp_state)),
                              self.seq_num, self.ack_num, len(self.opaque_state)) + self.opaque_state

    @classmethod
    def from_bytes(cls, data: bytes) -> "UpperLayerConnInfo":
        if len(data) < cls._FMT.size:
            raise TruncatedError("upper layer info too short")
        sport, dport, state, seq, ack, olen = cls._FMT.unpack_from(data)
        if olen > MAX_OPAQUE:
            raise MalformedError("opaque state over cap")
        if len(data) != cls._FMT.size + olen:
            raise LengthMismatchError("opaque length disagrees with component length")
        try:
            state = TcpState(state)
        except ValueError:
            raise MalformedError(f"unknown tcp state {state}") from None
        return cls(sport, dport, state, seq, ack, bytes(data[cls._FMT.size:]))


@dataclass(frozen=True)
class OwnerInfo:
    proprietor: int
    organizer: int = NO_UNIT

    CODE = Code.OWNER_INFO_COMP
    _FMT = struct.Struct(">BB")

    def to_bytes(self) -> bytes:
        for name in ("proprietor", "organizer"):
            if not 0 <= getattr(self, name) <= 0xFF:
                raise EncodeError(name, "unit id must fit 8 bits")
        return self._FMT.pack(self.proprietor, self.organizer)

    @classmethod
    def from_bytes(cls, data: bytes) -> "OwnerInfo":
        if len(data) != cls._FMT.size:
            raise LengthMismatchError("owner info must be 2 bytes")
        return cls(*cls._FMT.unpack(data))


@dataclass(frozen=True)
class ProbeInfo:
    probe_id: int
    sent_at: int

    CODE = Code.PROBE_INFO_COMP
    _FMT = struct.Struct(">IQ")

    def to_bytes(self) -> bytes:
        if not 0 <= self.probe_id <= 0xFFFFFFFF or not 0 <= self.sent_at < 1 << 64:
            raise EncodeError("probe", "id/timestamp out of range")
        return self._FMT.pack(self.probe_id, self.sent_at)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProbeInfo":
        if len(data) != cls._FMT.size:
            raise LengthMismatchError("probe info must be 12 bytes")
        return cls(*cls._FMT.unpack(data))


Component = Union[SelectionInfo, RadioInfo, IpLayerConnInfo, UpperLayerConnInfo, OwnerInfo, ProbeInfo]
COMPONENTS: Dict[int, Type] = {c.CODE: c for c in
                               (SelectionInfo, RadioInfo, IpLayerConnInfo, UpperLayerConnInfo, OwnerInfo, ProbeInfo)}


# --------------------------------------------------------------------------
# messages
#
# Each message lists its components as (attribute, class, required).


@dataclass(frozen=True)
class Keepalive:
    selection: SelectionInfo
    radio: RadioInfo
    CODE = Code.CLUSTER_KEEPALIVE
    FIELDS = (("selection", SelectionInfo, True), ("radio", RadioInfo, True))


@dataclass(frozen=True)
class ElectionRequest:
    selection: SelectionInfo
    CODE = Code.ELECTION_REQUEST
    FIELDS = (("selection", SelectionInfo, True),)


@dataclass(frozen=True)
class ElectionResponse:
    selection: SelectionInfo
    CODE = Code.ELECTION_RESPONSE
    FIELDS = (("selection", SelectionInfo, True),)


@dataclass(frozen=True)
class ForceSecondary:
    selection: SelectionInfo
    CODE = Code.FORCE_SECONDARY
    FIELDS = (("selection", SelectionInfo, True),)


@dataclass(frozen=True)
class ForcedLeave:
    selection: SelectionInfo
    CODE = Code.FORCED_LEAVE
    FIELDS = (("selection", SelectionInfo, True),)


@dataclass(frozen=True)
class Replication:
    ip: IpLayerConnInfo
    upper: Optional[UpperLayerConnInfo] = None
    CODE = Code.CLUSTER_REPLICATION
    FIELDS = (("ip", IpLayerConnInfo, True), ("upper", UpperLayerConnInfo, False))


@dataclass(frozen=True)
class OwnerQuery:
    ip: IpLayerConnInfo
    upper: Optional[UpperLayerConnInfo] = None
    CODE = Code.OWNER_QUERY
    FIELDS = (("ip", IpLayerConnInfo, True), ("upper", UpperLayerConnInfo, False))


@dataclass(frozen=True)
class OwnerReply:
    ip: IpLayerConnInfo
    owner: OwnerInfo
    upper: Optional[UpperLayerConnInfo] = None
    CODE = Code.OWNER_REPLY
    FIELDS = (("ip", IpLayerConnInfo, True), ("owner", OwnerInfo, True), ("upper", UpperLayerConnInfo, False))


@dataclass(frozen=True)
class StateUpdate:
    ip: IpLayerConnInfo
    owner: OwnerInfo
    upper: Optional[UpperLayerConnInfo] = None
    CODE = Code.STATE_UPDATE
    FIELDS = (("ip", IpLayerConnInfo, True), ("owner", OwnerInfo, True), ("upper", UpperLayerConnInfo, False))


@dataclass(frozen=True)
class CclPing:
    probe: ProbeInfo
    CODE = Code.CCL_PING
    FIELDS = (("probe", ProbeInfo, True),)


@dataclass(frozen=True)
class CclPong:
    probe: ProbeInfo
    CODE = Code.CCL_PONG
    FIELDS = (("probe", ProbeInfo, True),)


ClusterMessage = Union[Keepalive, ElectionRequest, ElectionResponse, ForceSecondary, ForcedLeave,
                       Replication, OwnerQuery, OwnerReply, StateUpdate, CclPing, CclPong]
MESSAGES: Dict[int, Type] = {m.CODE: m for m in (Keepalive, ElectionRequest, ElectionResponse, ForceSecondary,
                                                 ForcedLeave, Replication, OwnerQuery, OwnerReply, StateUpdate,
                                                 CclPing, CclPong)}


@dataclass
class DecodeStats:
    unknown_components: int = 0


def _tlv(comp: Component) -> bytes:
    value = comp.to_bytes()
    return TLV.pack(int(comp.CODE), len(value)) + value


def encode(msg: ClusterMessage) -> bytes:
    """Serialize ``msg``; the header length is always recomputed."""
    if type(msg) not in MESSAGES.values():
        raise EncodeError("msg_type", f"not a cluster message: {type(msg).__name__}")
    parts: List[bytes] = []
    for attr, cls, required in msg.FIELDS:
        comp = getattr(msg, attr)
        if comp is None:
            if required:
                raise EncodeError(attr, "required component missing")
            continue
        if not isinstance(comp, cls):
            raise EncodeError(attr, f"expected {cls.__name__}")
        parts.append(_tlv(comp))
    body = b"".join(parts)
    if len(body) > 0xFFFF:
        raise EncodeError("length", "body exceeds 65535 bytes")
    return HEADER.pack(int(msg.CODE), VERSION, len(body)) + body


def decode(data: bytes, stats: Optional[DecodeStats] = None) -> ClusterMessage:
    """Parse and validate one message.

    Raises a :class:`DecodeError` subclass on any malformed input; never reads
    past the header's declared length.
    """
    data = bytes(data)
    if len(data) < HEADER.size:
        raise TruncatedError(f"need {HEADER.size} header bytes, got {len(data)}")
    msg_type, version, length = HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    body_len = len(data) - HEADER.size
    if body_len < length:
        raise TruncatedError(f"header declares {length} body bytes, buffer has {body_len}")
    if body_len > length:
        raise LengthMismatchError(f"header declares {length} body bytes, buffer has {body_len}")
    cls = MESSAGES.get(msg_type)
    if cls is None:
        raise UnknownMessageError(f"unknown message type {msg_type}")

    found: Dict[int, Component] = {}
    pos, end = HEADER.size, HEADER.size + length
    while pos < end:
        if end - pos < TLV.size:
            raise TruncatedError("partial component header")
        ctype, clen = TLV.unpack_from(data, pos)
        pos += TLV.size
        if clen > end - pos:
            raise TruncatedError(f"component {ctype} overruns message")
        value = data[pos:pos + clen]
        pos += clen
        comp_cls = COMPONENTS.get(ctype)
        if comp_cls is None:
            if stats is not None:
                stats.unknown_components += 1
            continue
        if ctype in found:
            raise MalformedError(f"duplicate component {ctype}")
        found[ctype] = comp_cls.from_bytes(value)

    kwargs = {}
    for attr, comp_cls, required in cls.FIELDS:
        comp = found.get(comp_cls.CODE)
        if comp is None and required:
            raise MalformedError(f"{cls.__name__} missing {comp_cls.__name__}")
        kwargs[attr] = comp
    return cls(**kwargs)


def hexdump(data: bytes) -> str:
    return data.hex()
