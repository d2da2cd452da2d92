"""Primary / primary-2 selection.

Ranking: lower priority number wins, then the bytewise-smaller name, then the
bytewise-smaller serial. The per-unit :class:`Elector` is a plain state
machine; it returns the messages to send and leaves transport and timers to
the caller.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple

from .sim_engine import SECOND
from .wire import (ElectionRequest, ElectionResponse, ForceSecondary, Mode, RadioType, SelectionInfo,
                   WireRole)

ELECTION_GROUP = "224.1.0.10"
FORCE_SECONDARY_GROUP = "224.1.0.11"
RESPONSE_TIMEOUT = 3 * SECOND
RESPONSE_RETRIES = 2


class ConfigurationError(ValueError):
    pass


class DuplicateIdentityError(ConfigurationError):
    pass


class Role(Enum):
    PRIMARY = "primary"
    PRIMARY_2 = "primary-2"
    SECONDARY = "secondary"
    UNJOINED = "unjoined"
    DISABLED = "disabled"

    @property
    def is_member(self) -> bool:
        return self in (Role.PRIMARY, Role.PRIMARY_2, Role.SECONDARY)


@dataclass
class UnitConfig:
    name: str
    serial: str
    priority: int
    mode: Mode = Mode.SPANNED_ETHERCHANNEL
    radio_type: RadioType = RadioType.ACCESS_POINT
    mgmt_ip_pool: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not isinstance(self.priority, int) or not 1 <= self.priority <= 100:
            raise ConfigurationError(f"priority must be 1-100, got {self.priority!r}")
        if len(self.name) > 32:
            raise ConfigurationError("name longer than 32 characters")
        if len(self.serial) > 16:
            raise ConfigurationError("serial longer than 16 characters")
        for ip in self.mgmt_ip_pool:
            ipaddress.IPv4Address(ip)

    def selection_info(self, role: WireRole = WireRole.SECONDARY) -> SelectionInfo:
        return SelectionInfo(self.priority, self.serial, role, self.name)


def rank_key(info: SelectionInfo) -> Tuple[int, bytes, bytes]:
    return info.priority, info.name.encode("utf-8"), info.serial.encode("ascii")


def outranks(a: SelectionInfo, b: SelectionInfo) -> bool:
    """True when ``a`` would win an election against ``b``."""
    ka, kb = rank_key(a), rank_key(b)
    if ka == kb:
        raise DuplicateIdentityError(f"identical identity {a.name!r}/{a.serial!r}")
    return ka < kb


def compare_units(a: SelectionInfo, b: SelectionInfo) -> SelectionInfo:
    return a if outranks(a, b) else b


def ranked(members: Iterable[SelectionInfo]) -> List[SelectionInfo]:
    members = list(members)
    keys = [rank_key(m) for m in members]
    if len(set(keys)) != len(keys):
        raise DuplicateIdentityError("duplicate identity among members")
    return [m for _, m in sorted(zip(keys, members), key=lambda pair: pair[0])]


def recompute_primary2(members: Iterable[SelectionInfo]) -> Optional[SelectionInfo]:
    order = ranked(members)
    return order[1] if len(order) >= 2 else None


def successor(survivors: Iterable[SelectionInfo]) -> Optional[SelectionInfo]:
    """Rank-1 survivor after the primary is lost, or None if the cluster dissolves."""
    order = ranked(survivors)
    return order[0] if order else None


@dataclass(frozen=True)
class Send:
    dest: object  # unit id or multicast group
    msg: object


class Elector:
    """Election side of one unit.

    ``role`` tracks primary / secondary membership; whether a secondary is
    also primary-2 is decided by the caller from its member view.
    """

    def __init__(self, uid: int, config: UnitConfig):
        self.uid = uid
        self.config = config
        self.role = Role.UNJOINED
        self.primary: Optional[int] = None
        self.joining = False
        self.attempts = 0
        self.forced = 0

    @property
    def info(self) -> SelectionInfo:
        return self.config.selection_info(WireRole.PRIMARY if self.role is Role.PRIMARY else WireRole.SECONDARY)

    def on_join(self) -> List[Send]:
        self.role = Role.UNJOINED
        self.primary = None
        self.joining = True
        self.attempts = 1
        return [Send(ELECTION_GROUP, ElectionRequest(self.info))]

    def on_response_timeout(self) -> List[Send]:
        if not self.joining:
            return []
        if self.attempts <= RESPONSE_RETRIES:
            self.attempts += 1
            return [Send(ELECTION_GROUP, ElectionRequest(self.info))]
        return self._become_primary()

    def on_election_request(self, src: int, req: ElectionRequest) -> Optional[Send]:
        if self.role is not Role.PRIMARY or src == self.uid:
            return None
        return Send(src, ElectionResponse(self.info))

    def on_election_response(self, src: int, resp: ElectionResponse) -> List[Send]:
        if not self.joining:
            return []
        if outranks(self.config.selection_info(), resp.selection):
            return self._become_primary()
        self._become_secondary(src)
        return []

    def on_force_secondary(self, src: int, msg: ForceSecondary) -> List[Send]:
        if src == self.uid or self.role is Role.DISABLED:
            return []
        mine = self.config.selection_info()
        if self.role is Role.PRIMARY or self.joining:
            if outranks(mine, msg.selection):
                # a lower-ranked claimant; reassert
                return self._become_primary()
            self._become_secondary(src)
            return []
        if self.role.is_member:
            self._become_secondary(src)
        return []

    def on_primary_loss(self, survivors: Sequence[SelectionInfo]) -> List[Send]:
        """Called once the primary is declared failed; ``survivors`` excludes it."""
        mine = self.config.selection_info()
        others = [s for s in survivors if rank_key(s) != rank_key(mine)]
        best = successor(others + [mine])
        if best is not None and rank_key(best) == rank_key(mine):
            return self._become_primary()
        self.primary = None
        return []

    def leave(self, role: Role = Role.UNJOINED) -> None:
        self.role = role
        self.joining = False
        self.primary = None

    def _become_primary(self) -> List[Send]:
        self.joining = False
        self.role = Role.PRIMARY
        self.primary = self.uid
        self.forced += 1
        return [Send(FORCE_SECONDARY_GROUP, ForceSecondary(self.info))]

    def _become_secondary(self, primary: int) -> None:
        self.joining = False
        if self.role is not Role.PRIMARY_2:
            self.role = Role.SECONDARY
        self.primary = primary
