"""Join/leave lifecycle: config mirroring, rejoin schedules, main cluster IP."""

from __future__ import annotations

import hashlib
import ipaddress
import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional

from .sim_engine import MINUTE, Event, Simulator


class RejoinCause(Enum):
    CCL_FAIL_AT_JOIN = "ccl-fail-at-join"
    CCL_FAIL_AFTER_JOIN = "ccl-fail-after-join"
    DATA_IFACE_FAIL = "data-iface-fail"


@dataclass(frozen=True)
class RejoinPolicy:
    cause: RejoinCause
    interval: int = 5 * MINUTE
    max_attempts: Optional[int] = None
    configurable: bool = True

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError("rejoin interval must be positive")
        if self.cause is RejoinCause.CCL_FAIL_AT_JOIN and self.max_attempts not in (0, None):
            raise ValueError("ccl-fail-at-join allows manual rejoin only")

    @property
    def automatic(self) -> bool:
        return self.cause is not RejoinCause.CCL_FAIL_AT_JOIN and self.max_attempts != 0

    @classmethod
    def default(cls, cause: RejoinCause) -> "RejoinPolicy":
        if cause is RejoinCause.CCL_FAIL_AT_JOIN:
            return cls(cause, max_attempts=0)
        if cause is RejoinCause.DATA_IFACE_FAIL:
            return cls(cause, max_attempts=4)
        return cls(cause)


@dataclass
class ClusterConfig:
    cluster_name: str = "cluster"
    ccl_interface: str = "ccl0"
    mgmt_interfaces: List[str] = field(default_factory=lambda: ["mgmt0"])
    data_interfaces: List[str] = field(default_factory=lambda: ["data0"])
    ip_pool: List[str] = field(default_factory=list)
    main_cluster_ip: str = "10.0.0.1"
    interface_roles: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.ccl_interface in self.data_interfaces or self.ccl_interface in self.mgmt_interfaces:
            raise ValueError("the cluster control link needs a dedicated interface")
        ipaddress.IPv4Address(self.main_cluster_ip)
        for ip in self.ip_pool:
            ipaddress.IPv4Address(ip)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def copy(self) -> "ClusterConfig":
        return replace(self, mgmt_interfaces=list(self.mgmt_interfaces), data_interfaces=list(self.data_interfaces),
                       ip_pool=list(self.ip_pool), interface_roles=dict(self.interface_roles))


def expand_pool(spec: str) -> List[str]:
    """``"10.0.0.10-10.0.0.13"`` or a comma list -> list of addresses."""
    out: List[str] = []
    for part in (p.strip() for p in spec.split(",")):
        if not part:
            continue
        if "-" in part:
            lo, hi = (ipaddress.IPv4Address(x.strip()) for x in part.split("-", 1))
            if hi < lo:
                raise ValueError(f"empty address range {part!r}")
            out.extend(str(ipaddress.IPv4Address(i)) for i in range(int(lo), int(hi) + 1))
        else:
            out.append(str(ipaddress.IPv4Address(part)))
    return out


class RejoinScheduler:
    """Automatic rejoin attempts for one unit after it was removed.

    ``attempt`` is invoked at each slot and returns True if the unit could
    start joining; success is reported later through :meth:`succeeded`.
    """

    def __init__(self, sim: Simulator, attempt: Callable[[int], bool],
                 policies: Optional[Dict[RejoinCause, RejoinPolicy]] = None):
        self.sim = sim
        self._attempt = attempt
        self.policies = {c: RejoinPolicy.default(c) for c in RejoinCause}
        if policies:
            self.policies.update(policies)
        self.cause: Optional[RejoinCause] = None
        self.attempts = 0
        self.attempt_times: List[int] = []
        self.exhausted = False
        self._timer: Optional[Event] = None

    @property
    def pending(self) -> bool:
        return self._timer is not None

    def on_removed(self, cause: RejoinCause) -> List[int]:
        """Arm the schedule for ``cause``; returns the planned attempt times (bounded ones only)."""
        self.cancel()
        self.cause = cause
        self.attempts = 0
        self.exhausted = False
        policy = self.policies[cause]
        if not policy.automatic:
            self.exhausted = True
            return []
        self._timer = self.sim.call_later(policy.interval, self._fire)
        if policy.max_attempts is None:
            return [self.sim.now + policy.interval]
        return [self.sim.now + k * policy.interval for k in range(1, policy.max_attempts + 1)]

    def _fire(self) -> None:
        self._timer = None
        policy = self.policies[self.cause]
        self.attempts += 1
        self.attempt_times.append(self.sim.now)
        self._attempt(self.attempts)
        if self._timer is not None or self.exhausted:
            return
        if policy.max_attempts is not None and self.attempts >= policy.max_attempts:
            self.exhausted = True
            return
        self._timer = self.sim.call_later(policy.interval, self._fire)

    def succeeded(self) -> None:
        self.cancel()
        self.cause = None

    def cancel(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None


class MainIp:
    """Owner of the main cluster IP; always the current primary."""

    def __init__(self, address: str):
        self.address = address
        self.owner: Optional[int] = None
        self.history: List[tuple] = []

    def transfer(self, old: Optional[int], new: Optional[int], at: int) -> bool:
        if new == self.owner:
            return False
        self.owner = new
        self.history.append((at, old, new))
        return True
