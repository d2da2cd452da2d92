"""Deterministic discrete-event core.

Time is an integer count of microseconds. Events pop in ``(fire_at, seq)``
order, so two events scheduled for the same instant run in the order they
were scheduled. All randomness flows from one seeded ``random.Random``.
"""

from __future__ import annotations

import heapq
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Optional, Set, Tuple, Union

logger = logging.getLogger(__name__)

US = 1
MS = 1_000
SECOND = 1_000_000
MINUTE = 60 * SECOND

_DURATION_RE = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*(us|ms|s|min|h)?\s*$")
_UNIT_SCALE = {"us": US, "ms": MS, "s": SECOND, "min": MINUTE, "h": 60 * MINUTE, None: SECOND}


def seconds(value: float) -> int:
    """Convert seconds to integer microseconds (round half to even)."""
    return int(round(value * SECOND))


def parse_duration(text: str) -> int:
    """Parse ``"9s"``, ``"500ms"``, ``"5min"``, ``"250us"`` or a bare number of seconds."""
    m = _DURATION_RE.match(text)
    if not m:
        raise ValueError(f"bad duration {text!r}")
    number, unit = m.groups()
    if number.startswith("-"):
        raise ValueError(f"negative duration {text!r}")
    scale = _UNIT_SCALE[unit]
    if "." in number:
        # go through decimal strings so "0.5" -> 500000 exactly
        whole, frac = number.split(".")
        return int(whole or 0) * scale + int(frac) * scale // (10 ** len(frac))
    return int(number) * scale


def format_time(t: int) -> str:
    return f"{t / SECOND:.6f}s"


class SimulationError(RuntimeError):
    """A programming error inside the simulation (e.g. scheduling in the past)."""


class EventKind(Enum):
    DELIVER = "deliver-message"
    TIMER = "timer-expiry"
    INJECT = "scenario-injection"


@dataclass(eq=False)
class Event:
    fire_at: int
    seq: int
    kind: EventKind
    callback: Callable[..., Any]
    payload: Any = None
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass(frozen=True)
class ChannelSpec:
    """Per-hop latency model: fixed base latency plus uniform jitter, and a loss rate."""

    base_latency: int = 1 * MS
    jitter: int = 0
    loss_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError(f"loss_rate must be in [0, 1], got {self.loss_rate}")
        if self.base_latency < 0 or self.jitter < 0:
            raise ValueError("latency and jitter must be non-negative")

    def draw_delay(self, rng: random.Random) -> int:
        if not self.jitter:
            return self.base_latency
        offset = rng.randint(-self.jitter, self.jitter)
        return max(0, self.base_latency + offset)

    def merge(self, other: "ChannelSpec") -> "ChannelSpec":
        """Path through two attachments: the worse of each parameter."""
        return ChannelSpec(
            max(self.base_latency, other.base_latency),
            max(self.jitter, other.jitter),
            max(self.loss_rate, other.loss_rate),
        )


class Simulator:
    """Virtual clock plus a binary-heap event queue."""

    def __init__(self, seed: int = 0, record_trace: bool = False):
        self.now = 0
        self.seed = seed
        self.rng = random.Random(seed)
        self._queue: List[Tuple[int, int, Event]] = []
        self._seq = 0
        self.processed = 0
        self.trace: Optional[List[Tuple[int, int, str]]] = [] if record_trace else None

    def schedule(
        self,
        fire_at: int,
        callback: Callable[..., Any],
        payload: Any = None,
        kind: EventKind = EventKind.TIMER,
    ) -> Event:
        if fire_at < self.now:
            raise SimulationError(
                f"cannot schedule {kind.value} at {format_time(fire_at)}: clock is {format_time(self.now)}"
            )
        event = Event(fire_at, self._seq, kind, callback, payload)
        self._seq += 1
        heapq.heappush(self._queue, (fire_at, event.seq, event))
        return event

    def call_later(self, delay: int, callback: Callable[..., Any], payload: Any = None,
                   kind: EventKind = EventKind.TIMER) -> Event:
        return self.schedule(self.now + delay, callback, payload, kind)

    @property
    def pending(self) -> int:
        return sum(1 for _, _, e in self._queue if not e.cancelled)

    def peek_time(self) -> Optional[int]:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        while self._queue:
            fire_at, seq, event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self.now = fire_at
            self.processed += 1
            if self.trace is not None:
                self.trace.append((fire_at, seq, event.kind.value))
            if event.payload is None:
                event.callback()
            else:
                event.callback(event.payload)
            return True
        return False

    def run(self, until: Optional[int] = None) -> int:
        """Process events with ``fire_at <= until`` (or until the queue drains).

        Returns the number of events processed by this call.
        """
        start = self.processed
        while True:
            nxt = self.peek_time()
            if nxt is None or (until is not None and nxt > until):
                break
            self.step()
        return self.processed - start


Address = Union[int, str]
Handler = Callable[[int, bytes], None]


@dataclass
class ChannelStats:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    in_flight: int = 0

    def conserved(self) -> bool:
        return self.sent == self.delivered + self.dropped + self.in_flight


@dataclass
class _Endpoint:
    handler: Handler
    spec: ChannelSpec
    live: bool = True


class Network:
    """Simulated CCL fabric: unicast by unit id, multicast by group address.

    Every unit attaches with its own ``ChannelSpec``; a message between two
    units uses the worse of the two attachments unless an explicit spec is
    given to :meth:`send`.
    """

    def __init__(self, sim: Simulator, name: str = "ccl"):
        self.sim = sim
        self.name = name
        self._endpoints: Dict[int, _Endpoint] = {}
        self._groups: Dict[str, Set[int]] = {}
        self.stats = ChannelStats()
        self.unknown_destination = 0
        self.by_type: Counter = Counter()
        self.bytes_sent = 0
        # (time, src, dest, tag) per send call, kept only when the simulator records a trace
        self.send_log: Optional[List[Tuple[int, int, Address, str]]] = [] if sim.trace is not None else None

    def attach(self, uid: int, handler: Handler, spec: ChannelSpec) -> None:
        self._endpoints[uid] = _Endpoint(handler, spec)

    def set_spec(self, uid: int, spec: ChannelSpec) -> None:
        self._endpoints[uid].spec = spec

    def spec_of(self, uid: int) -> ChannelSpec:
        return self._endpoints[uid].spec

    def set_live(self, uid: int, live: bool) -> None:
        self._endpoints[uid].live = live

    def subscribe(self, uid: int, group: str) -> None:
        self._groups.setdefault(group, set()).add(uid)

    def unsubscribe(self, uid: int, group: str) -> None:
        self._groups.get(group, set()).discard(uid)

    def subscribers(self, group: str) -> Set[int]:
        return set(self._groups.get(group, ()))

    def path_spec(self, src: int, dst: int) -> ChannelSpec:
        return self._endpoints[src].spec.merge(self._endpoints[dst].spec)

    def send(self, src: int, dest: Address, payload: bytes, channel: Optional[ChannelSpec] = None,
             tag: str = "") -> int:
        """Queue delivery of ``payload``; returns the number of copies sent."""
        sender = self._endpoints.get(src)
        if sender is None or not sender.live:
            raise SimulationError(f"unit {src} is not a live endpoint")
        if isinstance(dest, str):
            targets = sorted(self._groups.get(dest, ()))
            targets = [t for t in targets if t != src]
        elif dest in self._endpoints:
            targets = [dest]
        else:
            self.unknown_destination += 1
            self.stats.sent += 1
            self.stats.dropped += 1
            return 1
        if self.send_log is not None:
            self.send_log.append((self.sim.now, src, dest, tag))
        if tag:
            self.by_type[tag] += len(targets)
        for dst in targets:
            spec = channel if channel is not None else self.path_spec(src, dst)
            self.stats.sent += 1
            self.bytes_sent += len(payload)
            if spec.loss_rate and self.sim.rng.random() < spec.loss_rate:
                self.stats.dropped += 1
                continue
            delay = spec.draw_delay(self.sim.rng)
            self.stats.in_flight += 1
            self.sim.call_later(delay, self._deliver, (src, dst, payload), kind=EventKind.DELIVER)
        return len(targets)

    def _deliver(self, item: Tuple[int, int, bytes]) -> None:
        src, dst, payload = item
        self.stats.in_flight -= 1
        endpoint = self._endpoints.get(dst)
        if endpoint is None or not endpoint.live:
            self.stats.dropped += 1
            return
        self.stats.delivered += 1
        endpoint.handler(src, payload)


def inject_all(sim: Simulator, events: Iterable[Tuple[int, Callable[[], Any]]]) -> None:
    """Schedule a batch of ``(time, callback)`` injections."""
    for t, cb in events:
        sim.schedule(t, cb, kind=EventKind.INJECT)
