"""PHY -> MAC throughput model for one backhaul link, plus an iperf-like load."""

from __future__ import annotations

import ipaddress
import random
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional

from .flow import FlowKey, Protocol


@dataclass(frozen=True)
class RadioParams:
    channel_width_mhz: int = 80
    chains: int = 2
    streams: int = 4
    tx_power_dbm: float = 30.0
    tx_antenna_gain_dbi: float = 10.0
    rx_antenna_gain_dbi: float = 10.0
    snr_db: float = 36.0
    per: float = 0.005
    evm_db: float = -17.0
    mcs_index: int = 8
    modulation: str = "256QAM"
    mtu: int = 1472
    frequency_ghz: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.per <= 1.0:
            raise ValueError("per must be in [0, 1]")


WLAN_BASELINE = RadioParams(tx_power_dbm=20.0)


def _check_fraction(name: str, value: float) -> None:
    if not 0.0 < value <= 1.0:
        raise ValueError(f"{name} must be in (0, 1], got {value}")


def mac_rate(phy: float, cycle: float, efficiency: float) -> float:
    """MAC rate = PHY rate x duty cycle x MAC efficiency."""
    if phy <= 0:
        raise ValueError(f"phy rate must be positive, got {phy}")
    _check_fraction("duty cycle", cycle)
    _check_fraction("efficiency", efficiency)
    return phy * cycle * efficiency


@dataclass(frozen=True)
class LinkRates:
    phy_tx: float
    phy_rx: float
    duty_cycle_tx: float
    duty_cycle_rx: float
    mac_efficiency_tx: float
    mac_efficiency_rx: float

    @classmethod
    def symmetric(cls, phy: float = 1000.0, cycle: float = 0.5, efficiency: float = 0.8) -> "LinkRates":
        return cls(phy, phy, cycle, cycle, efficiency, efficiency)

    def __post_init__(self):
        mac_rate(self.phy_tx, self.duty_cycle_tx, self.mac_efficiency_tx)
        mac_rate(self.phy_rx, self.duty_cycle_rx, self.mac_efficiency_rx)

    @property
    def mac_tx(self) -> float:
        return mac_rate(self.phy_tx, self.duty_cycle_tx, self.mac_efficiency_tx)

    @property
    def mac_rx(self) -> float:
        return mac_rate(self.phy_rx, self.duty_cycle_rx, self.mac_efficiency_rx)


PhyRateFn = Callable[[RadioParams], float]


def configured_phy(rate_mbps: float = 1000.0) -> PhyRateFn:
    """Default PHY hook: a fixed configured rate, whatever the radio parameters."""
    return lambda params: rate_mbps


def effective_goodput(link: LinkRates, per: float) -> float:
    if not 0.0 <= per <= 1.0:
        raise ValueError("per must be in [0, 1]")
    return link.mac_tx * (1.0 - per)


def window_limited_rate(window: int, rtt_us: int) -> float:
    """Mbps one TCP connection can sustain with ``window`` bytes in flight."""
    if rtt_us <= 0:
        raise ValueError("rtt must be positive")
    return window * 8 / rtt_us  # bits per microsecond == Mbps


@dataclass(frozen=True)
class TrafficFlow:
    key: FlowKey
    start: int
    stop: int
    rate_limit: float  # Mbps, window/RTT bound


def iperf_generator(connections: int = 50, window: int = 65536, duration: int = 0, start: int = 0,
                    rtt_us: int = 2_000, rng: Optional[random.Random] = None,
                    client_net: str = "10.1.0.0/16", server_net: str = "10.2.0.0/16") -> List[TrafficFlow]:
    """Distinct TCP connections between random client and server addresses."""
    if duration <= 0 or connections <= 0:
        return []
    rng = rng or random.Random(0)
    clients = ipaddress.IPv4Network(client_net)
    servers = ipaddress.IPv4Network(server_net)
    limit = window_limited_rate(window, rtt_us)
    seen = set()
    flows = []
    while len(flows) < connections:
        src = int(clients.network_address) + rng.randrange(1, clients.num_addresses - 1)
        dst = int(servers.network_address) + rng.randrange(1, servers.num_addresses - 1)
        sport = rng.randrange(32768, 61000)
        key = FlowKey(src, dst, sport, 5001, Protocol.TCP)
        if (src, dst) in seen:
            continue
        seen.add((src, dst))
        flows.append(TrafficFlow(key, start, start + duration, limit))
    return flows


def aggregate_throughput(goodput: Dict[int, float], active: Iterable[int],
                         offered: Optional[Dict[int, float]] = None) -> float:
    """Sum of per-unit delivered rate over ``active`` units, each capped by its offered load."""
    total = 0.0
    for uid in active:
        cap = goodput.get(uid, 0.0)
        if offered is not None:
            cap = min(cap, offered.get(uid, 0.0))
        total += cap
    return total
