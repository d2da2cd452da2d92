"""Metrics log and its CSV files.

Each CSV starts with a ``# schema_version=N`` line, then the header row.
Floats are written with ``repr`` so they read back bit-for-bit.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

SCHEMA_VERSION = 1

METRICS_COLUMNS = ("time_us", "kind", "unit", "detail", "offered_mbps", "delivered_mbps", "phy_mbps",
                   "duty_cycle", "mac_efficiency", "mac_mbps", "goodput_mbps", "rtt_us")
MEMBERSHIP_COLUMNS = ("time_us", "unit", "old_state", "new_state", "reason")
FLOW_COLUMNS = ("time_us", "flow_id", "event", "proprietor", "organizer")

SCHEMAS: Dict[str, Sequence[str]] = {
    "metrics.csv": METRICS_COLUMNS,
    "membership.csv": MEMBERSHIP_COLUMNS,
    "flows.csv": FLOW_COLUMNS,
}

METRIC_KINDS = ("event", "throughput", "rtt", "degraded-ccl", "removal", "main-ip", "rejoin-attempt",
                "ccl-failure", "drop")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class MetricsLog:
    metrics: List[tuple] = field(default_factory=list)
    membership: List[tuple] = field(default_factory=list)
    flows: List[tuple] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def metric(self, time_us: int, kind: str, unit="", detail: str = "", **values) -> None:
        if kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {kind!r}")
        row = [time_us, kind, unit, detail] + [values.pop(col, None) for col in METRICS_COLUMNS[4:]]
        if values:
            raise TypeError(f"unexpected metric fields {sorted(values)}")
        self.metrics.append(tuple(row))

    def transition(self, time_us: int, unit, old: str, new: str, reason: str) -> None:
        self.membership.append((time_us, unit, old, new, reason))

    def flow(self, time_us: int, flow_id: str, event: str, proprietor, organizer) -> None:
        self.flows.append((time_us, flow_id, event, proprietor, organizer))

    def of_kind(self, kind: str) -> List[tuple]:
        return [r for r in self.metrics if r[1] == kind]

    def render(self, name: str) -> str:
        rows = {"metrics.csv": self.metrics, "membership.csv": self.membership, "flows.csv": self.flows}[name]
        buf = io.StringIO()
        buf.write(f"# schema_version={self.schema_version}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SCHEMAS[name])
        for row in rows:
            writer.writerow([_cell(v) for v in row])
        return buf.getvalue()

    def write(self, out_dir: str) -> List[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name in SCHEMAS:
            path = os.path.join(out_dir, name)
            with open(path, "w", newline="") as fh:
                fh.write(self.render(name))
            paths.append(path)
        return paths


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema_version="):
            raise ValueError(f"{path}: missing schema version line")
        return list(csv.DictReader(fh))


def schema_text() -> str:
    lines = [f"schema_version={SCHEMA_VERSION}"]
    for name, cols in SCHEMAS.items():
        lines.append(f"{name}: {','.join(cols)}")
    lines.append(f"metrics.csv kinds: {','.join(METRIC_KINDS)}")
    lines.append("removal reasons: keepalive-miss,iface-9s,iface-500ms,all-ifaces,mode-mismatch,forced-leave")
    lines.append("flow events: created,state-update,owner-moved,lost")
    return "\n".join(lines) + "\n"


def load_summary(path: str) -> Optional[Dict[str, str]]:
    if not os.path.exists(path):
        return None
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.rstrip("\n").split("=", 1)
                out[k.strip()] = v.strip()
    return out
