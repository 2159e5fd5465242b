"""Run traces: ordered event records plus the resolved scenario.

Serialized as JSON Lines.  The first line is a header object carrying the
schema version and the fully resolved scenario (post-defaulting), so a
trace file is self-describing; every following line is one record with the
fixed keys ``t`` (real time, ns), ``seq`` (global order tiebreak),
``kind``, ``node`` (-1 for system-scope records), and the kind-specific
payload flattened alongside.

Record kinds:

  epoch      coherence start: phase anchors and measurement window
  inject     a message put on the wire by a Byzantine node
  fire       a correct node invoked a pulse and broadcast its counter
  deliver    a message arrived at a correct node
  assess     a stored message's timeliness verdict was finalized
  prune      pool maintenance changed the pools (full detail only)
  threshold  the node's firing threshold level changed (full detail only)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, NamedTuple

SCHEMA = "pulse-trace/1"

KINDS = ("epoch", "inject", "fire", "deliver", "assess", "prune", "threshold")

# trace_detail gates: minimum detail level at which each kind is recorded
DETAIL_FIRES = 0
DETAIL_DELIVERIES = 1
DETAIL_FULL = 2

KIND_MIN_DETAIL = {
    "epoch": DETAIL_FIRES,
    "inject": DETAIL_FIRES,
    "fire": DETAIL_FIRES,
    "deliver": DETAIL_DELIVERIES,
    "assess": DETAIL_DELIVERIES,
    "prune": DETAIL_FULL,
    "threshold": DETAIL_FULL,
}

DETAIL_NAMES = {"fires": 0, "fires+deliveries": 1, "full": 2}


class TraceRecord(NamedTuple):
    t: int
    seq: int
    kind: str
    node: int
    payload: dict


@dataclass
class Trace:
    scenario: dict
    records: list[TraceRecord]

    def iter_kind(self, kind: str) -> Iterable[TraceRecord]:
        return (r for r in self.records if r.kind == kind)

    def dumps(self) -> str:
        lines = [json.dumps({"schema": SCHEMA, "scenario": self.scenario},
                            sort_keys=True, separators=(",", ":"))]
        for r in self.records:
            obj = {"t": r.t, "seq": r.seq, "kind": r.kind, "node": r.node}
            obj.update(r.payload)
            lines.append(json.dumps(obj, sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())


def loads(text: str) -> Trace:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty trace")
    header = json.loads(lines[0])
    if header.get("schema") != SCHEMA:
        raise ValueError(f"unsupported trace schema {header.get('schema')!r}")
    records = []
    for line in lines[1:]:
        if not line.strip():
            continue
        obj = json.loads(line)
        payload = {k: v for k, v in obj.items()
                   if k not in ("t", "seq", "kind", "node")}
        records.append(TraceRecord(obj["t"], obj["seq"], obj["kind"],
                                   obj["node"], payload))
    records.sort(key=lambda r: (r.t, r.seq))
    return Trace(scenario=header["scenario"], records=records)


def load(path) -> Trace:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
