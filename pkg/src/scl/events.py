"""Timestamped interaction events and their JSONL encoding.

One event per line::

    {"t": 1.0, "sector": "perc", "level": 0, "kind": "event", "magnitude": 0.8, "attrs": {}}

Snapshot lines (``"kind": "snapshot"``) may be interleaved; readers skip them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

from .core import SectorRegistry
from .errors import EmptyLog, IoError, ParseError, ValidationError


@dataclass(frozen=True)
class Event:
    t: float
    sector: str
    level: int
    kind: str = "event"
    magnitude: float = 0.0
    attrs: Mapping[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"t": self.t, "sector": self.sector, "level": self.level, "kind": self.kind,
                "magnitude": self.magnitude, "attrs": dict(self.attrs)}

    @classmethod
    def from_dict(cls, doc: Mapping, where: str = "event") -> "Event":
        for key in ("t", "sector", "level", "magnitude"):
            if key not in doc:
                raise ParseError(f"{where}: missing required field {key!r}")
        try:
            t = float(doc["t"])
            mag = float(doc["magnitude"])
            level = int(doc["level"])
        except (TypeError, ValueError):
            raise ParseError(f"{where}: fields 't', 'level', 'magnitude' must be numeric") from None
        if not (math.isfinite(t) and math.isfinite(mag)):
            raise ParseError(f"{where}: non-finite time or magnitude")
        attrs = doc.get("attrs") or {}
        if not isinstance(attrs, Mapping):
            raise ParseError(f"{where}: field 'attrs' must be an object")
        return cls(t, str(doc["sector"]), level, str(doc.get("kind", "event")), mag, dict(attrs))


class EventLog(tuple):
    """Time-ordered sequence of :class:`Event` (non-decreasing ``t``)."""

    def __new__(cls, events: Iterable[Event] = ()):
        events = tuple(events)
        for a, b in zip(events, events[1:]):
            if b.t < a.t:
                raise ValidationError(f"event log is not time-ordered ({b.t} after {a.t})")
        return super().__new__(cls, events)

    @classmethod
    def sorted(cls, events: Iterable[Event]) -> "EventLog":
        return cls(sorted(events, key=lambda e: e.t))

    def sectors(self) -> list[str]:
        seen = {}
        for e in self:
            seen.setdefault(e.sector, None)
        return list(seen)

    def check_registry(self, registry: SectorRegistry) -> None:
        for e in self:
            if e.sector not in registry.labels:
                raise ValidationError(f"event at t={e.t} names unknown sector {e.sector!r}")
            if e.level < 0:
                raise ValidationError(f"event at t={e.t} has negative level")

    def require_nonempty(self) -> None:
        if not self:
            raise EmptyLog("event log is empty")


def write_jsonl(lines: Iterable[Mapping], path) -> int:
    count = 0
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for doc in lines:
                fh.write(json.dumps(doc) + "\n")
                count += 1
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from None
    return count


def iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc.msg}") from None


def read_log(path) -> EventLog:
    """Read events from a JSONL file, skipping snapshot lines."""
    events = []
    for lineno, doc in iter_jsonl(path):
        if not isinstance(doc, dict):
            raise ParseError(f"{path}: line {lineno}: expected a JSON object")
        if doc.get("kind") == "snapshot":
            continue
        events.append(Event.from_dict(doc, f"{path}: line {lineno}"))
    return EventLog.sorted(events)
