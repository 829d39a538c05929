"""
Simulation trace: the ordered event log of one run.

Each event renders to one line ``step|entity|Event|key=value|...`` with a
stable field order, so two runs can be compared byte for byte. Events are
ordered by (step, entity, event kind, emission sequence); entities sort
vehicles first (by station id), then obstacles, then pedestrians.
"""

import csv
import io
import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

from ..core.utils import MalformedTrace
from .perception import EntityRef

logger = logging.getLogger(__name__)

TRACE_HEADER = "# iav-coop-sim trace"


class EventKind(IntEnum):
    MOVED = 0
    SENT = 1
    DELIVERED = 2
    PHASE_CHANGED = 3
    COLLISION_DETECTED = 4
    GOAL_REACHED = 5
    OBSTACLE_INJECTED = 6
    OBSTACLE_REMOVED = 7
    CYCLE_COMPLETED = 8
    MISSION_DONE = 9


EVENT_NAMES: Dict[EventKind, str] = {
    EventKind.MOVED: "Moved",
    EventKind.SENT: "Sent",
    EventKind.DELIVERED: "Delivered",
    EventKind.PHASE_CHANGED: "PhaseChanged",
    EventKind.COLLISION_DETECTED: "CollisionDetected",
    EventKind.GOAL_REACHED: "GoalReached",
    EventKind.OBSTACLE_INJECTED: "ObstacleInjected",
    EventKind.OBSTACLE_REMOVED: "ObstacleRemoved",
    EventKind.CYCLE_COMPLETED: "CycleCompleted",
    EventKind.MISSION_DONE: "MissionDone",
}
EVENT_KINDS = {name: kind for kind, name in EVENT_NAMES.items()}


def render_value(value: Any) -> str:
    """Canonical text of a field value (floats in shortest round-trip form)."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value + 0.0)
    return str(value)


@dataclass(frozen=True)
class TraceEvent:
    step: int
    entity: EntityRef
    kind: EventKind
    fields: Tuple[Tuple[str, str], ...] = ()
    seq: int = 0

    @classmethod
    def make(cls, step: int, entity: EntityRef, event_kind: EventKind, seq: int = 0,
             **fields: Any) -> 'TraceEvent':
        return cls(step, entity, event_kind, tuple((k, render_value(v)) for k, v in fields.items()), seq)

    @property
    def sort_key(self) -> Tuple[int, int, int, int, int]:
        # Plain ints: same order as (step, entity, kind, seq).
        return (self.step, int(self.entity.kind), self.entity.index, int(self.kind), self.seq)

    @property
    def name(self) -> str:
        return EVENT_NAMES[self.kind]

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.fields:
            if k == key:
                return v
        return default

    def number(self, key: str) -> float:
        value = self.get(key)
        if value is None:
            raise MalformedTrace(f"{self.name} event at step {self.step} has no field '{key}'")
        try:
            return float(value)
        except ValueError:
            raise MalformedTrace(f"{self.name} field '{key}' is not a number: {value!r}")

    def render(self) -> str:
        parts = [str(self.step), self.entity.name, self.name]
        parts.extend(f"{k}={v}" for k, v in self.fields)
        return "|".join(parts)


def sort_events(events: Iterable[TraceEvent]) -> List[TraceEvent]:
    return sorted(events, key=lambda e: e.sort_key)


def parse_event(line: str, line_number: int = 0) -> TraceEvent:
    """
    Parse one trace record.

    Raises:
        MalformedTrace: If the record does not follow the trace format
    """
    parts = line.rstrip("\n").split("|")
    if len(parts) < 3:
        raise MalformedTrace(f"expected step|entity|event, got {line!r}", line_number)
    step_text, entity_text, event_text = parts[:3]
    try:
        step = int(step_text)
    except ValueError:
        raise MalformedTrace(f"step is not an integer: {step_text!r}", line_number)
    if step < 0:
        raise MalformedTrace(f"negative step {step}", line_number)
    try:
        entity = EntityRef.parse(entity_text)
    except ValueError as e:
        raise MalformedTrace(str(e), line_number)
    kind = EVENT_KINDS.get(event_text)
    if kind is None:
        raise MalformedTrace(f"unknown event {event_text!r}", line_number)
    fields: List[Tuple[str, str]] = []
    for item in parts[3:]:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise MalformedTrace(f"field is not key=value: {item!r}", line_number)
        fields.append((key, value))
    return TraceEvent(step, entity, kind, tuple(fields))


def read_trace(text: str) -> Tuple[List[TraceEvent], Dict[str, str]]:
    """
    Parse a trace file.

    Comment lines starting with '#' may carry ``key=value`` metadata (the run
    writes ``dt`` and ``seed``).

    Returns:
        (events in file order with emission sequence restored, metadata)

    Raises:
        MalformedTrace: If a record is malformed or records are out of order
    """
    events: List[TraceEvent] = []
    meta: Dict[str, str] = {}
    previous: Optional[Tuple[int, ...]] = None
    seq = 0
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                key, sep, value = token.partition("=")
                if sep:
                    meta[key] = value
            continue
        event = parse_event(line, number)
        key = event.sort_key[:4]
        if previous is not None and key < previous:
            raise MalformedTrace("records are not in (step, entity, event) order", number)
        seq = seq + 1 if key == previous else 0
        previous = key
        events.append(TraceEvent(event.step, event.entity, event.kind, event.fields, seq))
    return events, meta


def check_order(events: Sequence[TraceEvent]) -> None:
    """Raise MalformedTrace unless events are in non-decreasing (step, entity, kind) order."""
    for i in range(1, len(events)):
        a, b = events[i - 1], events[i]
        if b.sort_key[:4] < a.sort_key[:4]:
            raise MalformedTrace(f"event {i} ({b.render()!r}) is out of order")


def format_trace(events: Iterable[TraceEvent], meta: Optional[Dict[str, Any]] = None) -> str:
    header = TRACE_HEADER
    if meta:
        header += " " + " ".join(f"{k}={render_value(v)}" for k, v in meta.items())
    lines = [header]
    lines.extend(e.render() for e in events)
    return "\n".join(lines) + "\n"


def write_trace(events: Iterable[TraceEvent], stream: TextIO,
                meta: Optional[Dict[str, Any]] = None) -> None:
    stream.write(format_trace(events, meta))


def trace_to_csv(events: Iterable[TraceEvent]) -> str:
    """CSV export with columns step, entity, event, fields."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["step", "entity", "event", "fields"])
    for e in events:
        writer.writerow([e.step, e.entity.name, e.name, "|".join(f"{k}={v}" for k, v in e.fields)])
    return buffer.getvalue()


def has_collision(events: Iterable[TraceEvent]) -> bool:
    return any(e.kind is EventKind.COLLISION_DETECTED for e in events)
