"""
Metrics computed from a trace.

Everything here reads only the trace, so a replayed trace file yields exactly
the report of the run that wrote it.
"""

import csv
import io
import logging
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from ..core.utils import CodecError, MalformedTrace
from .perception import EntityKind, EntityRef
from .trace import EventKind, TraceEvent, check_order
from .wire_codec import DenmMessage, DenmMessageType, MessageId, decode_hex

logger = logging.getLogger(__name__)

MESSAGE_COLUMNS = ('cam', 'denm', 'cpm', 'mcm', 'ack_mcm')
_WAIT_PHASES = ('REQUESTING', 'WAITING')


@dataclass
class VehicleMetrics:
    entity: str
    collisions: int = 0
    full_stops: int = 0
    stop_steps: int = 0
    wait_steps: int = 0
    goals_reached: int = 0
    cycles_completed: int = 0
    cam: int = 0
    denm: int = 0
    cpm: int = 0
    mcm: int = 0
    ack_mcm: int = 0
    mean_intersection_wait: float = 0.0
    distance_m: float = 0.0
    throughput_goals_per_min: Optional[float] = None

    def messages(self) -> Dict[str, int]:
        return {name: getattr(self, name) for name in MESSAGE_COLUMNS}


@dataclass
class MetricsReport:
    """Per-vehicle rows plus the fleet totals row."""

    vehicles: List[VehicleMetrics] = field(default_factory=list)
    fleet: VehicleMetrics = field(default_factory=lambda: VehicleMetrics('fleet', throughput_goals_per_min=0.0))
    steps: int = 0

    def vehicle(self, station_id: int) -> VehicleMetrics:
        name = str(station_id)
        for row in self.vehicles:
            if row.entity == name:
                return row
        raise KeyError(f"No metrics for vehicle {station_id}")

    def rows(self) -> List[VehicleMetrics]:
        return self.vehicles + [self.fleet]

    def to_dict(self) -> Dict[str, Any]:
        return {'steps': self.steps,
                'rows': [{f.name: getattr(r, f.name) for f in fields(r)} for r in self.rows()]}


class _Tracker:
    """Running per-vehicle state while scanning a trace."""

    def __init__(self, name: str):
        self.row = VehicleMetrics(name)
        self.stopped = False
        self.last_position: Optional[Tuple[float, float]] = None
        self.request_step: Optional[int] = None
        self.waits: List[int] = []


def _phase_name(label: str) -> str:
    return label.split('(', 1)[0]


def compute_metrics(trace: Sequence[TraceEvent], dt: float = 0.1) -> MetricsReport:
    """
    Aggregate a trace into a MetricsReport.

    A full stop is a maximal run of steps at speed 0 outside the REQUESTING and
    WAITING intersection phases; zero-speed steps in those phases count as
    wait steps instead. Intersection wait is measured in steps from entering
    REQUESTING to entering CROSSING.

    Args:
        trace: Events in trace order
        dt: Step duration in seconds, for throughput

    Raises:
        MalformedTrace: If events are out of order or lack required fields
    """
    check_order(trace)
    trackers: Dict[EntityRef, _Tracker] = {}
    collision_events = 0
    last_step = -1

    def tracker(ref: EntityRef) -> _Tracker:
        if ref not in trackers:
            trackers[ref] = _Tracker(ref.name)
        return trackers[ref]

    for event in trace:
        # Deliveries are stamped at their future delivery step.
        if event.kind is not EventKind.DELIVERED:
            last_step = max(last_step, event.step)
        if event.kind is EventKind.COLLISION_DETECTED:
            collision_events += 1
            other = event.get('with')
            if other is None:
                raise MalformedTrace(f"CollisionDetected at step {event.step} has no 'with' field")
            try:
                involved = [event.entity, EntityRef.parse(other)]
            except ValueError as e:
                raise MalformedTrace(str(e))
            for ref in involved:
                if ref.kind is EntityKind.VEHICLE:
                    tracker(ref).row.collisions += 1
            continue
        if event.entity.kind is not EntityKind.VEHICLE:
            continue

        t = tracker(event.entity)
        if event.kind is EventKind.MOVED:
            position = (event.number('x'), event.number('y'))
            if t.last_position is not None:
                dx = position[0] - t.last_position[0]
                dy = position[1] - t.last_position[1]
                t.row.distance_m += (dx * dx + dy * dy) ** 0.5
            t.last_position = position
            if event.number('speed') == 0.0:
                if _phase_name(event.get('phase', '')) in _WAIT_PHASES:
                    t.row.wait_steps += 1
                    t.stopped = False
                else:
                    t.row.stop_steps += 1
                    if not t.stopped:
                        t.row.full_stops += 1
                    t.stopped = True
            else:
                t.stopped = False
        elif event.kind is EventKind.PHASE_CHANGED:
            target = _phase_name(event.get('to', ''))
            if target == 'REQUESTING' and t.request_step is None:
                t.request_step = event.step
            elif target == 'CROSSING' and t.request_step is not None:
                t.waits.append(event.step - t.request_step)
                t.request_step = None
            elif target not in _WAIT_PHASES:
                t.request_step = None
        elif event.kind is EventKind.SENT:
            kind = event.get('kind')
            if kind is None or kind not in MessageId.__members__:
                raise MalformedTrace(f"Sent event at step {event.step} has unknown kind {kind!r}")
            column = kind.lower()
            setattr(t.row, column, getattr(t.row, column) + 1)
        elif event.kind is EventKind.GOAL_REACHED:
            t.row.goals_reached += 1
        elif event.kind is EventKind.CYCLE_COMPLETED:
            t.row.cycles_completed += 1

    report = MetricsReport(steps=last_step + 1)
    all_waits: List[int] = []
    for ref in sorted(trackers):
        t = trackers[ref]
        if t.waits:
            t.row.mean_intersection_wait = sum(t.waits) / len(t.waits)
        t.row.distance_m = round(t.row.distance_m, 6)
        all_waits.extend(t.waits)
        report.vehicles.append(t.row)

    fleet = report.fleet
    for row in report.vehicles:
        for name in ('full_stops', 'stop_steps', 'wait_steps', 'goals_reached',
                     'cycles_completed') + MESSAGE_COLUMNS:
            setattr(fleet, name, getattr(fleet, name) + getattr(row, name))
        fleet.distance_m += row.distance_m
    fleet.distance_m = round(fleet.distance_m, 6)
    fleet.collisions = collision_events
    if all_waits:
        fleet.mean_intersection_wait = sum(all_waits) / len(all_waits)
    minutes = report.steps * dt / 60.0
    fleet.throughput_goals_per_min = fleet.goals_reached / minutes if minutes > 0 else 0.0
    logger.debug(f"Computed metrics over {report.steps} steps for {len(report.vehicles)} vehicles")
    return report


def metrics_to_csv(report: MetricsReport) -> str:
    """CSV with a header row, one row per vehicle and a final ``fleet`` row."""
    columns = [f.name for f in fields(VehicleMetrics)]
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in report.rows():
        values = []
        for name in columns:
            value = getattr(row, name)
            if value is None:
                values.append("")
            elif isinstance(value, float):
                values.append(repr(round(value, 6) + 0.0))
            else:
                values.append(value)
        writer.writerow(values)
    return buffer.getvalue()


# --- trace checks -------------------------------------------------------------------

def sent_messages(trace: Iterable[TraceEvent], station_id: Optional[int] = None) -> List[Tuple[int, int, Any]]:
    """
    Decoded messages from Sent events, as (step, station id, message).

    Raises:
        MalformedTrace: If a Sent event carries undecodable bytes
    """
    found = []
    for event in trace:
        if event.kind is not EventKind.SENT or event.entity.kind is not EntityKind.VEHICLE:
            continue
        if station_id is not None and event.entity.index != station_id:
            continue
        try:
            message = decode_hex(event.get('bytes', ''))
        except CodecError as e:
            raise MalformedTrace(f"Sent event at step {event.step} does not decode: {e}")
        found.append((event.step, event.entity.index, message))
    return found


def denm_lifecycle_issues(trace: Sequence[TraceEvent]) -> List[str]:
    """
    DENM lifecycle problems in a trace.

    Every alert key (station, cause, sub-cause) must be TRIGGERed before it is
    UPDATEd or TERMINATEd, and every TRIGGER must be TERMINATEd by the end of
    the trace.
    """
    issues: List[str] = []
    open_keys: Dict[Tuple[int, int, int], int] = {}
    for step, sid, message in sent_messages(trace):
        if not isinstance(message, DenmMessage):
            continue
        key = message.alert_key
        kind = DenmMessageType(message.message_type)
        if kind is DenmMessageType.TRIGGER:
            if key in open_keys:
                issues.append(f"step {step}: {key} triggered again while active")
            open_keys[key] = step
        elif key not in open_keys:
            issues.append(f"step {step}: {kind.name} for {key} without a prior TRIGGER")
        elif kind is DenmMessageType.TERMINATE:
            del open_keys[key]
    for key, step in sorted(open_keys.items()):
        issues.append(f"{key} triggered at step {step} is never terminated")
    return issues
