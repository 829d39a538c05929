"""
Per-vehicle cooperation protocol.

``step_agent`` is the whole behaviour of one IAV for one step: it reads the
messages delivered since the last step and the current scan, updates the
vehicle's knowledge base, reacts to collision risks (CPM on observation, DENM
and stop or avoidance on alert), runs the MCM/ACK_MCM intersection handshake,
follows its mission and beacons CAMs. It is a pure function of its inputs; the
engine applies the returned motion.
"""

import math
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import (
    Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union,
)

from pydantic import BaseModel, ConfigDict, model_validator

from ..core.utils import (
    InvariantViolation, Point, UnknownIntersection, distance, wrap_degrees,
)
from .perception import (
    ObjectClass, PerceivedObject, Risk, RiskLevel, SensorConfig, classify_risk, to_cpm_records,
)
from .traffic_plan import Path, TrafficPlan, zone_of, Zone
from .wire_codec import (
    AckMcmMessage, CamMessage, CauseCode, CpmMessage, DenmMessage, DenmMessageType, Direction,
    InformationQuality, ManagementContainer, ManeuverContainer, McmMessage, Message, MessageId,
    ObjectId, SensorInformation, SituationContainer, StationType, SubCauseCode,
    generation_time_for, make_header, message_kind,
)

logger = logging.getLogger(__name__)

# Share of the per-step displacement budget given to sideways motion while the
# lateral offset changes; the forward share keeps the total within budget.
LATERAL_SHARE = 0.6
FORWARD_SHARE = 0.8
TURN_THRESHOLD = 30.0


class Phase(str, Enum):
    CRUISING = "CRUISING"
    FOLLOWING = "FOLLOWING"
    REQUESTING = "REQUESTING"
    WAITING = "WAITING"
    CROSSING = "CROSSING"
    AVOIDING = "AVOIDING"
    BLOCKED = "BLOCKED"


INTERSECTION_PHASES = frozenset({Phase.REQUESTING, Phase.WAITING, Phase.CROSSING})


class ProtocolParams(BaseModel):
    """Protocol timing, geometry margins and switches (steps unless noted)."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    dt: float = 0.1
    cam_period: int = 5
    cpm_period: int = 10
    cpm_expiry: int = 50
    ack_timeout: int = 10
    ack_scope_factor: float = 2.0
    update_epsilon: float = 0.1
    clearance: float = 0.3
    block_timeout: int = 50
    vehicle_radius: float = 0.2
    stop_margin: float = 0.3
    denm_validity: int = 5  # seconds
    peer_expiry: int = 20
    cell_size: float = 1.0
    min_ack_wait: int = 2
    intersection_handshake: bool = True

    @model_validator(mode='after')
    def _check_ranges(self) -> 'ProtocolParams':
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        for name in ('cam_period', 'cpm_period', 'cpm_expiry', 'ack_timeout',
                     'block_timeout', 'peer_expiry', 'min_ack_wait'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ('clearance', 'update_epsilon', 'stop_margin'):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        for name in ('vehicle_radius', 'cell_size', 'ack_scope_factor'):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.denm_validity <= 0xFFFFFFFF:
            raise ValueError("denm_validity must fit an unsigned 32-bit field")
        return self


DEFAULT_PARAMS = ProtocolParams()
DEFAULT_SENSOR = SensorConfig()


# --- missions -----------------------------------------------------------------

@dataclass(frozen=True)
class PositionGoal:
    x: float
    y: float
    arrival_tolerance: float = 0.2

    def __post_init__(self) -> None:
        if self.arrival_tolerance <= 0.0:
            raise ValueError(f"arrival_tolerance must be > 0, got {self.arrival_tolerance}")

    @property
    def position(self) -> Point:
        return (self.x, self.y)


@dataclass(frozen=True)
class Mission:
    """
    Ordered goals handed out by the task planner.

    Cyclic missions rotate their goals as they are reached; a lap completes
    each time the rotation wraps. ``laps`` of 0 means endless.
    """

    goals: Tuple[PositionGoal, ...]
    task_priority: int = 0
    task_urgency: int = 0
    cyclic: bool = False
    laps: int = 0
    laps_done: int = 0
    progress: int = 0

    def __post_init__(self) -> None:
        for name in ('task_priority', 'task_urgency'):
            value = getattr(self, name)
            if not 0 <= value <= 255:
                raise ValueError(f"{name} must fit an unsigned 8-bit field, got {value}")

    @property
    def done(self) -> bool:
        return not self.goals

    def pop(self) -> Tuple['Mission', bool]:
        """Drop the head goal; returns the new mission and whether a lap completed."""
        if not self.goals:
            return self, False
        if not self.cyclic:
            return replace(self, goals=self.goals[1:], progress=self.progress + 1), False
        progress = self.progress + 1
        if progress < len(self.goals):
            return replace(self, goals=self.goals[1:] + self.goals[:1], progress=progress), False
        laps_done = self.laps_done + 1
        if self.laps and laps_done >= self.laps:
            return replace(self, goals=(), laps_done=laps_done, progress=0), True
        return replace(self, goals=self.goals[1:] + self.goals[:1],
                       laps_done=laps_done, progress=0), True


@dataclass(frozen=True)
class Goal:
    goal: PositionGoal


@dataclass(frozen=True)
class Done:
    pass


DONE = Done()


def next_goal(mission: Mission, position: Point) -> Union[Goal, Done]:
    """
    Goal to steer for from a position.

    Returns the head goal, or the one after it when the position is already
    within the head's arrival tolerance (the caller pops the head). Done when
    no goal remains.
    """
    if mission.done:
        return DONE
    head = mission.goals[0]
    if distance(position, head.position) <= head.arrival_tolerance:
        following, _ = mission.pop()
        if following.done:
            return DONE
        return Goal(following.goals[0])
    return Goal(head)


# --- conflict resolution --------------------------------------------------------

class TaskBoard:
    """Task priority and urgency per station, as issued to every vehicle by the planner."""

    def __init__(self, entries: Optional[Mapping[int, Tuple[int, int]]] = None):
        self._entries: Dict[int, Tuple[int, int]] = dict(entries or {})

    @classmethod
    def from_missions(cls, missions: Mapping[int, Mission]) -> 'TaskBoard':
        return cls({sid: (m.task_priority, m.task_urgency) for sid, m in missions.items()})

    def get(self, station_id: int) -> Tuple[int, int]:
        return self._entries.get(station_id, (0, 0))

    def request(self, station_id: int) -> Tuple[int, int, int]:
        priority, urgency = self.get(station_id)
        return (station_id, priority, urgency)


def _precedence(request: Tuple[int, int, int]) -> Tuple[int, int, int]:
    station_id, priority, urgency = request
    return (priority, urgency, -station_id)


def resolve_conflict(requests: Iterable[Tuple[int, int, int]]) -> int:
    """
    Pick the station that goes first among simultaneous requests.

    Higher task priority wins, then higher urgency, then the lower station id.

    Args:
        requests: (station_id, task_priority, task_urgency) triples

    Raises:
        ValueError: If requests is empty
    """
    pool = list(requests)
    if not pool:
        raise ValueError("resolve_conflict needs at least one request")
    return max(pool, key=_precedence)[0]


# --- agent state ----------------------------------------------------------------

@dataclass(frozen=True)
class PeerInfo:
    position: Point
    last_seen: int
    previous: Optional[Point] = None

    @property
    def heading(self) -> Optional[float]:
        if self.previous is None:
            return None
        return math.degrees(math.atan2(self.position[1] - self.previous[1],
                                       self.position[0] - self.previous[0]))


@dataclass(frozen=True)
class AlertRecord:
    distance: float
    triggered_at: int
    escalated: bool = False


@dataclass(frozen=True)
class ObstacleCell:
    x: float
    y: float
    object_class: ObjectClass
    expiry: int
    reporter: int


# (cell x index, cell y index, object class, reporting station)
CellKey = Tuple[int, int, ObjectClass, int]
AlertKey = Tuple[int, int, int]


@dataclass(frozen=True)
class AgentState:
    """
    One vehicle's kinematics, mission and protocol knowledge.

    The vehicle tracks its path by arc length ``s`` (unwrapped, growing over
    laps) plus a lateral offset from the centreline. ``phase_intersection``
    names the intersection of REQUESTING, WAITING and CROSSING phases and
    ``target_arc`` its crossing on the path.
    """

    station_id: int
    position: Point
    heading: float
    speed: float
    cruise_speed: float
    mission: Mission
    path: Path = field(compare=False, repr=False)
    s: float = 0.0
    lateral_offset: float = 0.0
    phase: Phase = Phase.CRUISING
    phase_intersection: Optional[int] = None
    target_arc: Optional[float] = None
    pending_acks: FrozenSet[int] = frozenset()
    refused: bool = False
    request_step: Optional[int] = None
    known_peers: Mapping[int, PeerInfo] = field(default_factory=dict)
    obstacle_map: Mapping[CellKey, int] = field(default_factory=dict)
    active_alerts: Mapping[AlertKey, AlertRecord] = field(default_factory=dict)
    alert_conditions: Mapping[int, float] = field(default_factory=dict)
    cpm_sent: Mapping[Tuple[ObjectClass, int, int], int] = field(default_factory=dict)
    avoid_target: Optional[Point] = None
    avoid_offset: float = 0.0
    avoid_clearance: float = 0.0
    stop_since: Optional[int] = None
    goals_reached: int = 0
    laps_completed: int = 0
    dropped_messages: int = 0

    @property
    def done(self) -> bool:
        return self.mission.done

    @property
    def phase_label(self) -> str:
        if self.phase in INTERSECTION_PHASES:
            return f"{self.phase.value}({self.phase_intersection})"
        return self.phase.value

    def obstacle_cells(self, cell_size: float = 1.0) -> List[ObstacleCell]:
        return [ObstacleCell(ix * cell_size, iy * cell_size, cls, expiry, reporter)
                for (ix, iy, cls, reporter), expiry in sorted(self.obstacle_map.items(),
                                                               key=lambda kv: (kv[0][0], kv[0][1],
                                                                               kv[0][2].value,
                                                                               kv[0][3]))]


@dataclass(frozen=True)
class Motion:
    speed_command: float
    lateral_offset: float


@dataclass(frozen=True)
class Offset:
    lateral_offset: float


@dataclass(frozen=True)
class Stop:
    pass


STOP = Stop()
Maneuver = Union[Offset, Stop]


def spawn_agent(station_id: int, path: Path, s: float, mission: Mission,
                cruise_speed: float = 1.0) -> AgentState:
    """Fresh agent at arc length s of its path."""
    return AgentState(
        station_id=station_id,
        position=path.pose_at(s),
        heading=path.heading_at(s),
        speed=0.0,
        cruise_speed=cruise_speed,
        mission=mission,
        path=path,
        s=s,
    )


def apply_motion(state: AgentState, motion: Motion, dt: float) -> AgentState:
    """Advance an agent along its path by one step of the given motion."""
    s = state.s + motion.speed_command * dt
    if not state.path.cyclic:
        s = min(s, state.path.length)
    return replace(
        state,
        s=s,
        lateral_offset=motion.lateral_offset,
        position=state.path.pose_at(s, motion.lateral_offset),
        heading=state.path.heading_at(s),
        speed=motion.speed_command,
    )


# --- message builders -------------------------------------------------------------

def _cam(state: AgentState, now: int, params: ProtocolParams) -> CamMessage:
    return CamMessage(make_header(MessageId.CAM, state.station_id),
                      generation_time_for(now, params.dt), int(StationType.IAV),
                      _wire_point(state.position))


def _wire_point(p: Point) -> Tuple[float, float]:
    return (float(p[0]), float(p[1]))


def _denm(state: AgentState, now: int, params: ProtocolParams, kind: DenmMessageType,
          sub_cause: int, dist: float,
          quality: InformationQuality = InformationQuality.LOWEST) -> DenmMessage:
    return DenmMessage(
        header=make_header(MessageId.DENM, state.station_id),
        message_type=int(kind),
        station_type=int(StationType.IAV),
        management=ManagementContainer(now, float(dist), params.denm_validity),
        situation=SituationContainer(int(CauseCode.COLLISION_RISK), int(sub_cause), int(quality)),
    )


def _mcm(state: AgentState, now: int, params: ProtocolParams, intersection_id: int,
         direction: Direction) -> McmMessage:
    return McmMessage(make_header(MessageId.MCM, state.station_id),
                      generation_time_for(now, params.dt), int(StationType.IAV),
                      _wire_point(state.position),
                      ManeuverContainer(intersection_id, int(direction)))


def _turn_direction(path: Path, arc: float, radius: float) -> Direction:
    """Counter-clockwise turns are LEFT."""
    before = path.heading_at(arc - radius)
    after = path.heading_at(arc + radius) if path.cyclic or arc + radius < path.length \
        else before
    delta = wrap_degrees(after - before)
    if delta > TURN_THRESHOLD:
        return Direction.LEFT
    if delta < -TURN_THRESHOLD:
        return Direction.RIGHT
    return Direction.STRAIGHT


# --- path geometry helpers --------------------------------------------------------

def _ahead_in_lane(state: AgentState, point: Point, reach: float, lane_width: float) -> Optional[float]:
    """Arc distance ahead at which a point sits in my lane corridor, if within reach."""
    loc = state.path.locate_ahead(point, state.s, reach)
    if loc is None:
        return None
    ahead, _, off = loc
    if ahead <= 1e-9 or ahead >= reach - 1e-9 or off > lane_width / 2.0 + 1e-9:
        return None
    return ahead


def _relative_arc(state: AgentState, point: Point, back: float, forward: float,
                  lane_width: float) -> Optional[float]:
    """Signed arc offset of a point lying in my lane corridor between s - back and s + forward."""
    start = state.s - back
    if not state.path.cyclic:
        start = max(start, 0.0)
    loc = state.path.locate_ahead(point, start, state.s + forward - start)
    if loc is None:
        return None
    along, _, off = loc
    if off > lane_width / 2.0 + 1e-9:
        return None
    return along + start - state.s


def _next_crossing(path: Path, plan: TrafficPlan, s: float) -> Optional[Tuple[float, int]]:
    """First intersection crossing on the path whose core has not been left yet."""
    crossings = path.crossings(plan)
    if not crossings:
        return None
    if not path.cyclic:
        for arc, iid in crossings:
            if arc + plan.intersection(iid).core_radius > s:
                return arc, iid
        return None
    base = math.floor(s / path.length) * path.length
    for lap in (0, 1):
        for arc, iid in crossings:
            unwrapped = base + lap * path.length + arc
            if unwrapped + plan.intersection(iid).core_radius > s:
                return unwrapped, iid
    return None


def _cell_key(point: Point, cell_size: float, cls: ObjectClass, reporter: int) -> CellKey:
    return (int(math.floor(point[0] / cell_size + 0.5)),
            int(math.floor(point[1] / cell_size + 0.5)), cls, reporter)


def _same_point(a: Point, b: Point) -> bool:
    return abs(a[0] - b[0]) < 1e-9 and abs(a[1] - b[1]) < 1e-9


# --- handshake ------------------------------------------------------------------

def _queue_relation(state: AgentState, plan: TrafficPlan, intersection_id: int,
                    point: Point) -> Optional[str]:
    """'behind' or 'ahead' when a point lies on my own approach to the intersection."""
    if state.target_arc is None:
        return None
    inter = plan.intersection(intersection_id)
    back = 2.0 * inter.approach_radius
    forward = max(0.0, state.target_arc - state.s)
    rel = _relative_arc(state, point, back, forward, plan.lane_width)
    if rel is None:
        return None
    if rel < -1e-9:
        return 'behind'
    if rel > 1e-9:
        return 'ahead'
    return None


def _peer_ahead_on_approach(state: AgentState, plan: TrafficPlan, intersection_id: int,
                            now: int, params: ProtocolParams) -> bool:
    for sid, peer in state.known_peers.items():
        if sid == state.station_id or now - peer.last_seen > params.peer_expiry:
            continue
        if _queue_relation(state, plan, intersection_id, peer.position) == 'ahead':
            return True
    return False


def answer_mcm(state: AgentState, mcm: McmMessage, plan: TrafficPlan, now: int,
               params: ProtocolParams = DEFAULT_PARAMS, *,
               tasks: Optional[TaskBoard] = None) -> AckMcmMessage:
    """
    Answer a request to cross an intersection.

    The answer is false when this agent is CROSSING that intersection, or is
    REQUESTING/WAITING on it and goes first. Going first is decided by queue
    position on a shared approach (the vehicle ahead goes first), then by
    ``resolve_conflict`` between the fronts of different approaches. Every
    other case answers true.

    Args:
        state: Responding agent
        mcm: Received request
        plan: Traffic plan
        now: Current step
        params: Protocol parameters (for the generation time)
        tasks: Task board shared by every vehicle

    Raises:
        UnknownIntersection: If the requested intersection is not in the plan
    """
    inter_id = mcm.maneuver.id_intersection
    plan.intersection(inter_id)
    board = tasks or TaskBoard()
    requester = mcm.header.station_id

    response = True
    if state.phase_intersection == inter_id and state.phase is Phase.CROSSING:
        response = False
    elif state.phase_intersection == inter_id and state.phase in (Phase.REQUESTING, Phase.WAITING):
        relation = _queue_relation(state, plan, inter_id, _wire_point(mcm.current_position))
        if relation == 'behind':
            response = False
        elif relation == 'ahead':
            response = True
        elif _peer_ahead_on_approach(state, plan, inter_id, now, params):
            response = True
        else:
            winner = resolve_conflict([board.request(state.station_id), board.request(requester)])
            response = winner != state.station_id

    return AckMcmMessage(
        header=make_header(MessageId.ACK_MCM, state.station_id),
        generation_time=generation_time_for(now, params.dt),
        station_type=int(StationType.IAV),
        current_position=_wire_point(state.position),
        station_type_destinator=mcm.station_type,
        station_id_destinator=requester,
        maneuver=mcm.maneuver,
        ack_mcm_response=response,
    )


# --- avoidance ------------------------------------------------------------------

def avoidance_maneuver(state: AgentState, obstacle: PerceivedObject, lane_width: float,
                       params: ProtocolParams = DEFAULT_PARAMS,
                       scan_result: Sequence[PerceivedObject] = ()) -> Maneuver:
    """
    Decide how to get past an obstacle in my lane.

    The minimal shift clears the obstacle by ``obstacle.radius + clearance``
    on the side with more room (the left on a tie). STOP when that shift
    leaves the lane corridor or another perceived entity occupies the shifted
    corridor up to the obstacle.
    """
    loc = state.path.locate_ahead(obstacle.position, state.s, obstacle.distance + 2.0 * obstacle.radius
                                  + params.vehicle_radius + 1.0)
    if loc is None:
        return STOP
    ahead, lateral, _ = loc
    shift = obstacle.radius + params.clearance
    offset = min((lateral + shift, lateral - shift), key=lambda o: (abs(o), -o))
    if abs(offset) > lane_width / 2.0 + 1e-9:
        return STOP

    reach = ahead + obstacle.radius + params.vehicle_radius + params.clearance
    for other in scan_result:
        if other.source_entity_id == obstacle.source_entity_id:
            continue
        window = reach + other.radius
        seen = state.path.locate_ahead(other.position, state.s, window)
        if seen is None:
            continue
        other_ahead, other_lateral, _ = seen
        if not 1e-9 < other_ahead < window - 1e-9:
            continue
        if abs(other_lateral - offset) < params.vehicle_radius + other.radius + params.clearance:
            return STOP
    return Offset(offset)


# --- DENM lifecycle ----------------------------------------------------------------

def _lifecycle(state: AgentState, active: Dict[AlertKey, AlertRecord],
               conditions: Mapping[int, float], blocked: bool, now: int, params: ProtocolParams
               ) -> List[DenmMessage]:
    """Emit UPDATE and TERMINATE messages, updating ``active`` in place."""
    messages: List[DenmMessage] = []
    for key in sorted(active):
        record = active[key]
        sub_cause = key[2]
        if sub_cause not in conditions:
            messages.append(_denm(state, now, params, DenmMessageType.TERMINATE, sub_cause,
                                  record.distance))
            del active[key]
            continue
        current = conditions[sub_cause]
        if blocked and not record.escalated:
            messages.append(_denm(state, now, params, DenmMessageType.UPDATE, sub_cause, current,
                                  InformationQuality.HIGHEST))
            active[key] = replace(record, distance=current, escalated=True)
        elif abs(current - record.distance) > params.update_epsilon:
            messages.append(_denm(state, now, params, DenmMessageType.UPDATE, sub_cause, current))
            active[key] = replace(record, distance=current)
    return messages


def denm_lifecycle(state: AgentState, now: int,
                   params: ProtocolParams = DEFAULT_PARAMS) -> List[DenmMessage]:
    """
    UPDATE and TERMINATE messages owed for the agent's active alerts.

    An alert whose condition no longer holds is terminated; one whose measured
    distance moved by more than ``update_epsilon`` since its last emission is
    updated. A BLOCKED agent escalates each alert once with an UPDATE of
    highest information quality.
    """
    return _lifecycle(state, dict(state.active_alerts), state.alert_conditions,
                      state.phase is Phase.BLOCKED, now, params)


# --- step -------------------------------------------------------------------------

class _Work:
    """Mutable scratch copy of the fields a step may change."""

    def __init__(self, state: AgentState):
        self.phase = state.phase
        self.phase_intersection = state.phase_intersection
        self.target_arc = state.target_arc
        self.pending = set(state.pending_acks)
        self.refused = state.refused
        self.request_step = state.request_step
        self.peers: Dict[int, PeerInfo] = dict(state.known_peers)
        self.cells: Dict[CellKey, int] = dict(state.obstacle_map)
        self.cpm_sent = dict(state.cpm_sent)
        self.dropped = state.dropped_messages

    def view(self, state: AgentState) -> AgentState:
        return replace(state, phase=self.phase, phase_intersection=self.phase_intersection,
                       target_arc=self.target_arc, known_peers=self.peers)

    def leave_intersection(self) -> None:
        self.phase = Phase.CRUISING
        self.phase_intersection = None
        self.target_arc = None
        self.pending = set()
        self.refused = False
        self.request_step = None


def _see_peer(work: _Work, station_id: int, position: Point, now: int) -> None:
    prior = work.peers.get(station_id)
    previous = None
    if prior is not None:
        previous = prior.position if not _same_point(prior.position, position) else prior.previous
    work.peers[station_id] = PeerInfo(_wire_point(position), now, previous)


_MAPPED_OBJECTS = {int(ObjectId.OBJECT): ObjectClass.OBJECT,
                   int(ObjectId.PEDESTRIAN): ObjectClass.PEDESTRIAN}


def _ingest(state: AgentState, work: _Work, inbox: Sequence[Message], plan: TrafficPlan,
            now: int, params: ProtocolParams, tasks: TaskBoard) -> List[AckMcmMessage]:
    acks: List[AckMcmMessage] = []
    for msg in inbox:
        try:
            message_kind(msg)
        except InvariantViolation:
            work.dropped += 1
            logger.warning(f"Vehicle {state.station_id} dropped a malformed inbox entry at step {now}")
            continue
        sender = msg.header.station_id
        if sender == state.station_id:
            continue

        if isinstance(msg, CamMessage):
            _see_peer(work, sender, msg.current_position, now)
        elif isinstance(msg, CpmMessage):
            _see_peer(work, sender, msg.current_position, now)
            heading = work.peers[sender].heading
            if heading is None:
                continue
            origin = work.peers[sender].position
            for record in msg.perceived_objects:
                cls = _MAPPED_OBJECTS.get(record.object_id)
                if cls is None:
                    continue
                angle = math.radians(heading + record.yaw_angle)
                spot = (origin[0] + record.distance * math.cos(angle),
                        origin[1] + record.distance * math.sin(angle))
                work.cells[_cell_key(spot, params.cell_size, cls, sender)] = now + params.cpm_expiry
        elif isinstance(msg, DenmMessage):
            if msg.message_type == DenmMessageType.TERMINATE:
                for key in [k for k in work.cells if k[3] == sender]:
                    del work.cells[key]
                continue
            peer = work.peers.get(sender)
            if peer is None:
                continue
            cls = (ObjectClass.PEDESTRIAN
                   if msg.situation.sub_cause_code == SubCauseCode.INVOLVING_VULNERABLE_USER
                   else ObjectClass.OBJECT)
            expiry = now + int(round(msg.management.validity_duration / params.dt))
            work.cells[_cell_key(peer.position, params.cell_size, cls, sender)] = expiry
        elif isinstance(msg, McmMessage):
            _see_peer(work, sender, msg.current_position, now)
            try:
                ack = answer_mcm(work.view(state), msg, plan, now, params, tasks=tasks)
            except UnknownIntersection:
                work.dropped += 1
                logger.warning(f"Vehicle {state.station_id} dropped MCM for unknown intersection "
                               f"{msg.maneuver.id_intersection}")
                continue
            acks.append(ack)
            contested = (work.phase in (Phase.REQUESTING, Phase.WAITING)
                         and work.phase_intersection == msg.maneuver.id_intersection)
            if contested and ack.ack_mcm_response:
                work.phase = Phase.WAITING
                work.pending = set()
                work.refused = False
        elif isinstance(msg, AckMcmMessage):
            _see_peer(work, sender, msg.current_position, now)
            if msg.station_id_destinator != state.station_id:
                continue
            if (work.phase in (Phase.REQUESTING, Phase.WAITING)
                    and msg.maneuver.id_intersection == work.phase_intersection):
                work.pending.discard(sender)
                if not msg.ack_mcm_response:
                    work.refused = True

    for sid in [sid for sid, p in work.peers.items() if now - p.last_seen > params.peer_expiry]:
        del work.peers[sid]
    for key in [k for k, expiry in work.cells.items() if expiry < now]:
        del work.cells[key]
    return acks


def _request(state: AgentState, work: _Work, plan: TrafficPlan, now: int,
             params: ProtocolParams, arc: float, intersection_id: int) -> McmMessage:
    inter = plan.intersection(intersection_id)
    scope = params.ack_scope_factor * inter.approach_radius
    work.phase = Phase.REQUESTING
    work.phase_intersection = intersection_id
    work.target_arc = arc
    work.pending = {sid for sid, p in work.peers.items()
                    if sid != state.station_id
                    and now - p.last_seen <= params.peer_expiry
                    and distance(p.position, inter.center) <= scope}
    work.refused = False
    work.request_step = now
    logger.debug(f"Vehicle {state.station_id} requests intersection {intersection_id} at step {now}, "
                 f"awaiting {sorted(work.pending)}")
    return _mcm(state, now, params, intersection_id,
                _turn_direction(state.path, arc, inter.core_radius))


def _handshake(state: AgentState, work: _Work, plan: TrafficPlan, now: int,
               params: ProtocolParams) -> List[McmMessage]:
    if not params.intersection_handshake:
        return []
    requests: List[McmMessage] = []

    if work.phase is Phase.CROSSING and work.target_arc is not None:
        core = plan.intersection(work.phase_intersection or 0).core_radius
        if state.s > work.target_arc + core:
            logger.debug(f"Vehicle {state.station_id} left intersection {work.phase_intersection}")
            work.leave_intersection()

    if work.phase not in INTERSECTION_PHASES:
        upcoming = _next_crossing(state.path, plan, state.s)
        if upcoming is not None:
            arc, iid = upcoming
            if zone_of(plan, iid, state.position) is not Zone.OUTSIDE:
                requests.append(_request(state, work, plan, now, params, arc, iid))
        return requests

    elapsed = now - (work.request_step if work.request_step is not None else now)
    if work.phase is Phase.REQUESTING and work.request_step != now:
        if work.refused:
            work.phase = Phase.WAITING
            work.pending = set()
        elif not work.pending and elapsed >= params.min_ack_wait:
            work.phase = Phase.CROSSING
            logger.debug(f"Vehicle {state.station_id} granted intersection {work.phase_intersection} "
                         f"at step {now}")
        elif elapsed >= params.ack_timeout:
            requests.append(_request(state, work, plan, now, params, work.target_arc or 0.0,
                                     work.phase_intersection or 0))
    elif work.phase is Phase.WAITING and elapsed >= params.ack_timeout:
        requests.append(_request(state, work, plan, now, params, work.target_arc or 0.0,
                                 work.phase_intersection or 0))
    return requests


def step_agent(state: AgentState, inbox: Sequence[Message], scan_result: Sequence[PerceivedObject],
               plan: TrafficPlan, now: int, params: ProtocolParams = DEFAULT_PARAMS, *,
               sensor: SensorConfig = DEFAULT_SENSOR,
               tasks: Optional[TaskBoard] = None) -> Tuple[AgentState, List[Message], Motion]:
    """
    Run one step of a vehicle's protocol.

    Order of work: ingest the inbox (peers, obstacle map, ACKs, and an ACK for
    every MCM), react to perceived risks, run the intersection handshake,
    follow the mission, beacon a CAM every ``cam_period`` steps.

    Args:
        state: Agent before the step
        inbox: Messages delivered to this station since the last step
        scan_result: Scan at the agent's current position
        plan: Traffic plan
        now: Step index
        params: Protocol parameters
        sensor: Sensor thresholds used to classify risk
        tasks: Shared task board for conflict resolution

    Returns:
        (new state, outbox ordered CAM, CPM, DENM, MCM, ACK_MCM, motion)
    """
    if state.done:
        return state, [], Motion(0.0, state.lateral_offset)

    board = tasks or TaskBoard()
    work = _Work(state)
    lane_width = plan.lane_width
    acks = _ingest(state, work, inbox, plan, now, params, board)

    # Perception reactions.
    risks: List[Tuple[PerceivedObject, Risk]] = [(o, classify_risk(o, sensor)) for o in scan_result]
    for obj, risk in risks:
        if risk.level is not RiskLevel.NONE and obj.object_class is not ObjectClass.IAV:
            work.cells[_cell_key(obj.position, params.cell_size, obj.object_class,
                                 state.station_id)] = now + params.cpm_expiry

    avoid_target = state.avoid_target
    avoid_offset = state.avoid_offset
    avoid_clearance = state.avoid_clearance
    conditions: Dict[int, float] = {}
    alert_stop = False
    follow_cap = math.inf

    for obj, risk in risks:
        if risk.level is RiskLevel.NONE:
            continue
        reach = sensor.observation_distance + obj.radius + params.vehicle_radius
        ahead = _ahead_in_lane(state, obj.position, reach, lane_width)
        longitudinal = ahead is not None and abs(obj.bearing) < sensor.longitudinal_cone

        if longitudinal and not obj.static:
            leader_speed = max(0.0, state.speed - obj.relative_speed)
            gap = obj.distance - (sensor.safety_distance + params.clearance)
            follow_cap = min(follow_cap, max(0.0, min(leader_speed + gap, gap / params.dt)))

        if not risk.is_alert:
            continue
        sub_cause = int(risk.sub_cause or SubCauseCode.UNAVAILABLE)
        if avoid_target is not None and obj.static and _same_point(obj.position, avoid_target):
            continue
        if obj.object_class is ObjectClass.PEDESTRIAN:
            alert_stop = True
        elif longitudinal and obj.static and obj.object_class is ObjectClass.OBJECT:
            maneuver = avoidance_maneuver(state, obj, lane_width, params, scan_result)
            if isinstance(maneuver, Offset):
                avoid_target = obj.position
                avoid_offset = maneuver.lateral_offset
                avoid_clearance = obj.radius + params.vehicle_radius + params.clearance
                continue
            alert_stop = True
        elif longitudinal:
            alert_stop = True
        conditions[sub_cause] = min(conditions.get(sub_cause, math.inf), obj.distance)

    if avoid_target is not None:
        rel = _relative_arc(state, avoid_target, 2.0 * sensor.observation_distance,
                            sensor.observation_distance, lane_width)
        if rel is None or rel < -avoid_clearance:
            avoid_offset = 0.0
            if abs(state.lateral_offset) < 1e-9:
                avoid_target = None
                avoid_clearance = 0.0

    outbox: List[Message] = []

    # CPM for objects in the observation band, one per object key per cpm_period.
    observed = [o for o, r in risks if r.level is RiskLevel.OBSERVE]
    if observed:
        keys = [(o.object_class,) + _cell_key(o.position, params.cell_size, o.object_class, 0)[:2]
                for o in observed]
        if any(now - work.cpm_sent.get(k, -params.cpm_period) >= params.cpm_period for k in keys):
            outbox.append(CpmMessage(
                header=make_header(MessageId.CPM, state.station_id),
                generation_time=generation_time_for(now, params.dt),
                station_type=int(StationType.IAV),
                current_position=_wire_point(state.position),
                sensor_information=SensorInformation(int(sensor.sensor_type),
                                                     int(sensor.sensor_confidence)),
                perceived_objects=to_cpm_records(observed),
            ))
            for k in keys:
                work.cpm_sent[k] = now
    work.cpm_sent = {k: t for k, t in work.cpm_sent.items() if now - t < params.cpm_period}

    # Intersection handshake.
    requests = _handshake(state, work, plan, now, params)

    # Mission progress.
    mission = state.mission
    goals_reached = state.goals_reached
    laps_completed = state.laps_completed
    if mission.goals and distance(state.position, mission.goals[0].position) \
            <= mission.goals[0].arrival_tolerance:
        mission, lapped = mission.pop()
        goals_reached += 1
        laps_completed += int(lapped)

    stop_since = (state.stop_since if state.stop_since is not None else now) if alert_stop else None

    # Phase.
    phase = work.phase
    if phase not in INTERSECTION_PHASES:
        if alert_stop and stop_since is not None and now - stop_since >= params.block_timeout:
            phase = Phase.BLOCKED
        elif avoid_target is not None:
            phase = Phase.AVOIDING
        elif follow_cap < state.cruise_speed:
            phase = Phase.FOLLOWING
        else:
            phase = Phase.CRUISING

    # Speed.
    speed = state.cruise_speed
    if alert_stop or phase is Phase.WAITING:
        speed = 0.0
    speed = min(speed, follow_cap)
    if params.intersection_handshake and phase is not Phase.CROSSING:
        upcoming = ((work.target_arc, work.phase_intersection or 0) if phase in INTERSECTION_PHASES
                    and work.target_arc is not None else _next_crossing(state.path, plan, state.s))
        if upcoming is not None:
            core = plan.intersection(upcoming[1]).core_radius
            stop_arc = upcoming[0] - (core + params.stop_margin)
            speed = min(speed, max(0.0, (stop_arc - state.s) / params.dt))
    if any(reporter != state.station_id
           and distance(state.position, (ix * params.cell_size, iy * params.cell_size))
           <= sensor.observation_distance
           for ix, iy, _, reporter in work.cells):
        speed = min(speed, state.cruise_speed / 2.0)
    if not state.path.cyclic:
        speed = min(speed, max(0.0, (state.path.length - state.s) / params.dt))

    lateral = state.lateral_offset
    delta = avoid_offset - lateral
    if abs(delta) > 1e-12 and speed > 0.0:
        budget = LATERAL_SHARE * state.cruise_speed * params.dt
        lateral += max(-budget, min(budget, delta))
        speed = min(speed, FORWARD_SHARE * state.cruise_speed)
    speed = max(0.0, speed)

    # DENMs: TRIGGER new alert conditions, then UPDATE/TERMINATE the rest.
    if mission.done:
        conditions = {}
    denms: List[DenmMessage] = []
    active = dict(state.active_alerts)
    for sub_cause in sorted(conditions):
        key = (state.station_id, int(CauseCode.COLLISION_RISK), sub_cause)
        if key not in active:
            denms.append(_denm(state, now, params, DenmMessageType.TRIGGER, sub_cause,
                               conditions[sub_cause]))
            active[key] = AlertRecord(conditions[sub_cause], now)
    denms.extend(_lifecycle(state, active, conditions, phase is Phase.BLOCKED, now, params))

    new_state = replace(
        state,
        speed=0.0 if mission.done else speed,
        mission=mission,
        phase=phase,
        phase_intersection=work.phase_intersection,
        target_arc=work.target_arc,
        pending_acks=frozenset(work.pending) if phase is Phase.REQUESTING else frozenset(),
        refused=work.refused,
        request_step=work.request_step,
        known_peers=work.peers,
        obstacle_map=work.cells,
        alert_conditions=conditions,
        active_alerts=active,
        cpm_sent=work.cpm_sent,
        avoid_target=avoid_target,
        avoid_offset=avoid_offset,
        avoid_clearance=avoid_clearance,
        stop_since=stop_since,
        goals_reached=goals_reached,
        laps_completed=laps_completed,
        dropped_messages=work.dropped,
    )

    if mission.done:
        # Leaving the floor: only the closing TERMINATEs go out.
        return new_state, denms, Motion(0.0, state.lateral_offset)

    if now % params.cam_period == 0:
        outbox.insert(0, _cam(state, now, params))
    outbox.extend(denms)
    outbox.extend(requests)
    outbox.extend(acks)

    if phase is not state.phase:
        logger.debug(f"Vehicle {state.station_id} {state.phase_label} -> {new_state.phase_label} "
                     f"at step {now}")
    return new_state, outbox, Motion(speed, lateral)
