"""
Scenario files: the plain-text description of one simulation run.

A scenario is UTF-8 text made of ``[section]`` headers, ``key = value`` lines
and ``#`` comment lines::

    [run]
    name = two-crossing
    [plan]
    builtin = benchmark
    [vehicle 1]
    route = blue
    spawn = 3
    [obstacle 1]
    position = random

Values are validated by the pydantic models below. Parsing is strict: unknown
sections and keys are errors that name the offending line.
"""

import re
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path as FilePath
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..core.utils import (
    DuplicateStationId, InvalidScenario, OffLane, Point, ScenarioError, ScenarioSyntaxError,
    UnknownKey, distance,
)
from .agent_protocol import Mission, PositionGoal, ProtocolParams
from .bus import BusConfig
from .perception import SensorConfig
from .traffic_plan import (
    DEFAULT_APPROACH_RADIUS, DEFAULT_CORE_RADIUS, DEFAULT_LANE_WIDTH, Intersection, Lane, Path,
    Route, TrafficPlan, Waypoint, build_benchmark_plan, lane_at, validate_plan,
)

logger = logging.getLogger(__name__)

BUILTIN_PLANS = ('benchmark',)


class ObstacleKind(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


# --- value text -----------------------------------------------------------------

def _as_point(value: Any) -> Any:
    if isinstance(value, str):
        parts = value.split()
        if len(parts) != 2:
            raise ValueError(f"expected 'x y', got '{value}'")
        return parts
    return value


def _as_points(value: Any) -> Any:
    if isinstance(value, str):
        chunks = [c.strip() for c in value.split(';')]
        if any(not c for c in chunks):
            raise ValueError(f"expected 'x y; x y; ...', got '{value}'")
        return [_as_point(c) for c in chunks]
    return value


def _as_words(value: Any) -> Any:
    return value.split() if isinstance(value, str) else value


# --- section models ---------------------------------------------------------------

class RunSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    name: str = "scenario"
    description: str = ""


class PlanSpec(BaseModel):
    """
    Either a built-in plan or inline geometry.

    Inline keys: ``waypoint.N = x y``, ``lane.N = from to``,
    ``intersection.N = x y [core approach]``, ``route.NAME = id id ...`` and
    ``spawn = id id ...``. A section without waypoints means the benchmark.
    """

    model_config = ConfigDict(frozen=True, extra='forbid')

    builtin: Optional[str] = None
    lane_width: float = Field(default=DEFAULT_LANE_WIDTH, gt=0.0)
    waypoints: Dict[int, Tuple[float, float]] = Field(default_factory=dict)
    lanes: Dict[int, Tuple[int, int]] = Field(default_factory=dict)
    intersections: Dict[int, Tuple[float, ...]] = Field(default_factory=dict)
    routes: Dict[str, Tuple[int, ...]] = Field(default_factory=dict)
    spawn: Tuple[int, ...] = ()

    @model_validator(mode='before')
    @classmethod
    def _default_builtin(cls, data: Any) -> Any:
        if isinstance(data, dict) and not data.get('waypoints') and not data.get('builtin'):
            return {**data, 'builtin': 'benchmark'}
        return data

    @field_validator('waypoints', mode='before')
    @classmethod
    def _waypoint_text(cls, value: Any) -> Any:
        return {k: _as_point(v) for k, v in value.items()} if isinstance(value, dict) else value

    @field_validator('lanes', 'intersections', 'routes', mode='before')
    @classmethod
    def _id_lists(cls, value: Any) -> Any:
        return {k: _as_words(v) for k, v in value.items()} if isinstance(value, dict) else value

    @field_validator('spawn', mode='before')
    @classmethod
    def _spawn_text(cls, value: Any) -> Any:
        return _as_words(value)

    @field_validator('intersections')
    @classmethod
    def _intersection_radii(cls, value: Dict[int, Tuple[float, ...]]) -> Dict[int, Tuple[float, ...]]:
        full = {}
        for key, numbers in value.items():
            if len(numbers) == 2:
                numbers = numbers + (DEFAULT_CORE_RADIUS, DEFAULT_APPROACH_RADIUS)
            if len(numbers) != 4:
                raise ValueError(f"intersection {key}: expected 'x y' or 'x y core approach'")
            full[key] = numbers
        return full

    @model_validator(mode='after')
    def _one_kind_of_plan(self) -> 'PlanSpec':
        if self.builtin is not None:
            if self.builtin not in BUILTIN_PLANS:
                raise ValueError(f"unknown builtin plan '{self.builtin}'")
            if self.waypoints or self.lanes or self.intersections or self.routes or self.spawn:
                raise ValueError("a builtin plan cannot be combined with inline geometry")
        return self

    @property
    def is_builtin(self) -> bool:
        return self.builtin is not None


class VehicleSpec(BaseModel):
    """One IAV: a route loop or an explicit list of goals, and where it starts."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    station_id: int = Field(ge=0, le=0xFFFFFFFF)
    route: Optional[str] = None
    goals: Optional[Tuple[Tuple[float, float], ...]] = None
    spawn: Optional[int] = Field(default=None, ge=0)
    position: Optional[Tuple[float, float]] = None
    task_priority: int = Field(default=0, ge=0, le=255)
    task_urgency: int = Field(default=0, ge=0, le=255)
    cruise_speed: float = Field(default=1.0, gt=0.0)
    laps: int = Field(default=0, ge=0)
    arrival_tolerance: float = Field(default=0.2, gt=0.0)

    @field_validator('goals', mode='before')
    @classmethod
    def _goal_text(cls, value: Any) -> Any:
        return _as_points(value)

    @field_validator('position', mode='before')
    @classmethod
    def _position_text(cls, value: Any) -> Any:
        return _as_point(value)

    @model_validator(mode='after')
    def _mission_shape(self) -> 'VehicleSpec':
        if (self.route is None) == (self.goals is None):
            raise ValueError("a vehicle needs exactly one of 'route' or 'goals'")
        if self.goals is not None and not self.goals:
            raise ValueError("goals must not be empty")
        if self.spawn is not None and self.position is not None:
            raise ValueError("give either 'spawn' or 'position', not both")
        if self.spawn is None and self.position is None:
            raise ValueError("a vehicle needs a 'spawn' index or a 'position'")
        if self.goals is not None and self.laps:
            raise ValueError("'laps' applies to route vehicles only")
        return self


class ObstacleSpec(BaseModel):
    """
    A scheduled obstacle injection.

    Static obstacles sit at ``position`` (or a random lane point); dynamic ones
    follow ``path`` at ``speed`` and stop at its end.
    """

    model_config = ConfigDict(frozen=True, extra='forbid')

    obstacle_id: int = Field(ge=0)
    step: int = Field(default=0, ge=0)
    position: Optional[Union[Tuple[float, float], Literal['random']]] = None
    radius: float = Field(default=0.3, gt=0.0)
    kind: ObstacleKind = ObstacleKind.STATIC
    path: Optional[Tuple[Tuple[float, float], ...]] = None
    speed: float = Field(default=0.5, ge=0.0)
    remove_at: Optional[int] = Field(default=None, ge=0)

    @field_validator('position', mode='before')
    @classmethod
    def _position_text(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip() == 'random':
            return 'random'
        return _as_point(value)

    @field_validator('path', mode='before')
    @classmethod
    def _path_text(cls, value: Any) -> Any:
        return _as_points(value)

    @model_validator(mode='after')
    def _kind_shape(self) -> 'ObstacleSpec':
        if self.kind is ObstacleKind.STATIC:
            if self.position is None:
                raise ValueError("a static obstacle needs 'position' (x y or random)")
            if self.path is not None:
                raise ValueError("'path' applies to dynamic obstacles only")
        else:
            if self.path is None or len(self.path) < 2:
                raise ValueError("a dynamic obstacle needs a 'path' of at least two points")
            if self.position is not None:
                raise ValueError("a dynamic obstacle starts at the head of its path; omit 'position'")
        if self.remove_at is not None and self.remove_at <= self.step:
            raise ValueError("remove_at must come after step")
        return self


class PedestrianSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    pedestrian_id: int = Field(ge=0)
    path: Tuple[Tuple[float, float], ...]
    speed: float = Field(default=0.8, gt=0.0)
    start_step: int = Field(default=0, ge=0)
    loop: bool = False
    radius: float = Field(default=0.3, gt=0.0)

    @field_validator('path', mode='before')
    @classmethod
    def _path_text(cls, value: Any) -> Any:
        return _as_points(value)

    @field_validator('path')
    @classmethod
    def _two_points(cls, value: Tuple[Tuple[float, float], ...]) -> Tuple[Tuple[float, float], ...]:
        if len(value) < 2:
            raise ValueError("a pedestrian path needs at least two points")
        return value


class ScenarioConfig(BaseModel):
    """Everything a run needs besides the seed and the step budget."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    run: RunSpec = Field(default_factory=RunSpec)
    plan: PlanSpec = Field(default_factory=PlanSpec)
    vehicles: Tuple[VehicleSpec, ...] = ()
    obstacles: Tuple[ObstacleSpec, ...] = ()
    pedestrians: Tuple[PedestrianSpec, ...] = ()
    sensor: SensorConfig = Field(default_factory=SensorConfig)
    protocol: ProtocolParams = Field(default_factory=ProtocolParams)
    bus: BusConfig = Field(default_factory=BusConfig)

    @model_validator(mode='after')
    def _unique_ids(self) -> 'ScenarioConfig':
        for label, ids in (('station_id', [v.station_id for v in self.vehicles]),
                           ('obstacle id', [o.obstacle_id for o in self.obstacles]),
                           ('pedestrian id', [p.pedestrian_id for p in self.pedestrians])):
            if len(ids) != len(set(ids)):
                raise ValueError(f"duplicate {label}")
        return self

    @property
    def dt(self) -> float:
        return self.protocol.dt


# --- parsing ----------------------------------------------------------------------

_SECTION_RE = re.compile(r'^\[\s*([A-Za-z_]+)(?:\s+(\d+))?\s*\]$')
_ENTRY_RE = re.compile(r'^([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z0-9_]+)?)\s*=\s*(.*)$')

_SINGLE_SECTIONS: Dict[str, Type[BaseModel]] = {
    'run': RunSpec,
    'plan': PlanSpec,
    'sensor': SensorConfig,
    'protocol': ProtocolParams,
    'bus': BusConfig,
}
_INDEXED_SECTIONS: Dict[str, Tuple[Type[BaseModel], str]] = {
    'vehicle': (VehicleSpec, 'station_id'),
    'obstacle': (ObstacleSpec, 'obstacle_id'),
    'pedestrian': (PedestrianSpec, 'pedestrian_id'),
}
# Dotted plan keys and the PlanSpec field each fills.
_PLAN_GROUPS = {'waypoint': 'waypoints', 'lane': 'lanes', 'intersection': 'intersections',
                'route': 'routes'}
_NUMBERED_GROUPS = ('waypoint', 'lane', 'intersection')


@dataclass
class _Section:
    name: str
    index: Optional[int]
    line: int
    entries: Dict[str, Tuple[str, int]] = field(default_factory=dict)

    @property
    def title(self) -> str:
        return f"[{self.name}]" if self.index is None else f"[{self.name} {self.index}]"


def _read_sections(text: str) -> List[_Section]:
    sections: List[_Section] = []
    current: Optional[_Section] = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue

        header = _SECTION_RE.match(line)
        if header:
            name, index = header.group(1), header.group(2)
            if name not in _SINGLE_SECTIONS and name not in _INDEXED_SECTIONS:
                raise UnknownKey(f"unknown section [{name}]", number, key=name)
            if name in _INDEXED_SECTIONS and index is None:
                raise ScenarioSyntaxError(f"[{name}] needs an id, e.g. [{name} 1]", number, key=name)
            if name in _SINGLE_SECTIONS and index is not None:
                raise ScenarioSyntaxError(f"[{name}] takes no id", number, key=name)
            current = _Section(name, int(index) if index is not None else None, number)
            sections.append(current)
            continue

        entry = _ENTRY_RE.match(line)
        if entry is None:
            raise ScenarioSyntaxError(f"expected '[section]' or 'key = value', got {line!r}", number)
        if current is None:
            raise ScenarioSyntaxError("key = value before any [section]", number)
        key, value = entry.group(1), entry.group(2).strip()
        if key in current.entries:
            raise ScenarioSyntaxError(f"duplicate key '{key}' in {current.title}", number,
                                      key=f"{current.name}.{key}")
        if not value:
            raise ScenarioSyntaxError(f"key '{key}' has no value", number, key=f"{current.name}.{key}")
        current.entries[key] = (value, number)
    return sections


def _check_keys(section: _Section, model: Type[BaseModel], id_field: Optional[str] = None) -> None:
    allowed = set(model.model_fields) - {id_field}
    if section.name == 'plan':
        allowed -= set(_PLAN_GROUPS.values())
    for key, (_, line) in section.entries.items():
        group, dot, suffix = key.partition('.')
        if section.name == 'plan' and dot and group in _PLAN_GROUPS:
            if group in _NUMBERED_GROUPS and not suffix.isdigit():
                raise UnknownKey(f"{section.title}: '{key}' needs a numeric id", line,
                                 key=f"{section.name}.{key}")
            continue
        if dot or key not in allowed:
            raise UnknownKey(f"{section.title}: unknown key '{key}'", line, key=f"{section.name}.{key}")


def _section_data(section: _Section) -> Tuple[Dict[str, Any], Dict[Tuple[str, ...], int]]:
    """Raw values for model validation plus the line of every value, keyed by loc."""
    data: Dict[str, Any] = {}
    lines: Dict[Tuple[str, ...], int] = {}
    for key, (value, line) in section.entries.items():
        group, dot, suffix = key.partition('.')
        if section.name == 'plan' and dot:
            target = _PLAN_GROUPS[group]
            data.setdefault(target, {})[suffix] = value
            lines[(target, suffix)] = line
            lines.setdefault((target,), line)
        else:
            data[key] = value
            lines[(key,)] = line
    return data, lines


def _validate_section(section: _Section, model: Type[BaseModel],
                      extra: Optional[Dict[str, Any]] = None) -> Any:
    data, lines = _section_data(section)
    try:
        return model.model_validate({**(extra or {}), **data})
    except ValidationError as e:
        error = e.errors()[0]
        loc = tuple(str(part) for part in error['loc'])
        line = lines.get(loc[:2]) or lines.get(loc[:1]) or section.line
        where = '.'.join(loc) if loc else section.title
        message = error['msg']
        raise ScenarioError(f"{section.title}: {where}: {message}", line,
                            key=f"{section.name}.{loc[0]}" if loc else section.name) from e


def parse_scenario(text: str) -> ScenarioConfig:
    """
    Parse scenario text.

    Args:
        text: Scenario file contents

    Returns:
        Validated ScenarioConfig with defaults filled in

    Raises:
        ScenarioSyntaxError: If a line is neither a header, a comment nor key = value
        UnknownKey: If a section or key is not defined
        DuplicateStationId: If two [vehicle N] sections share N
        ScenarioError: If a value fails validation
    """
    singles: Dict[str, Any] = {}
    indexed: Dict[str, List[Any]] = {name: [] for name in _INDEXED_SECTIONS}
    seen: Dict[Tuple[str, Optional[int]], int] = {}

    for section in _read_sections(text):
        marker = (section.name, section.index)
        if marker in seen:
            if section.name == 'vehicle':
                raise DuplicateStationId(
                    f"station id {section.index} already defined at line {seen[marker]}",
                    section.line, key=f"vehicle.{section.index}")
            raise ScenarioSyntaxError(f"{section.title} already defined at line {seen[marker]}",
                                      section.line, key=section.name)
        seen[marker] = section.line

        if section.name in _SINGLE_SECTIONS:
            model = _SINGLE_SECTIONS[section.name]
            _check_keys(section, model)
            singles[section.name] = _validate_section(section, model)
        else:
            model, id_field = _INDEXED_SECTIONS[section.name]
            _check_keys(section, model, id_field)
            indexed[section.name].append(_validate_section(section, model, {id_field: section.index}))

    try:
        scenario = ScenarioConfig(
            vehicles=tuple(indexed['vehicle']),
            obstacles=tuple(indexed['obstacle']),
            pedestrians=tuple(indexed['pedestrian']),
            **singles,
        )
    except ValidationError as e:
        raise ScenarioError(e.errors()[0]['msg']) from e
    logger.debug(f"Parsed scenario '{scenario.run.name}': {len(scenario.vehicles)} vehicles, "
                 f"{len(scenario.obstacles)} obstacles, {len(scenario.pedestrians)} pedestrians")
    return scenario


def load_scenario(path: Union[str, FilePath]) -> ScenarioConfig:
    """Read and parse a scenario file."""
    text = FilePath(path).read_text(encoding='utf-8')
    return parse_scenario(text)


# --- serialization ----------------------------------------------------------------

def _text(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return value.name if isinstance(value.value, int) else str(value.value)
    if isinstance(value, float):
        return repr(value + 0.0)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(_text(p) for p in value)
        return " ".join(_text(v) for v in value)
    return str(value)


def _model_lines(model: BaseModel, skip: Tuple[str, ...] = ()) -> List[str]:
    lines = []
    for name in type(model).model_fields:
        if name in skip:
            continue
        value = getattr(model, name)
        if value is None or value == "":
            continue
        lines.append(f"{name} = {_text(value)}")
    return lines


def _plan_lines(plan: PlanSpec) -> List[str]:
    if plan.is_builtin:
        return [f"builtin = {plan.builtin}"]
    lines = [f"lane_width = {_text(plan.lane_width)}"]
    lines += [f"waypoint.{k} = {_text(v)}" for k, v in sorted(plan.waypoints.items())]
    lines += [f"lane.{k} = {_text(v)}" for k, v in sorted(plan.lanes.items())]
    lines += [f"intersection.{k} = {_text(v)}" for k, v in sorted(plan.intersections.items())]
    lines += [f"route.{k} = {_text(v)}" for k, v in sorted(plan.routes.items())]
    if plan.spawn:
        lines.append(f"spawn = {_text(plan.spawn)}")
    return lines


def serialize_scenario(scenario: ScenarioConfig) -> str:
    """Canonical scenario text; parsing it yields an equal ScenarioConfig."""
    blocks: List[List[str]] = [
        ["[run]"] + _model_lines(scenario.run),
        ["[plan]"] + _plan_lines(scenario.plan),
        ["[sensor]"] + _model_lines(scenario.sensor),
        ["[protocol]"] + _model_lines(scenario.protocol),
        ["[bus]"] + _model_lines(scenario.bus),
    ]
    for v in scenario.vehicles:
        blocks.append([f"[vehicle {v.station_id}]"] + _model_lines(v, ('station_id',)))
    for o in scenario.obstacles:
        blocks.append([f"[obstacle {o.obstacle_id}]"] + _model_lines(o, ('obstacle_id',)))
    for p in scenario.pedestrians:
        blocks.append([f"[pedestrian {p.pedestrian_id}]"] + _model_lines(p, ('pedestrian_id',)))
    return "\n\n".join("\n".join(block) for block in blocks) + "\n"


# --- resolution against a plan ------------------------------------------------------

def build_plan(spec: PlanSpec) -> TrafficPlan:
    """
    Materialize the traffic plan a scenario names.

    Raises:
        InvalidScenario: If inline geometry violates plan invariants
    """
    if spec.is_builtin:
        return build_benchmark_plan()
    try:
        plan = TrafficPlan(
            waypoints=tuple(Waypoint(i, x, y) for i, (x, y) in sorted(spec.waypoints.items())),
            lanes=tuple(Lane(a, b, spec.lane_width) for _, (a, b) in sorted(spec.lanes.items())),
            intersections=tuple(Intersection(i, (v[0], v[1]), v[2], v[3])
                                for i, v in sorted(spec.intersections.items())),
            routes=tuple(Route(role, ids) for role, ids in sorted(spec.routes.items())),
            spawn_points=spec.spawn,
        )
    except InvalidScenario:
        raise
    except (KeyError, ValueError) as e:
        raise InvalidScenario(f"Inline plan is inconsistent: {e}", original_error=e)
    validate_plan(plan)
    return plan


def vehicle_start(spec: VehicleSpec, plan: TrafficPlan) -> Tuple[Path, float, Mission]:
    """
    Path, starting arc position and mission of a vehicle.

    Route vehicles loop their route; their goals are the route's waypoints in
    driving order from the start, ending back at the start's waypoint. Goal
    vehicles drive a straight polyline through their goals.

    Raises:
        InvalidScenario: If the route, spawn index or start position is unusable
    """
    if spec.spawn is not None:
        if spec.spawn >= len(plan.spawn_points):
            raise InvalidScenario(
                f"Vehicle {spec.station_id}: spawn index {spec.spawn} but the plan has "
                f"{len(plan.spawn_points)} spawn points")
        start = plan.waypoint(plan.spawn_points[spec.spawn]).position
    else:
        assert spec.position is not None
        start = spec.position

    if spec.route is None:
        assert spec.goals is not None
        goals = tuple(PositionGoal(x, y, spec.arrival_tolerance) for x, y in spec.goals)
        path = Path([start] + [g.position for g in goals], cyclic=False)
        mission = Mission(goals, spec.task_priority, spec.task_urgency)
        return path, 0.0, mission

    route = plan.route(spec.route)
    path = plan.route_path(route.role)
    s0, _, off = path.project(start)
    if off > plan.lane_width / 2.0 + 1e-9:
        raise InvalidScenario(
            f"Vehicle {spec.station_id}: start {start} is {off:.3f} m off route '{route.role}'")
    arcs = path.vertex_arcs
    order = sorted(range(len(route.waypoint_ids)), key=lambda k: (arcs[k] <= s0 + 1e-9, arcs[k]))
    goals = tuple(PositionGoal(*plan.waypoint(route.waypoint_ids[k]).position, spec.arrival_tolerance)
                  for k in order)
    mission = Mission(goals, spec.task_priority, spec.task_urgency, cyclic=True, laps=spec.laps)
    return path, s0, mission


def validate_scenario(scenario: ScenarioConfig) -> TrafficPlan:
    """
    Check a parsed scenario against its plan.

    Returns:
        The resolved TrafficPlan

    Raises:
        InvalidScenario: If a route is missing, a start is off its route, two
            vehicles start on top of each other, a vehicle could overshoot its
            goals in one step, or a fixed obstacle lies off every lane
    """
    plan = build_plan(scenario.plan)
    radius = scenario.protocol.vehicle_radius
    starts: List[Tuple[int, Point]] = []
    for spec in scenario.vehicles:
        path, s0, _ = vehicle_start(spec, plan)
        if spec.cruise_speed * scenario.dt >= 2.0 * spec.arrival_tolerance:
            raise InvalidScenario(
                f"Vehicle {spec.station_id}: cruise_speed {spec.cruise_speed} covers "
                f"{spec.cruise_speed * scenario.dt:.3f} m per step, more than twice its "
                f"arrival_tolerance {spec.arrival_tolerance}")
        here = path.pose_at(s0)
        for other, there in starts:
            if distance(here, there) < 2.0 * radius:
                raise InvalidScenario(f"Vehicles {other} and {spec.station_id} start overlapping")
        starts.append((spec.station_id, here))

    for obstacle in scenario.obstacles:
        points = [obstacle.position] if isinstance(obstacle.position, tuple) else []
        points += list(obstacle.path or ())
        for point in points:
            try:
                lane_at(plan, point)
            except OffLane as e:
                raise InvalidScenario(
                    f"Obstacle {obstacle.obstacle_id}: {point} is outside every lane",
                    original_error=e)
    return plan
