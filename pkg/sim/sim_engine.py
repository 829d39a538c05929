"""
Deterministic discrete-time engine.

One step runs: scheduled obstacle injections and removals, inbox delivery,
snapshot and scans, every agent's ``step_agent`` against that snapshot, motion,
scripted obstacle and pedestrian movement, the collision and mutual-exclusion
oracles, and finally publication of the step's messages. The run is a pure
function of (scenario, seed, max_steps).
"""

import math
import time
import logging
from collections import defaultdict
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..core.utils import InvalidScenario, Point, SimUtils, distance
from .agent_protocol import (
    AgentState, Motion, Phase, ProtocolParams, TaskBoard, apply_motion, spawn_agent, step_agent,
)
from .bus import BusConfig, Delivery, MessageBus, deliver
from .perception import (
    Body, EntityRef, ObjectClass, PerceivedObject, WorldSnapshot, scan,
)
from .scenario import ObstacleKind, ObstacleSpec, ScenarioConfig, validate_scenario, vehicle_start
from .trace import EventKind, TraceEvent, format_trace, sort_events
from .traffic_plan import Path, TrafficPlan, lane_at, random_lane_point
from .wire_codec import Message, encode_hex, message_kind

logger = logging.getLogger(__name__)

__all__ = [
    'BusConfig', 'deliver', 'MessageBus', 'Obstacle', 'ObstacleKind', 'Pedestrian', 'VehicleEntry',
    'WorldState', 'RunResult', 'inject_obstacle', 'remove_obstacle', 'collision_oracle',
    'mutex_oracle', 'run', 'subsystem_rng',
]

# Fixed labels for the per-subsystem generators; new labels go at the end.
RNG_LABELS = ('bus', 'injection')
OBSTACLE_SPACING = 8.0
INJECTION_MARGIN = 0.5


def subsystem_rng(seed: int, label: str) -> np.random.Generator:
    """Generator for one subsystem, independent of every other label's draws."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(RNG_LABELS.index(label),)))


# --- world ------------------------------------------------------------------------

@dataclass(frozen=True)
class Obstacle:
    id: int
    position: Point
    radius: float
    kind: ObstacleKind = ObstacleKind.STATIC
    velocity: Point = (0.0, 0.0)
    path: Optional[Path] = field(default=None, compare=False, repr=False)
    s: float = 0.0
    speed: float = 0.0

    @property
    def ref(self) -> EntityRef:
        return EntityRef.obstacle(self.id)

    def body(self) -> Body:
        return Body(self.ref, ObjectClass.OBJECT, self.position, self.radius, 0.0, self.velocity,
                    static=self.kind is ObstacleKind.STATIC)


@dataclass(frozen=True)
class Pedestrian:
    id: int
    position: Point
    velocity: Point
    path: Path = field(compare=False, repr=False)
    speed: float = 0.8
    radius: float = 0.3
    s: float = 0.0

    @property
    def ref(self) -> EntityRef:
        return EntityRef.pedestrian(self.id)

    def body(self) -> Body:
        heading = math.degrees(math.atan2(self.velocity[1], self.velocity[0]))
        return Body(self.ref, ObjectClass.PEDESTRIAN, self.position, self.radius, heading,
                    self.velocity)


@dataclass(frozen=True)
class VehicleEntry:
    state: AgentState
    route: Optional[str]


@dataclass(frozen=True)
class WorldState:
    """Ground truth of the floor between steps."""

    step: int
    plan: TrafficPlan = field(repr=False)
    vehicles: Dict[int, VehicleEntry] = field(default_factory=dict)
    obstacles: Tuple[Obstacle, ...] = ()
    pedestrians: Tuple[Pedestrian, ...] = ()
    vehicle_radius: float = 0.2

    def __post_init__(self) -> None:
        for sid, entry in self.vehicles.items():
            if entry.state.station_id != sid:
                raise InvalidScenario(f"Vehicle entry {sid} holds station {entry.state.station_id}")
        for obstacle in self.obstacles:
            if obstacle.radius <= 0.0:
                raise InvalidScenario(f"Obstacle {obstacle.id} has non-positive radius")

    def vehicle_body(self, state: AgentState) -> Body:
        h = math.radians(state.heading)
        return Body(EntityRef.vehicle(state.station_id), ObjectClass.IAV, state.position,
                    self.vehicle_radius, state.heading,
                    (state.speed * math.cos(h), state.speed * math.sin(h)))

    def bodies(self) -> Iterator[Body]:
        for sid in sorted(self.vehicles):
            yield self.vehicle_body(self.vehicles[sid].state)
        for obstacle in self.obstacles:
            yield obstacle.body()
        for pedestrian in self.pedestrians:
            yield pedestrian.body()

    def snapshot(self) -> WorldSnapshot:
        return WorldSnapshot(self.step, tuple(self.bodies()))


def inject_obstacle(world: WorldState, position: Optional[Point], radius: float,
                    kind: ObstacleKind, rng: np.random.Generator, *,
                    obstacle_id: Optional[int] = None, margin: float = 1.5,
                    path: Optional[Path] = None, speed: float = 0.0) -> WorldState:
    """
    Add an obstacle to the world.

    Args:
        world: World before the injection
        position: Lane position, or None to draw one uniformly over lane
            centreline arc length (clear of junctions, approach zones, vehicles
            and other obstacles)
        radius: Body radius, > 0
        kind: STATIC, or DYNAMIC following ``path`` at ``speed``
        rng: The run's injection generator
        obstacle_id: Id to use; defaults to one past the largest in use
        margin: Extra clearance from vehicles for random placement

    Returns:
        World with the obstacle added

    Raises:
        OffLane: If an explicit position lies outside every lane corridor
        InvalidScenario: If the radius is not positive or no free point exists
    """
    if radius <= 0.0:
        raise InvalidScenario(f"Obstacle radius must be > 0, got {radius}")
    if kind is ObstacleKind.DYNAMIC:
        if path is None:
            raise InvalidScenario("A dynamic obstacle needs a path")
        position = path.point_at(0.0)

    if position is None:
        def crowded(point: Point) -> bool:
            near_vehicle = any(
                distance(point, entry.state.position) < radius + world.vehicle_radius + margin
                for entry in world.vehicles.values())
            near_obstacle = any(distance(point, o.position) < OBSTACLE_SPACING
                                for o in world.obstacles)
            return near_vehicle or near_obstacle
        position = random_lane_point(world.plan, rng, reject=crowded)
    else:
        lane_at(world.plan, position)

    if obstacle_id is None:
        obstacle_id = max((o.id for o in world.obstacles), default=0) + 1
    if any(o.id == obstacle_id for o in world.obstacles):
        raise InvalidScenario(f"Obstacle {obstacle_id} is already on the floor")

    velocity = (0.0, 0.0)
    if path is not None and speed > 0.0:
        nx_, ny_ = _direction(path, 0.0)
        velocity = (speed * nx_, speed * ny_)
    obstacle = Obstacle(obstacle_id, (float(position[0]), float(position[1])), radius, kind,
                        velocity, path, 0.0, speed)
    logger.debug(f"Injected obstacle {obstacle_id} ({kind.value}) at {obstacle.position}")
    return replace(world, obstacles=tuple(sorted(world.obstacles + (obstacle,), key=lambda o: o.id)))


def remove_obstacle(world: WorldState, obstacle_id: int) -> WorldState:
    return replace(world, obstacles=tuple(o for o in world.obstacles if o.id != obstacle_id))


def _direction(path: Path, s: float) -> Point:
    h = math.radians(path.heading_at(s))
    return (math.cos(h), math.sin(h))


def _advance_on_path(path: Path, s: float, speed: float, dt: float,
                     loop: bool) -> Tuple[float, Point, Point, bool]:
    """(s', position, velocity, at_end) after one step along a scripted path."""
    s_next = s + speed * dt
    at_end = False
    if loop:
        s_next %= path.length
    elif s_next >= path.length:
        s_next = path.length
        at_end = True
    position = path.point_at(s_next)
    if at_end or speed == 0.0:
        return s_next, position, (0.0, 0.0), at_end
    ux, uy = _direction(path, s_next)
    return s_next, position, (speed * ux, speed * uy), at_end


# --- oracles ------------------------------------------------------------------------

def collision_oracle(world: WorldState) -> List[Tuple[EntityRef, EntityRef]]:
    """
    Pairs of bodies whose disks strictly overlap, at least one being a vehicle.

    Touching disks (centre distance equal to the sum of radii) do not count.
    """
    bodies = sorted(world.bodies(), key=lambda b: (int(b.ref.kind), b.ref.index))
    if len(bodies) < 2:
        return []
    positions = np.array([b.position for b in bodies], dtype=float)
    radii = np.array([b.radius for b in bodies], dtype=float)
    vehicle = np.array([b.object_class is ObjectClass.IAV for b in bodies])
    gaps = np.hypot(positions[:, None, 0] - positions[None, :, 0],
                    positions[:, None, 1] - positions[None, :, 1]) - (radii[:, None] + radii[None, :])
    close = np.triu(gaps < 1e-6, k=1) & (vehicle[:, None] | vehicle[None, :])
    pairs: List[Tuple[EntityRef, EntityRef]] = []
    for i, j in zip(*np.nonzero(close)):
        a, b = bodies[i], bodies[j]
        if distance(a.position, b.position) < a.radius + b.radius:
            pairs.append((a.ref, b.ref))
    return pairs


def mutex_oracle(world: WorldState) -> Dict[int, List[int]]:
    """Intersections held in CROSSING by more than one vehicle, with the holders."""
    holders: Dict[int, List[int]] = defaultdict(list)
    for sid in sorted(world.vehicles):
        state = world.vehicles[sid].state
        if state.phase is Phase.CROSSING and state.phase_intersection is not None:
            holders[state.phase_intersection].append(sid)
    return {iid: sids for iid, sids in holders.items() if len(sids) > 1}


# --- run ----------------------------------------------------------------------------

class _Recorder:
    """Collects trace events and numbers repeats of (step, entity, kind)."""

    def __init__(self) -> None:
        self.events: List[TraceEvent] = []
        self._seq: Dict[Tuple[int, int, int, int], int] = defaultdict(int)

    def emit(self, step: int, entity: EntityRef, event_kind: EventKind, **fields: Any) -> None:
        key = (step, int(entity.kind), entity.index, int(event_kind))
        self.events.append(TraceEvent.make(step, entity, event_kind, self._seq[key], **fields))
        self._seq[key] += 1


@dataclass
class RunResult:
    trace: List[TraceEvent]
    world: WorldState
    steps: int
    seed: int
    dt: float
    mutex_violations: int = 0
    collisions: int = 0
    messages_sent: int = 0
    wall_time: float = 0.0

    @property
    def meta(self) -> Dict[str, Any]:
        return {'dt': self.dt, 'seed': self.seed, 'steps': self.steps}

    def render(self) -> str:
        return format_trace(self.trace, self.meta)


def _spawn_world(scenario: ScenarioConfig, plan: TrafficPlan) -> WorldState:
    vehicles: Dict[int, VehicleEntry] = {}
    for spec in scenario.vehicles:
        path, s0, mission = vehicle_start(spec, plan)
        state = spawn_agent(spec.station_id, path, s0, mission, spec.cruise_speed)
        vehicles[spec.station_id] = VehicleEntry(state, spec.route)
    return WorldState(0, plan, vehicles, vehicle_radius=scenario.protocol.vehicle_radius)


def _step_agents(world: WorldState, inboxes: Dict[int, List[Message]],
                 scans: Dict[int, List[PerceivedObject]], now: int, scenario: ScenarioConfig,
                 tasks: TaskBoard, pool: Optional[Executor],
                 order: Optional[Sequence[int]]) -> Dict[int, Tuple[AgentState, List[Message], Motion]]:
    ids = sorted(world.vehicles)
    if order is not None:
        ranked = {sid: i for i, sid in enumerate(order)}
        ids.sort(key=lambda sid: (ranked.get(sid, len(ranked)), sid))

    def one(sid: int) -> Tuple[int, Tuple[AgentState, List[Message], Motion]]:
        return sid, step_agent(world.vehicles[sid].state, inboxes.get(sid, []), scans[sid],
                               world.plan, now, scenario.protocol, sensor=scenario.sensor,
                               tasks=tasks)

    results = dict(pool.map(one, ids)) if pool is not None else dict(one(sid) for sid in ids)
    return {sid: results[sid] for sid in sorted(results)}


def _apply_schedule(world: WorldState, scenario: ScenarioConfig, now: int,
                    rng: np.random.Generator, recorder: _Recorder) -> WorldState:
    margin = scenario.sensor.safety_distance + INJECTION_MARGIN
    for spec in scenario.obstacles:
        if spec.remove_at == now and any(o.id == spec.obstacle_id for o in world.obstacles):
            world = remove_obstacle(world, spec.obstacle_id)
            recorder.emit(now, EntityRef.obstacle(spec.obstacle_id), EventKind.OBSTACLE_REMOVED)
    for spec in scenario.obstacles:
        if spec.step != now:
            continue
        world = _inject_spec(world, spec, rng, margin)
        placed = next(o for o in world.obstacles if o.id == spec.obstacle_id)
        recorder.emit(now, placed.ref, EventKind.OBSTACLE_INJECTED, x=placed.position[0],
                      y=placed.position[1], radius=placed.radius, kind=placed.kind.value)

    for spec in scenario.pedestrians:
        if spec.start_step == now:
            path = Path(spec.path, cyclic=spec.loop)
            ux, uy = _direction(path, 0.0)
            walker = Pedestrian(spec.pedestrian_id, path.point_at(0.0),
                                (spec.speed * ux, spec.speed * uy), path, spec.speed, spec.radius)
            world = replace(world, pedestrians=tuple(sorted(world.pedestrians + (walker,),
                                                            key=lambda p: p.id)))
    return world


def _inject_spec(world: WorldState, spec: ObstacleSpec, rng: np.random.Generator,
                 margin: float) -> WorldState:
    if spec.kind is ObstacleKind.DYNAMIC:
        assert spec.path is not None
        return inject_obstacle(world, None, spec.radius, spec.kind, rng,
                               obstacle_id=spec.obstacle_id, margin=margin,
                               path=Path(spec.path, cyclic=False), speed=spec.speed)
    position = None if spec.position == 'random' else spec.position
    return inject_obstacle(world, position, spec.radius, spec.kind, rng,
                           obstacle_id=spec.obstacle_id, margin=margin)


def _move_scripted(world: WorldState, dt: float, scenario: ScenarioConfig, now: int,
                   recorder: _Recorder) -> WorldState:
    loops = {p.pedestrian_id: p.loop for p in scenario.pedestrians}
    obstacles = []
    for o in world.obstacles:
        if o.kind is ObstacleKind.DYNAMIC and o.path is not None:
            s, position, velocity, _ = _advance_on_path(o.path, o.s, o.speed, dt, loop=False)
            o = replace(o, s=s, position=position, velocity=velocity)
            recorder.emit(now, o.ref, EventKind.MOVED, x=position[0], y=position[1],
                          speed=math.hypot(*velocity))
        obstacles.append(o)

    walkers = []
    for p in world.pedestrians:
        s, position, velocity, at_end = _advance_on_path(p.path, p.s, p.speed, dt,
                                                         loop=loops.get(p.id, False))
        recorder.emit(now, p.ref, EventKind.MOVED, x=position[0], y=position[1],
                      speed=math.hypot(*velocity))
        if at_end:
            logger.debug(f"Pedestrian {p.id} left the floor at step {now}")
            continue
        walkers.append(replace(p, s=s, position=position, velocity=velocity))
    return replace(world, obstacles=tuple(obstacles), pedestrians=tuple(walkers))


@SimUtils.performance_monitor(threshold_seconds=10.0)
def run(scenario: ScenarioConfig, seed: int, max_steps: int, *, workers: int = 1,
        order: Optional[Sequence[int]] = None) -> RunResult:
    """
    Simulate a scenario.

    Args:
        scenario: Parsed scenario
        seed: Unsigned 64-bit seed for the bus and injection generators
        max_steps: Step budget; the run also ends once every mission is done
        workers: Threads used to step agents within a step (results are merged
            by station id, so the trace does not depend on this)
        order: Optional station id order for stepping agents (same guarantee)

    Returns:
        RunResult with the sorted trace and oracle counters

    Raises:
        InvalidScenario: If the scenario does not validate or the seed is out of range
    """
    if not 0 <= seed < 2 ** 64:
        raise InvalidScenario(f"Seed must be an unsigned 64-bit integer, got {seed}")
    if max_steps < 0:
        raise InvalidScenario(f"max_steps must be non-negative, got {max_steps}")

    started = time.perf_counter()
    plan = validate_scenario(scenario)
    params: ProtocolParams = scenario.protocol
    dt = params.dt
    bus = MessageBus(scenario.bus, subsystem_rng(seed, 'bus'))
    injection_rng = subsystem_rng(seed, 'injection')
    world = _spawn_world(scenario, plan)
    tasks = TaskBoard.from_missions({sid: e.state.mission for sid, e in world.vehicles.items()})
    had_vehicles = bool(world.vehicles)
    recorder = _Recorder()
    mutex_violations = 0
    collisions = 0
    sent_total = 0
    steps = 0

    logger.info(f"Running scenario '{scenario.run.name}' on plan '{plan.name}': "
                f"{len(world.vehicles)} vehicles, seed {seed}, up to {max_steps} steps")

    pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="agent-step") \
        if workers > 1 else None
    try:
        for now in range(max_steps):
            if had_vehicles and not world.vehicles:
                break
            steps = now + 1
            world = replace(world, step=now)

            world = _apply_schedule(world, scenario, now, injection_rng, recorder)
            inboxes = bus.collect(now)
            snapshot = world.snapshot()
            scans = {sid: scan(snapshot, sid, scenario.sensor) for sid in sorted(world.vehicles)}
            outputs = _step_agents(world, inboxes, scans, now, scenario, tasks, pool, order)

            vehicles: Dict[int, VehicleEntry] = {}
            on_floor: Dict[int, VehicleEntry] = {}
            sent: List[Tuple[int, Message]] = []
            for sid, (state, outbox, motion) in outputs.items():
                before = world.vehicles[sid].state
                moved = apply_motion(state, motion, dt)
                ref = EntityRef.vehicle(sid)
                recorder.emit(now, ref, EventKind.MOVED, x=moved.position[0], y=moved.position[1],
                              heading=moved.heading, speed=moved.speed, phase=moved.phase_label)
                if moved.phase_label != before.phase_label:
                    recorder.emit(now, ref, EventKind.PHASE_CHANGED, **{
                        'from': before.phase_label, 'to': moved.phase_label})
                for k in range(moved.goals_reached - before.goals_reached):
                    goal = before.mission.goals[k]
                    recorder.emit(now, ref, EventKind.GOAL_REACHED, x=goal.x, y=goal.y,
                                  count=before.goals_reached + k + 1)
                if moved.laps_completed > before.laps_completed:
                    recorder.emit(now, ref, EventKind.CYCLE_COMPLETED, lap=moved.laps_completed)
                on_floor[sid] = replace(world.vehicles[sid], state=moved)
                if moved.done:
                    recorder.emit(now, ref, EventKind.MISSION_DONE, goals=moved.goals_reached)
                else:
                    vehicles[sid] = on_floor[sid]
                sent.extend((sid, msg) for msg in outbox)

            # Departed vehicles stay on the floor for this step's oracles.
            oracle_world = replace(world, vehicles=on_floor)
            oracle_world = _move_scripted(oracle_world, dt, scenario, now, recorder)
            world = replace(oracle_world, vehicles=vehicles)

            for a, b in collision_oracle(oracle_world):
                collisions += 1
                logger.warning(f"Collision between {a.name} and {b.name} at step {now}")
                recorder.emit(now, a, EventKind.COLLISION_DETECTED, **{'with': b.name})
            contested = mutex_oracle(oracle_world)
            if contested:
                mutex_violations += 1
                logger.error(f"Mutual exclusion violated at step {now}: {contested}")

            receivers = sorted(vehicles)
            for sid, msg in sent:
                recorder.emit(now, EntityRef.vehicle(sid), EventKind.SENT,
                              kind=message_kind(msg).name, bytes=encode_hex(msg))
            sent_total += len(sent)
            made = bus.publish(now, sent, receivers)
            for receiver in sorted(made):
                for d in made[receiver]:
                    _record_delivery(recorder, receiver, d)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    wall = time.perf_counter() - started
    trace = sort_events(recorder.events)
    logger.info(f"Run finished after {steps} steps in {wall:.2f}s: {collisions} collision(s), "
                f"{sent_total} messages, {mutex_violations} mutual exclusion violation(s)")
    return RunResult(trace, replace(world, step=steps), steps, seed, dt, mutex_violations,
                     collisions, sent_total, wall)


def _record_delivery(recorder: _Recorder, receiver: int, d: Delivery) -> None:
    recorder.emit(d.deliver_step, EntityRef.vehicle(receiver), EventKind.DELIVERED,
                  **{'from': d.sender, 'kind': message_kind(d.message).name, 'sent': d.send_step})
