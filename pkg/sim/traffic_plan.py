"""
Warehouse traffic plan: waypoints joined by one-way lanes, intersection zones,
cyclic routes and spawn points, plus the polyline arithmetic vehicles use to
follow them.

The built-in benchmark plan is a 50 m x 30 m floor on a 10 m aisle grid, drawn
with the origin at the top-left corner and y growing downward. Ten vehicles
start on the central aisle and run one of three loops (red, blue, yellow)
through four intersections.
"""

import bisect
import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from ..core.utils import (
    InvalidScenario, OffLane, OffRoute, Point, UnknownIntersection, distance, heading_degrees,
)

logger = logging.getLogger(__name__)

BENCHMARK_WIDTH = 50.0
BENCHMARK_HEIGHT = 30.0
DEFAULT_LANE_WIDTH = 2.0
DEFAULT_CORE_RADIUS = 2.0
DEFAULT_APPROACH_RADIUS = 6.0


class Zone(str, Enum):
    OUTSIDE = "OUTSIDE"
    APPROACH = "APPROACH"
    CORE = "CORE"


class RouteRole(str, Enum):
    """Route roles of the benchmark plan."""
    RED = "red"
    BLUE = "blue"
    YELLOW = "yellow"


@dataclass(frozen=True)
class Waypoint:
    id: int
    x: float
    y: float

    @property
    def position(self) -> Point:
        return (self.x, self.y)


@dataclass(frozen=True)
class Lane:
    start: int
    end: int
    width: float = DEFAULT_LANE_WIDTH


@dataclass(frozen=True)
class Intersection:
    id: int
    center: Point
    core_radius: float = DEFAULT_CORE_RADIUS
    approach_radius: float = DEFAULT_APPROACH_RADIUS

    def __post_init__(self) -> None:
        if not 0 <= self.id <= 255:
            raise InvalidScenario(f"Intersection id {self.id} outside [0, 255]")
        if not 0.0 < self.core_radius < self.approach_radius:
            raise InvalidScenario(
                f"Intersection {self.id}: need 0 < core_radius < approach_radius, "
                f"got {self.core_radius} and {self.approach_radius}"
            )


@dataclass(frozen=True)
class Route:
    role: str
    waypoint_ids: Tuple[int, ...]


class Path:
    """
    Polyline followed by arc length.

    Cyclic paths wrap any arc length modulo their length; open paths clamp to
    their ends. Arc positions handed around by agents are unwrapped (they grow
    monotonically over laps) and only reduced here.
    """

    def __init__(self, points: Sequence[Point], cyclic: bool):
        pts = [tuple(map(float, p)) for p in points]
        if cyclic and pts and pts[0] != pts[-1]:
            pts.append(pts[0])
        # Drop repeated points so every segment has a direction.
        cleaned: List[Tuple[float, ...]] = []
        for p in pts:
            if not cleaned or p != cleaned[-1]:
                cleaned.append(p)
        if len(cleaned) < 2:
            raise InvalidScenario("A path needs at least two distinct points")

        self.cyclic = cyclic
        self.points = np.asarray(cleaned, dtype=float)
        deltas = np.diff(self.points, axis=0)
        self._lengths = np.hypot(deltas[:, 0], deltas[:, 1])
        self._units = deltas / self._lengths[:, None]
        self._cum = np.concatenate(([0.0], np.cumsum(self._lengths)))
        self.length = float(self._cum[-1])
        # Plain-float copies for the scalar lookups done every step.
        self._cum_list: List[float] = self._cum.tolist()
        self._length_list: List[float] = self._lengths.tolist()
        self._starts: List[Tuple[float, float]] = [tuple(p) for p in self.points.tolist()]
        self._unit_list: List[Tuple[float, float]] = [tuple(u) for u in self._units.tolist()]
        self._crossings: Dict[int, List[Tuple[float, int]]] = {}

    @property
    def segment_count(self) -> int:
        return len(self._lengths)

    def wrap(self, s: float) -> float:
        if self.cyclic:
            return s % self.length
        return min(max(s, 0.0), self.length)

    def _segment(self, s: float) -> int:
        index = bisect.bisect_right(self._cum_list, s) - 1
        return min(max(index, 0), self.segment_count - 1)

    def point_at(self, s: float) -> Point:
        s = self.wrap(s)
        i = self._segment(s)
        (x, y), (ux, uy) = self._starts[i], self._unit_list[i]
        t = s - self._cum_list[i]
        return (x + ux * t, y + uy * t)

    def heading_at(self, s: float) -> float:
        ux, uy = self._unit_list[self._segment(self.wrap(s))]
        return heading_degrees(ux, uy)

    def normal_at(self, s: float) -> Point:
        """Unit normal to the left of the direction of travel."""
        ux, uy = self._unit_list[self._segment(self.wrap(s))]
        return (-uy, ux)

    def pose_at(self, s: float, offset: float = 0.0) -> Point:
        """Position at arc length s shifted laterally by offset (left positive)."""
        x, y = self.point_at(s)
        if offset == 0.0:
            return (x, y)
        nx_, ny_ = self.normal_at(s)
        return (x + offset * nx_, y + offset * ny_)

    @property
    def vertex_arcs(self) -> Tuple[float, ...]:
        """Arc position of every distinct vertex, in path order."""
        cum = self._cum[:-1] if self.cyclic else self._cum
        return tuple(float(c) for c in cum)

    def _closest(self, point: Point, segments: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Closest arc position, signed lateral offset and distance per segment."""
        p = np.asarray(point, dtype=float)
        starts = self.points[segments]
        units = self._units[segments]
        rel = p - starts
        t = np.clip(np.einsum('ij,ij->i', rel, units), 0.0, self._lengths[segments])
        foot = starts + units * t[:, None]
        diff = p - foot
        dist = np.hypot(diff[:, 0], diff[:, 1])
        lateral = units[:, 0] * diff[:, 1] - units[:, 1] * diff[:, 0]
        return self._cum[segments] + t, lateral, dist

    def _closest_arc(self, point: Point, i: int) -> float:
        (x, y), (ux, uy) = self._starts[i], self._unit_list[i]
        t = (point[0] - x) * ux + (point[1] - y) * uy
        return self._cum_list[i] + min(max(t, 0.0), self._length_list[i])

    def project(self, point: Point, heading: Optional[float] = None) -> Tuple[float, float, float]:
        """
        Project a point onto the path.

        Returns:
            (arc position, signed lateral offset, distance). When several
            segments are equally close the one whose direction best matches
            ``heading`` wins.
        """
        arcs, lateral, dist = self._closest(point, np.arange(self.segment_count))
        best = float(dist.min())
        candidates = np.flatnonzero(dist <= best + 1e-9)
        choice = int(candidates[0])
        if heading is not None and len(candidates) > 1:
            def misalignment(i: int) -> float:
                seg_heading = heading_degrees(float(self._units[i][0]), float(self._units[i][1]))
                return abs((seg_heading - heading + 180.0) % 360.0 - 180.0)
            choice = min(candidates.tolist(), key=misalignment)
        return float(arcs[choice]), float(lateral[choice]), float(dist[choice])

    def locate_ahead(self, point: Point, s: float,
                     lookahead: float) -> Optional[Tuple[float, float, float]]:
        """
        Locate a point relative to the stretch [s, s + lookahead] of the path.

        Returns:
            (arc distance ahead of s, signed lateral offset, distance) of the
            closest point on that stretch, or None when the stretch is empty.
        """
        if self.cyclic:
            start, end = s, s + lookahead
            origin = math.floor(start / self.length) * self.length
        else:
            start = min(max(s, 0.0), self.length)
            end = min(start + lookahead, self.length)
            origin = 0.0
        if end <= start:
            return None

        best: Optional[Tuple[float, float, float]] = None
        # One pass per lap the window touches.
        while origin < end:
            lo = max(start - origin, 0.0)
            hi = min(end - origin, self.length)
            if hi > lo:
                for i in range(self._segment(lo), self._segment(hi) + 1):
                    a = min(max(self._closest_arc(point, i), lo), hi)
                    px, py = self.point_at(a)
                    d = math.hypot(point[0] - px, point[1] - py)
                    if best is None or d < best[2] - 1e-12:
                        nx_, ny_ = self.normal_at(a)
                        lat = (point[0] - px) * nx_ + (point[1] - py) * ny_
                        best = (origin + a - start, lat, d)
            if not self.cyclic:
                break
            origin += self.length
        if best is None:
            return None
        return best

    def arc_positions_near(self, center: Point, radius: float) -> List[float]:
        """Arc positions (one per pass) where the path comes closest to center within radius."""
        arcs, _, dist = self._closest(center, np.arange(self.segment_count))
        hits = sorted((float(a), float(d)) for a, d in zip(arcs, dist) if d <= radius)
        passes: List[Tuple[float, float]] = []
        for arc, d in hits:
            if passes and arc - passes[-1][0] <= 2.0 * radius + 1e-9:
                if d < passes[-1][1]:
                    passes[-1] = (arc, d)
                continue
            passes.append((arc, d))
        if self.cyclic and len(passes) > 1:
            first, last = passes[0], passes[-1]
            if first[0] + self.length - last[0] <= 2.0 * radius + 1e-9:
                passes.pop() if last[1] >= first[1] else passes.pop(0)
        return [arc for arc, _ in passes]

    def crossings(self, plan: 'TrafficPlan') -> List[Tuple[float, int]]:
        """(arc position, intersection id) of every pass through an intersection core, by arc."""
        cached = self._crossings.get(id(plan))
        if cached is not None:
            return cached
        found = [(arc, inter.id)
                 for inter in plan.intersections
                 for arc in self.arc_positions_near(inter.center, inter.core_radius)]
        self._crossings[id(plan)] = sorted(found)
        return self._crossings[id(plan)]


@dataclass(frozen=True)
class TrafficPlan:
    waypoints: Tuple[Waypoint, ...]
    lanes: Tuple[Lane, ...]
    intersections: Tuple[Intersection, ...]
    routes: Tuple[Route, ...]
    spawn_points: Tuple[int, ...]
    name: str = "inline"
    graph: Any = field(init=False, repr=False, compare=False)
    _paths: Dict[str, Path] = field(init=False, repr=False, compare=False, default_factory=dict)
    _index: Dict[str, Dict[Any, Any]] = field(init=False, repr=False, compare=False,
                                              default_factory=dict)
    _lane_width: float = field(init=False, repr=False, compare=False, default=DEFAULT_LANE_WIDTH)

    def __post_init__(self) -> None:
        # First entry wins on duplicate ids; validate_plan reports them.
        for name, items, key in (('waypoint', self.waypoints, 'id'),
                                 ('intersection', self.intersections, 'id'),
                                 ('route', self.routes, 'role')):
            table: Dict[Any, Any] = {}
            for item in items:
                table.setdefault(getattr(item, key), item)
            self._index[name] = table
        object.__setattr__(self, '_lane_width',
                           min((lane.width for lane in self.lanes), default=DEFAULT_LANE_WIDTH))
        graph = nx.DiGraph()
        for wp in self.waypoints:
            graph.add_node(wp.id, pos=wp.position)
        for lane in self.lanes:
            a, b = self.waypoint(lane.start), self.waypoint(lane.end)
            graph.add_edge(lane.start, lane.end, width=lane.width,
                           length=distance(a.position, b.position))
        object.__setattr__(self, 'graph', graph)

    def waypoint(self, waypoint_id: int) -> Waypoint:
        wp = self._index['waypoint'].get(waypoint_id)
        if wp is not None:
            return wp
        raise InvalidScenario(f"Unknown waypoint {waypoint_id}")

    def intersection(self, intersection_id: int) -> Intersection:
        inter = self._index['intersection'].get(intersection_id)
        if inter is not None:
            return inter
        raise UnknownIntersection(f"Intersection {intersection_id} is not in the plan")

    def route(self, role: str) -> Route:
        r = self._index['route'].get(role)
        if r is not None:
            return r
        raise InvalidScenario(f"Unknown route '{role}'")

    @property
    def lane_width(self) -> float:
        return self._lane_width

    def route_path(self, role: str) -> Path:
        """Cyclic polyline of a route (cached)."""
        if role not in self._paths:
            route = self.route(role)
            points = [self.waypoint(w).position for w in route.waypoint_ids]
            self._paths[role] = Path(points, cyclic=True)
        return self._paths[role]

    def lane_segments(self) -> List[Tuple[Lane, Point, Point]]:
        return [(lane, self.waypoint(lane.start).position, self.waypoint(lane.end).position)
                for lane in self.lanes]


def validate_plan(plan: TrafficPlan) -> None:
    """
    Check plan invariants.

    Raises:
        InvalidScenario: If lanes reference unknown waypoints, a route hop has
            no lane, route waypoints are disconnected, or an intersection zone
            holds fewer than two lanes
    """
    ids = [wp.id for wp in plan.waypoints]
    if len(ids) != len(set(ids)):
        raise InvalidScenario("Waypoint ids must be unique")
    inter_ids = [i.id for i in plan.intersections]
    if len(inter_ids) != len(set(inter_ids)):
        raise InvalidScenario("Intersection ids must be unique")
    for lane in plan.lanes:
        if lane.width <= 0:
            raise InvalidScenario(f"Lane {lane.start}->{lane.end} has non-positive width")

    referenced = set()
    for route in plan.routes:
        if len(route.waypoint_ids) < 2:
            raise InvalidScenario(f"Route '{route.role}' needs at least two waypoints")
        hops = zip(route.waypoint_ids, route.waypoint_ids[1:] + route.waypoint_ids[:1])
        for a, b in hops:
            if not plan.graph.has_edge(a, b):
                raise InvalidScenario(f"Route '{route.role}': no lane from {a} to {b}")
        referenced.update(route.waypoint_ids)

    if referenced and not nx.is_weakly_connected(plan.graph.subgraph(referenced)):
        raise InvalidScenario("Route waypoints do not form a connected lane graph")

    for spawn in plan.spawn_points:
        plan.waypoint(spawn)

    for inter in plan.intersections:
        crossing = sum(
            1 for _, a, b in plan.lane_segments()
            if _segment_distance(inter.center, a, b) <= inter.core_radius
        )
        if crossing < 2:
            raise InvalidScenario(
                f"Intersection {inter.id} zone contains {crossing} lane(s), need at least 2"
            )


def _segment_distance(p: Point, a: Point, b: Point) -> float:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    length_sq = dx * dx + dy * dy
    if length_sq == 0.0:
        return distance(p, a)
    t = max(0.0, min(1.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / length_sq))
    return math.hypot(p[0] - (ax + t * dx), p[1] - (ay + t * dy))


def build_benchmark_plan() -> TrafficPlan:
    """
    Build the built-in benchmark plan.

    Returns:
        TrafficPlan with a central aisle (y = 10) holding ten spawn points, the
        red top-left loop, the blue loop descending the aisle at x = 30, the
        yellow big loop (clockwise in the drawing frame) and four intersections
    """
    corners = {
        1: (0.0, 0.0),    # A
        2: (20.0, 0.0),   # B
        3: (0.0, 10.0),   # C
        4: (20.0, 10.0),  # D
        5: (30.0, 10.0),  # E
        6: (50.0, 10.0),  # F
        7: (0.0, 30.0),   # G
        8: (30.0, 30.0),  # H
        9: (50.0, 30.0),  # I
    }
    spawn_ids = tuple(range(10, 20))
    spawn_xs = [round(2.5 + 1.45 * i, 2) for i in range(10)]

    waypoints = [Waypoint(i, x, y) for i, (x, y) in corners.items()]
    waypoints += [Waypoint(sid, x, 10.0) for sid, x in zip(spawn_ids, spawn_xs)]

    aisle = (3,) + spawn_ids + (4,)
    chains = [
        aisle,
        (4, 5, 6),
        (4, 2, 1, 3),
        (5, 8, 7, 3),
        (6, 9, 8),
    ]
    lanes = [Lane(a, b) for chain in chains for a, b in zip(chain, chain[1:])]

    routes = (
        Route(RouteRole.RED.value, aisle + (2, 1)),
        Route(RouteRole.BLUE.value, aisle + (5, 8, 7)),
        Route(RouteRole.YELLOW.value, aisle + (5, 6, 9, 8, 7)),
    )
    intersections = (
        Intersection(1, corners[3]),
        Intersection(2, corners[4]),
        Intersection(3, corners[5]),
        Intersection(4, corners[8]),
    )

    plan = TrafficPlan(
        waypoints=tuple(waypoints),
        lanes=tuple(lanes),
        intersections=intersections,
        routes=routes,
        spawn_points=spawn_ids,
        name="benchmark",
    )
    validate_plan(plan)
    logger.debug(f"Built benchmark plan: {len(waypoints)} waypoints, {len(lanes)} lanes")
    return plan


def zone_of(plan: TrafficPlan, intersection_id: int, position: Point) -> Zone:
    """
    Classify a position against one intersection's concentric zones.

    Raises:
        UnknownIntersection: If the id is not part of the plan
    """
    inter = plan.intersection(intersection_id)
    d = distance(position, inter.center)
    if d <= inter.core_radius:
        return Zone.CORE
    if d <= inter.approach_radius:
        return Zone.APPROACH
    return Zone.OUTSIDE


def advance_along(route: Route, plan: TrafficPlan, position: Point, heading: float,
                  distance_m: float) -> Tuple[Point, float]:
    """
    Move a given arc length along a route, wrapping around the loop.

    Args:
        route: Route being followed
        plan: Plan owning the route
        position: Current position, within lane_width/2 of the route polyline
        heading: Current heading, used to pick the segment at bends
        distance_m: Arc length to travel

    Returns:
        (new position, heading of the segment reached)

    Raises:
        OffRoute: If the position is off the route's lane corridor
    """
    path = plan.route_path(route.role)
    s, _, off = path.project(position, heading)
    if off > plan.lane_width / 2.0 + 1e-9:
        raise OffRoute(
            f"Position {position} is {off:.3f} m from route '{route.role}'",
            context={'route': route.role, 'position': position},
        )
    if distance_m == 0.0:
        return position, heading
    target = s + distance_m
    return path.point_at(target), path.heading_at(target)


def lane_at(plan: TrafficPlan, position: Point) -> Lane:
    """
    Lane whose corridor contains a position.

    Raises:
        OffLane: If no lane corridor contains the position
    """
    best: Optional[Tuple[float, Lane]] = None
    for lane, a, b in plan.lane_segments():
        d = _segment_distance(position, a, b)
        if d <= lane.width / 2.0 and (best is None or d < best[0]):
            best = (d, lane)
    if best is None:
        raise OffLane(f"Position {position} is outside every lane", context={'position': position})
    return best[1]


def random_lane_point(plan: TrafficPlan, rng: np.random.Generator,
                      reject: Optional[Callable[[Point], bool]] = None,
                      keep_out: float = 4.0, max_draws: int = 1000) -> Point:
    """
    Draw a point uniformly over total lane centreline arc length.

    Points within keep_out of any waypoint with a bend or junction, inside any
    approach zone, or refused by ``reject`` are redrawn.

    Raises:
        InvalidScenario: If no acceptable point is found within max_draws
    """
    segments = plan.lane_segments()
    lengths = np.array([distance(a, b) for _, a, b in segments])
    cum = np.cumsum(lengths)
    total = float(cum[-1])
    junctions = [wp.position for wp in plan.waypoints
                 if plan.graph.in_degree(wp.id) + plan.graph.out_degree(wp.id) != 2
                 or _is_bend(plan, wp.id)]

    for _ in range(max_draws):
        u = float(rng.uniform(0.0, total))
        index = min(int(np.searchsorted(cum, u, side='right')), len(segments) - 1)
        _, a, b = segments[index]
        start = float(cum[index] - lengths[index])
        t = (u - start) / float(lengths[index])
        point = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
        if any(distance(point, j) < keep_out for j in junctions):
            continue
        if any(distance(point, i.center) <= i.approach_radius for i in plan.intersections):
            continue
        if reject is not None and reject(point):
            continue
        return point
    raise InvalidScenario(f"No free lane point found after {max_draws} draws")


def _is_bend(plan: TrafficPlan, waypoint_id: int) -> bool:
    preds = list(plan.graph.predecessors(waypoint_id))
    succs = list(plan.graph.successors(waypoint_id))
    if len(preds) != 1 or len(succs) != 1:
        return True
    here = plan.waypoint(waypoint_id).position
    before = plan.waypoint(preds[0]).position
    after = plan.waypoint(succs[0]).position
    h_in = heading_degrees(here[0] - before[0], here[1] - before[1])
    h_out = heading_degrees(after[0] - here[0], after[1] - here[1])
    return abs(h_in - h_out) > 1e-6


def describe(plan: TrafficPlan) -> Dict[str, Any]:
    """JSON-friendly summary of a plan."""
    return {
        'name': plan.name,
        'waypoints': len(plan.waypoints),
        'lanes': len(plan.lanes),
        'intersections': [
            {'id': i.id, 'center': list(i.center), 'core_radius': i.core_radius,
             'approach_radius': i.approach_radius}
            for i in plan.intersections
        ],
        'routes': {r.role: {'waypoints': list(r.waypoint_ids),
                            'length_m': round(plan.route_path(r.role).length, 3)}
                   for r in plan.routes},
        'spawn_points': [list(plan.waypoint(s).position) for s in plan.spawn_points],
    }
