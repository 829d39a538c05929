"""
Range-sensor model: what each vehicle perceives around it and how risky it is.

Perception is ground truth within range. There is no occlusion or noise; a scan
returns every other body whose nearest surface is within the observation
distance, with exact range and bearing.
"""

import math
import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from ..core.utils import Point, UnknownVehicle, distance, relative_bearing
from .wire_codec import (
    MAX_PERCEIVED_OBJECTS, ObjectId, PerceivedObjectRecord, SensorConfidence, SensorType,
    SubCauseCode,
)

logger = logging.getLogger(__name__)


class ObjectClass(str, Enum):
    PEDESTRIAN = "PEDESTRIAN"
    IAV = "IAV"
    OBJECT = "OBJECT"


class RiskLevel(str, Enum):
    NONE = "NONE"
    OBSERVE = "OBSERVE"
    ALERT = "ALERT"


@dataclass(frozen=True)
class Risk:
    level: RiskLevel
    sub_cause: Optional[SubCauseCode] = None

    @property
    def is_alert(self) -> bool:
        return self.level is RiskLevel.ALERT


NO_RISK = Risk(RiskLevel.NONE)
OBSERVE = Risk(RiskLevel.OBSERVE)


class SensorConfig(BaseModel):
    """Sensing thresholds and the identity of the sensor reported in CPMs."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    observation_distance: float = 3.0
    safety_distance: float = 1.0
    field_of_view: float = 360.0
    longitudinal_cone: float = 45.0
    lateral_boundary: float = 135.0
    sensor_type: SensorType = SensorType.LIDAR
    sensor_confidence: SensorConfidence = SensorConfidence.HIGH

    @field_validator('sensor_type', 'sensor_confidence', mode='before')
    @classmethod
    def _enum_by_name(cls, value: object, info: Any) -> object:
        # Scenario files may name the code (LIDAR) or give its number.
        if isinstance(value, str):
            text = value.strip()
            if text.isdigit():
                return int(text)
            enum = SensorType if info.field_name == 'sensor_type' else SensorConfidence
            try:
                return enum[text.upper()]
            except KeyError:
                raise ValueError(f"unknown {info.field_name} '{text}'")
        return value

    @model_validator(mode='after')
    def _check_thresholds(self) -> 'SensorConfig':
        if not 0.0 < self.safety_distance < self.observation_distance:
            raise ValueError(
                f"need 0 < safety_distance < observation_distance, got "
                f"{self.safety_distance} and {self.observation_distance}"
            )
        if self.longitudinal_cone != 45.0:
            raise ValueError("longitudinal_cone must be 45 degrees")
        if not self.longitudinal_cone < self.lateral_boundary <= 180.0:
            raise ValueError("lateral_boundary must lie in (longitudinal_cone, 180]")
        if not 0.0 < self.field_of_view <= 360.0:
            raise ValueError("field_of_view must lie in (0, 360]")
        return self


class EntityKind(int, Enum):
    """Entity families, in trace sort order."""
    VEHICLE = 0
    OBSTACLE = 1
    PEDESTRIAN = 2


@dataclass(frozen=True, order=True)
class EntityRef:
    """Internal identity of a body in the world (never transmitted)."""

    kind: EntityKind
    index: int

    @classmethod
    def vehicle(cls, station_id: int) -> 'EntityRef':
        return cls(EntityKind.VEHICLE, station_id)

    @classmethod
    def obstacle(cls, obstacle_id: int) -> 'EntityRef':
        return cls(EntityKind.OBSTACLE, obstacle_id)

    @classmethod
    def pedestrian(cls, pedestrian_id: int) -> 'EntityRef':
        return cls(EntityKind.PEDESTRIAN, pedestrian_id)

    @property
    def name(self) -> str:
        if self.kind is EntityKind.VEHICLE:
            return str(self.index)
        prefix = 'obs' if self.kind is EntityKind.OBSTACLE else 'ped'
        return f"{prefix}{self.index}"

    @classmethod
    def parse(cls, name: str) -> 'EntityRef':
        """Inverse of ``name``; raises ValueError on anything else."""
        for prefix, kind in (('obs', EntityKind.OBSTACLE), ('ped', EntityKind.PEDESTRIAN)):
            if name.startswith(prefix):
                return cls(kind, int(name[len(prefix):]))
        if not name.isdigit():
            raise ValueError(f"Not an entity name: {name!r}")
        return cls(EntityKind.VEHICLE, int(name))


@dataclass(frozen=True)
class Body:
    ref: EntityRef
    object_class: ObjectClass
    position: Point
    radius: float
    heading: float = 0.0
    velocity: Point = (0.0, 0.0)
    static: bool = False


@dataclass(frozen=True)
class WorldSnapshot:
    """Immutable view of every body at the start of a step."""

    step: int
    bodies: Tuple[Body, ...]

    @cached_property
    def _rows(self) -> Dict[EntityRef, int]:
        rows: Dict[EntityRef, int] = {}
        for row, body in enumerate(self.bodies):
            rows.setdefault(body.ref, row)
        return rows

    @cached_property
    def _gaps(self) -> np.ndarray:
        """Centre of row body to surface of column body, for every pair."""
        positions = np.array([b.position for b in self.bodies], dtype=float).reshape(-1, 2)
        radii = np.array([b.radius for b in self.bodies], dtype=float)
        dx = positions[None, :, 0] - positions[:, None, 0]
        dy = positions[None, :, 1] - positions[:, None, 1]
        return np.hypot(dx, dy) - radii[None, :]

    def vehicle(self, station_id: int) -> Body:
        row = self._rows.get(EntityRef.vehicle(station_id))
        if row is not None:
            return self.bodies[row]
        raise UnknownVehicle(f"Vehicle {station_id} is not in the snapshot at step {self.step}",
                             context={'station_id': station_id, 'step': self.step})

    def near(self, body: Body, reach: float) -> Iterable[Body]:
        """
        Other bodies whose surface may lie within reach of a body's centre.

        A coarse filter in snapshot order: callers still measure each
        candidate exactly.
        """
        row = self._rows.get(body.ref)
        if row is None or self.bodies[row] is not body:
            return (b for b in self.bodies
                    if b.ref != body.ref and distance(body.position, b.position) - b.radius <= reach + 1e-6)
        rows = np.flatnonzero(self._gaps[row] <= reach + 1e-6)
        return (self.bodies[i] for i in rows.tolist() if self.bodies[i].ref != body.ref)


@dataclass(frozen=True)
class PerceivedObject:
    """
    One sensor return.

    ``distance`` is measured from the sensing vehicle's centre to the nearest
    surface of the body. ``source_entity_id``, ``radius`` and ``position`` are
    internal and are never put on the wire.
    """

    object_class: ObjectClass
    distance: float
    bearing: float
    relative_speed: float
    source_entity_id: EntityRef
    radius: float = 0.0
    position: Point = (0.0, 0.0)
    static: bool = False

    def __post_init__(self) -> None:
        if self.distance < 0.0:
            raise ValueError(f"distance must be >= 0, got {self.distance}")


def _closing_speed(me: Body, other: Body) -> float:
    dx = other.position[0] - me.position[0]
    dy = other.position[1] - me.position[1]
    norm = math.hypot(dx, dy)
    if norm == 0.0:
        return 0.0
    rvx = other.velocity[0] - me.velocity[0]
    rvy = other.velocity[1] - me.velocity[1]
    return -(rvx * dx + rvy * dy) / norm


def scan(snapshot: WorldSnapshot, vehicle_id: int, config: SensorConfig) -> List[PerceivedObject]:
    """
    Perceive every other body within observation distance of a vehicle.

    Args:
        snapshot: World at the start of the step
        vehicle_id: Station id of the sensing vehicle
        config: Sensor thresholds

    Returns:
        Perceived objects sorted by ascending distance, ties by entity id

    Raises:
        UnknownVehicle: If the vehicle is not in the snapshot
    """
    me = snapshot.vehicle(vehicle_id)
    seen: List[PerceivedObject] = []
    half_fov = config.field_of_view / 2.0
    for body in snapshot.near(me, config.observation_distance):
        centre = distance(me.position, body.position)
        surface = max(0.0, centre - body.radius)
        if surface > config.observation_distance:
            continue
        bearing = relative_bearing(me.position, me.heading, body.position) if centre > 0.0 else 0.0
        if abs(bearing) > half_fov:
            continue
        seen.append(PerceivedObject(
            object_class=body.object_class,
            distance=surface,
            bearing=bearing,
            relative_speed=_closing_speed(me, body),
            source_entity_id=body.ref,
            radius=body.radius,
            position=body.position,
            static=body.static,
        ))
    seen.sort(key=lambda o: (o.distance, o.source_entity_id))
    return seen


def classify_risk(obj: PerceivedObject, config: SensorConfig) -> Risk:
    """Collision risk of a perceived object under the sensor thresholds."""
    if obj.distance > config.observation_distance:
        return NO_RISK
    if obj.distance > config.safety_distance:
        return OBSERVE
    if obj.object_class is ObjectClass.PEDESTRIAN:
        return Risk(RiskLevel.ALERT, SubCauseCode.INVOLVING_VULNERABLE_USER)
    magnitude = abs(obj.bearing)
    if magnitude < config.longitudinal_cone:
        return Risk(RiskLevel.ALERT, SubCauseCode.LONGITUDINAL_COLLISION_RISK)
    if magnitude < config.lateral_boundary:
        return Risk(RiskLevel.ALERT, SubCauseCode.LATERAL_COLLISION_RISK)
    return Risk(RiskLevel.ALERT, SubCauseCode.CROSSING_COLLISION_RISK)


_OBJECT_IDS = {
    ObjectClass.PEDESTRIAN: ObjectId.PEDESTRIAN,
    ObjectClass.IAV: ObjectId.IAV,
    ObjectClass.OBJECT: ObjectId.OBJECT,
}


def to_cpm_records(objects: Iterable[PerceivedObject]) -> Tuple[PerceivedObjectRecord, ...]:
    """Wire records for perceived objects, nearest first, at most 255."""
    records = [
        PerceivedObjectRecord(
            object_id=int(_OBJECT_IDS[obj.object_class]),
            distance=float(obj.distance),
            acceleration=0.0,
            yaw_angle=float(obj.bearing) if obj.bearing != -180.0 else 180.0,
        )
        for obj in objects
    ]
    if len(records) > MAX_PERCEIVED_OBJECTS:
        logger.debug(f"Truncating CPM from {len(records)} to {MAX_PERCEIVED_OBJECTS} objects")
    return tuple(records[:MAX_PERCEIVED_OBJECTS])
