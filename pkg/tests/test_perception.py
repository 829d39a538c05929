"""
Tests for the range-sensor model.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from ..core.utils import UnknownVehicle, distance
from ..sim.perception import (
    Body, EntityKind, EntityRef, ObjectClass, PerceivedObject, RiskLevel, SensorConfig,
    WorldSnapshot, classify_risk, scan, to_cpm_records,
)
from ..sim.wire_codec import ObjectId, SubCauseCode


def vehicle(station_id, position, heading=0.0, velocity=(0.0, 0.0)):
    return Body(EntityRef.vehicle(station_id), ObjectClass.IAV, position, 0.2, heading, velocity)


def obstacle(obstacle_id, position, radius=0.5):
    return Body(EntityRef.obstacle(obstacle_id), ObjectClass.OBJECT, position, radius, static=True)


def seen(distance_m, bearing, object_class=ObjectClass.IAV):
    return PerceivedObject(object_class, distance_m, bearing, 0.0, EntityRef.vehicle(99))


@pytest.fixture
def sensor():
    """Default sensor: 3 m observation, 1 m safety."""
    return SensorConfig()


class TestScan:
    """Ground-truth perception within range."""

    def test_nearest_surface_and_bearing(self, sensor):
        """Distance is measured to the body's surface and bearing is relative to heading."""
        snapshot = WorldSnapshot(0, (vehicle(1, (0.0, 0.0)), obstacle(1, (2.0, 0.0))))
        [obj] = scan(snapshot, 1, sensor)
        assert obj.object_class is ObjectClass.OBJECT
        assert obj.distance == pytest.approx(1.5)
        assert obj.bearing == 0.0
        assert obj.source_entity_id == EntityRef.obstacle(1)
        assert obj.static

    def test_out_of_range_is_invisible(self, sensor):
        """Bodies beyond the observation distance are not returned."""
        snapshot = WorldSnapshot(0, (vehicle(1, (0.0, 0.0)), vehicle(2, (4.0, 0.0))))
        assert scan(snapshot, 1, sensor) == []

    def test_exactly_at_observation_distance(self, sensor):
        """A surface exactly at the observation distance is still seen."""
        snapshot = WorldSnapshot(0, (vehicle(1, (0.0, 0.0)), obstacle(1, (3.5, 0.0))))
        assert len(scan(snapshot, 1, sensor)) == 1

    def test_sorted_by_distance_then_entity(self, sensor):
        """Returns are ordered by distance, ties broken by entity id."""
        snapshot = WorldSnapshot(0, (
            vehicle(1, (0.0, 0.0)),
            obstacle(2, (0.0, 2.0), radius=0.2),
            vehicle(3, (0.0, -2.0)),
            vehicle(2, (1.0, 0.0)),
        ))
        refs = [o.source_entity_id for o in scan(snapshot, 1, sensor)]
        assert refs == [EntityRef.vehicle(2), EntityRef.vehicle(3), EntityRef.obstacle(2)]

    def test_bearing_of_side_object(self, sensor):
        """An object to the left of a vehicle heading +x is at +90 degrees."""
        snapshot = WorldSnapshot(0, (vehicle(1, (0.0, 0.0)), vehicle(2, (0.0, 2.0))))
        [obj] = scan(snapshot, 1, sensor)
        assert obj.bearing == pytest.approx(90.0)

    def test_closing_speed(self, sensor):
        """A vehicle driving at 1 m/s toward a static obstacle closes at 1 m/s."""
        snapshot = WorldSnapshot(0, (vehicle(1, (0.0, 0.0), velocity=(1.0, 0.0)),
                                     obstacle(1, (2.0, 0.0))))
        [obj] = scan(snapshot, 1, sensor)
        assert obj.relative_speed == pytest.approx(1.0)

    def test_narrow_field_of_view(self):
        """Objects behind a 180 degree sensor are not seen."""
        sensor = SensorConfig(field_of_view=180.0)
        snapshot = WorldSnapshot(0, (vehicle(1, (0.0, 0.0)), vehicle(2, (-2.0, 0.0))))
        assert scan(snapshot, 1, sensor) == []

    def test_unknown_vehicle(self, sensor):
        """Scanning for a vehicle not in the snapshot raises."""
        with pytest.raises(UnknownVehicle):
            scan(WorldSnapshot(3, ()), 7, sensor)

    def test_near_keeps_snapshot_order(self):
        """The range filter drops distant bodies and the body itself."""
        me = vehicle(1, (0.0, 0.0))
        snapshot = WorldSnapshot(0, (obstacle(3, (0.0, 4.0), radius=1.5), me,
                                     vehicle(2, (9.0, 0.0)), vehicle(4, (1.0, 1.0))))
        assert [b.ref for b in snapshot.near(me, 3.0)] == [EntityRef.obstacle(3), EntityRef.vehicle(4)]

    def test_matches_exhaustive_scan(self, sensor):
        """On a crowded floor the scan returns exactly the bodies within range."""
        rng = np.random.default_rng(5)
        bodies = tuple(vehicle(i, (float(rng.uniform(0.0, 12.0)), float(rng.uniform(0.0, 12.0))))
                       for i in range(1, 31))
        snapshot = WorldSnapshot(0, bodies)
        for me in bodies:
            expected = sorted((max(0.0, distance(me.position, b.position) - b.radius), b.ref)
                              for b in bodies
                              if b.ref != me.ref
                              and distance(me.position, b.position) - b.radius <= sensor.observation_distance)
            got = [(o.distance, o.source_entity_id) for o in scan(snapshot, me.ref.index, sensor)]
            assert got == expected


class TestClassifyRisk:
    """Risk levels and DENM sub-causes."""

    def test_none_beyond_observation(self, sensor):
        assert classify_risk(seen(3.5, 0.0), sensor).level is RiskLevel.NONE

    def test_observe_between_thresholds(self, sensor):
        """Between safety and observation distance the object is only observed."""
        assert classify_risk(seen(2.0, 0.0), sensor).level is RiskLevel.OBSERVE
        assert classify_risk(seen(3.0, 0.0), sensor).level is RiskLevel.OBSERVE

    def test_alert_at_safety_distance(self, sensor):
        """The safety distance itself raises an alert."""
        risk = classify_risk(seen(1.0, 0.0), sensor)
        assert risk.is_alert
        assert risk.sub_cause is SubCauseCode.LONGITUDINAL_COLLISION_RISK

    @pytest.mark.parametrize("bearing,sub_cause", [
        (0.0, SubCauseCode.LONGITUDINAL_COLLISION_RISK),
        (-44.9, SubCauseCode.LONGITUDINAL_COLLISION_RISK),
        (45.0, SubCauseCode.LATERAL_COLLISION_RISK),
        (-90.0, SubCauseCode.LATERAL_COLLISION_RISK),
        (135.0, SubCauseCode.CROSSING_COLLISION_RISK),
        (180.0, SubCauseCode.CROSSING_COLLISION_RISK),
    ])
    def test_sub_cause_by_bearing(self, sensor, bearing, sub_cause):
        """Bearing sectors pick longitudinal, lateral or crossing risk."""
        assert classify_risk(seen(0.5, bearing), sensor).sub_cause is sub_cause

    def test_pedestrian_is_vulnerable_user(self, sensor):
        """Pedestrians in the safety zone are vulnerable users at any bearing."""
        risk = classify_risk(seen(0.5, 170.0, ObjectClass.PEDESTRIAN), sensor)
        assert risk.sub_cause is SubCauseCode.INVOLVING_VULNERABLE_USER


class TestCpmRecords:
    """Perceived objects as wire records."""

    def test_object_ids(self):
        records = to_cpm_records([seen(0.5, 10.0, ObjectClass.PEDESTRIAN),
                                  seen(1.0, 20.0, ObjectClass.IAV),
                                  seen(1.5, 30.0, ObjectClass.OBJECT)])
        assert [r.object_id for r in records] == [ObjectId.PEDESTRIAN, ObjectId.IAV, ObjectId.OBJECT]
        assert [r.acceleration for r in records] == [0.0, 0.0, 0.0]

    def test_minus_180_yaw_is_folded(self):
        """A bearing of -180 is reported as +180."""
        [record] = to_cpm_records([seen(0.5, -180.0)])
        assert record.yaw_angle == 180.0

    def test_truncated_to_255(self):
        """At most 255 records are reported."""
        records = to_cpm_records([seen(0.01 * i, 0.0) for i in range(300)])
        assert len(records) == 255
        assert records[-1].distance == pytest.approx(2.54)


class TestSensorConfig:
    """Sensor threshold validation."""

    def test_safety_below_observation(self):
        with pytest.raises(ValidationError):
            SensorConfig(safety_distance=3.0, observation_distance=3.0)

    def test_longitudinal_cone_fixed(self):
        with pytest.raises(ValidationError):
            SensorConfig(longitudinal_cone=30.0)

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            SensorConfig(obseration_distance=4.0)

    def test_enum_by_name(self):
        """Sensor type and confidence accept enum names or numbers."""
        config = SensorConfig(sensor_type="lidar", sensor_confidence="2")
        assert config.sensor_type == 1
        assert config.sensor_confidence == 2

    def test_unknown_enum_name(self):
        with pytest.raises(ValidationError):
            SensorConfig(sensor_type="radar")


class TestEntityRef:
    """Entity names used in traces."""

    @pytest.mark.parametrize("ref,name", [
        (EntityRef.vehicle(12), "12"),
        (EntityRef.obstacle(3), "obs3"),
        (EntityRef.pedestrian(1), "ped1"),
    ])
    def test_name_and_parse(self, ref, name):
        assert ref.name == name
        assert EntityRef.parse(name) == ref

    def test_parse_rejects_garbage(self):
        with pytest.raises(ValueError):
            EntityRef.parse("robot")

    def test_vehicles_sort_first(self):
        """Vehicles order before obstacles, obstacles before pedestrians."""
        refs = sorted([EntityRef.pedestrian(0), EntityRef.obstacle(0), EntityRef.vehicle(5)])
        assert [r.kind for r in refs] == [EntityKind.VEHICLE, EntityKind.OBSTACLE, EntityKind.PEDESTRIAN]
