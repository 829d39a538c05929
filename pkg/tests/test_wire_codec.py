"""
Tests for the binary message codec.
"""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from ..core.utils import BadEnum, InvariantViolation, TrailingBytes, Truncated, UnknownMessageId
from ..sim.wire_codec import (
    AckMcmMessage, CamMessage, CauseCode, CpmMessage, DenmMessage, DenmMessageType, Direction,
    InformationQuality, ItsPduHeader, ManagementContainer, ManeuverContainer, McmMessage,
    MessageId, ObjectId, PerceivedObjectRecord, SensorConfidence, SensorInformation, SensorType,
    SituationContainer, StationType, SubCauseCode, decode, decode_hex, encode, encode_hex,
    generation_time_for, make_header, message_kind,
)

FIXTURES = Path(__file__).parent / "fixtures"


def golden_messages():
    """One message per type, matching the hex dumps in tests/fixtures."""
    return {
        'cam': CamMessage(make_header(MessageId.CAM, 7), 100, int(StationType.IAV), (1.0, 2.0)),
        'denm': DenmMessage(
            make_header(MessageId.DENM, 7), int(DenmMessageType.TRIGGER), int(StationType.IAV),
            ManagementContainer(1000, 0.5, 5),
            SituationContainer(int(CauseCode.COLLISION_RISK),
                               int(SubCauseCode.LONGITUDINAL_COLLISION_RISK),
                               int(InformationQuality.LOWEST)),
        ),
        'cpm': CpmMessage(
            make_header(MessageId.CPM, 3), 500, int(StationType.IAV), (10.0, 0.0),
            SensorInformation(int(SensorType.LIDAR), int(SensorConfidence.HIGH)),
            (PerceivedObjectRecord(int(ObjectId.OBJECT), 1.5, 0.0, -90.0),),
        ),
        'mcm': McmMessage(make_header(MessageId.MCM, 4), 0, int(StationType.IAV), (20.0, 10.0),
                          ManeuverContainer(2, int(Direction.LEFT))),
        'ack_mcm': AckMcmMessage(make_header(MessageId.ACK_MCM, 5), 10, int(StationType.IAV),
                                 (0.0, 0.0), int(StationType.IAV), 4,
                                 ManeuverContainer(2, int(Direction.LEFT)), True),
    }


def random_message(rng: np.random.Generator):
    """A valid message of a random type with random field values."""
    special = [0.0, -0.0, 5e-324, -5e-324, 2.2250738585072014e-308, 1e300, -1e300]

    def real(non_negative: bool = False) -> float:
        if rng.random() < 0.2:
            value = special[int(rng.integers(len(special)))]
        else:
            value = float(rng.normal(0.0, 100.0))
        return abs(value) if non_negative else value

    def position():
        return (real(), real())

    station = int(rng.integers(0, 2 ** 32))
    gen = int(rng.integers(0, 2 ** 16))
    stype = int(rng.integers(0, 4))
    kind = MessageId(int(rng.integers(1, 6)))
    header = make_header(kind, station)

    if kind is MessageId.CAM:
        return CamMessage(header, gen, stype, position())
    if kind is MessageId.DENM:
        cause = int(rng.choice([1, 2, 26, 97]))
        sub = int(rng.integers(0, 5)) if cause == 97 else int(rng.integers(0, 256))
        return DenmMessage(
            header, int(rng.integers(1, 4)), stype,
            ManagementContainer(int(rng.integers(0, 2 ** 63)), real(True), int(rng.integers(0, 2 ** 32))),
            SituationContainer(cause, sub, int(rng.integers(0, 8))),
        )
    if kind is MessageId.CPM:
        records = tuple(
            PerceivedObjectRecord(int(rng.integers(0, 4)), real(True), real(),
                                  float(180.0 - rng.uniform(0.0, 360.0 - 1e-9)))
            for _ in range(int(rng.integers(0, 6)))
        )
        return CpmMessage(header, gen, stype, position(),
                          SensorInformation(int(rng.integers(0, 2)), int(rng.integers(0, 4))), records)
    maneuver = ManeuverContainer(int(rng.integers(0, 256)), int(rng.integers(0, 3)))
    if kind is MessageId.MCM:
        return McmMessage(header, gen, stype, position(), maneuver)
    return AckMcmMessage(header, gen, stype, position(), int(rng.integers(0, 4)),
                         int(rng.integers(0, 2 ** 32)), maneuver, bool(rng.integers(0, 2)))


class TestEnumerations:
    """Enumeration codes on the wire."""

    def test_message_ids(self):
        """Message ids run CAM=1 through ACK_MCM=5."""
        assert [m.value for m in MessageId] == [1, 2, 3, 4, 5]
        assert MessageId.ACK_MCM.name == "ACK_MCM"

    def test_denm_codes(self):
        """DENM message types and the collision-risk cause code."""
        assert (DenmMessageType.TRIGGER, DenmMessageType.UPDATE, DenmMessageType.TERMINATE) == (1, 2, 3)
        assert CauseCode.COLLISION_RISK == 97
        assert CauseCode.SLOW_VIA == 26
        assert SubCauseCode.INVOLVING_VULNERABLE_USER == 4
        assert InformationQuality.HIGHEST == 7

    def test_station_and_direction_codes(self):
        """Station types and maneuver directions."""
        assert [s.value for s in StationType] == [0, 1, 2, 3]
        assert (Direction.STRAIGHT, Direction.LEFT, Direction.RIGHT) == (0, 1, 2)
        assert ObjectId.OBJECT == 3
        assert SensorConfidence.HIGH == 3


class TestGoldenFixtures:
    """Byte-exact layouts checked against the shipped hex dumps."""

    @pytest.mark.parametrize("name", ["cam", "denm", "cpm", "mcm", "ack_mcm"])
    def test_encode_matches_fixture(self, name):
        """Encoding reproduces the golden dump."""
        expected = (FIXTURES / f"{name}.hex").read_text().strip()
        assert encode_hex(golden_messages()[name]) == expected

    @pytest.mark.parametrize("name", ["cam", "denm", "cpm", "mcm", "ack_mcm"])
    def test_decode_fixture(self, name):
        """Decoding the golden dump yields the golden message."""
        text = (FIXTURES / f"{name}.hex").read_text()
        assert decode_hex(text) == golden_messages()[name]

    def test_cam_header_bytes(self):
        """The header is version, id and little-endian station id."""
        msg = CamMessage(make_header(MessageId.CAM, 7), 0, int(StationType.IAV), (0.0, 0.0))
        assert encode(msg)[:6] == bytes([0x01, 0x01, 0x07, 0x00, 0x00, 0x00])

    def test_message_sizes(self):
        """Fixed-width layouts have fixed sizes."""
        sizes = {name: len(encode(m)) for name, m in golden_messages().items()}
        assert sizes == {'cam': 25, 'denm': 31, 'cpm': 53, 'mcm': 27, 'ack_mcm': 33}


class TestEncode:
    """Invariant checks on encode."""

    @pytest.fixture
    def denm(self):
        """A valid DENM TRIGGER."""
        return golden_messages()['denm']

    def test_denm_message_type_out_of_range(self, denm):
        """DENM with message_type=4 is rejected."""
        with pytest.raises(InvariantViolation):
            encode(replace(denm, message_type=4))

    def test_collision_risk_sub_cause_out_of_range(self, denm):
        """Collision-risk sub-causes stop at 4."""
        bad = replace(denm, situation=SituationContainer(97, 5, 1))
        with pytest.raises(InvariantViolation):
            encode(bad)

    def test_other_causes_accept_any_sub_cause(self, denm):
        """Non-collision causes carry any 8-bit sub-cause."""
        msg = replace(denm, situation=SituationContainer(int(CauseCode.ACCIDENT), 200, 0))
        assert decode(encode(msg)) == msg

    def test_position_arity(self):
        """Positions have exactly two components."""
        msg = CamMessage(make_header(MessageId.CAM, 1), 0, 2, (1.0, 2.0, 3.0))  # type: ignore[arg-type]
        with pytest.raises(InvariantViolation):
            encode(msg)

    def test_non_finite_float(self):
        """NaN positions do not encode."""
        msg = CamMessage(make_header(MessageId.CAM, 1), 0, 2, (float('nan'), 0.0))
        with pytest.raises(InvariantViolation):
            encode(msg)

    def test_header_must_match_type(self):
        """A CAM carrying the DENM id is rejected."""
        msg = CamMessage(ItsPduHeader(1, 2, 1), 0, 2, (0.0, 0.0))
        with pytest.raises(InvariantViolation):
            encode(msg)

    def test_yaw_angle_range(self):
        """-180 is outside (-180, 180]; 180 is inside."""
        cpm = golden_messages()['cpm']
        inside = replace(cpm, perceived_objects=(PerceivedObjectRecord(3, 1.0, 0.0, 180.0),))
        assert decode(encode(inside)) == inside
        with pytest.raises(InvariantViolation):
            encode(replace(cpm, perceived_objects=(PerceivedObjectRecord(3, 1.0, 0.0, -180.0),)))

    def test_too_many_perceived_objects(self):
        """The record count fits one byte."""
        cpm = golden_messages()['cpm']
        records = tuple(PerceivedObjectRecord(3, 1.0, 0.0, 0.0) for _ in range(256))
        with pytest.raises(InvariantViolation):
            encode(replace(cpm, perceived_objects=records))

    def test_message_kind_rejects_other_types(self):
        """Only the five message classes have a kind."""
        with pytest.raises(InvariantViolation):
            message_kind("CAM")  # type: ignore[arg-type]

    def test_generation_time_wraps(self):
        """Generation time is simulated milliseconds modulo 65536."""
        assert generation_time_for(0, 0.1) == 0
        assert generation_time_for(10, 0.1) == 1000
        assert generation_time_for(656, 0.1) == 65600 % 65536


class TestDecode:
    """Error reporting on decode."""

    def test_empty_input(self):
        """Empty input is truncated."""
        with pytest.raises(Truncated):
            decode(b"")

    def test_unknown_message_id(self):
        """Message id 6 is unknown."""
        data = bytearray(encode(golden_messages()['cam']))
        data[1] = 6
        with pytest.raises(UnknownMessageId):
            decode(bytes(data))

    def test_bad_protocol_version(self):
        """Protocol version 2 is rejected."""
        data = bytearray(encode(golden_messages()['cam']))
        data[0] = 2
        with pytest.raises(BadEnum):
            decode(bytes(data))

    def test_truncated_body(self):
        """A body one byte short is truncated."""
        data = encode(golden_messages()['mcm'])
        with pytest.raises(Truncated):
            decode(data[:-1])

    def test_truncated_cpm_record(self):
        """A CPM announcing more records than it carries is truncated."""
        data = bytearray(encode(golden_messages()['cpm']))
        data[27] = 2
        with pytest.raises(Truncated):
            decode(bytes(data))

    def test_trailing_bytes(self):
        """Extra bytes after a message are rejected."""
        with pytest.raises(TrailingBytes):
            decode(encode(golden_messages()['ack_mcm']) + b"\x00")

    def test_bad_enum_station_type(self):
        """Station type 4 is rejected."""
        data = bytearray(encode(golden_messages()['cam']))
        data[8] = 4
        with pytest.raises(BadEnum):
            decode(bytes(data))

    def test_bad_boolean_byte(self):
        """ACK responses are 0 or 1."""
        data = bytearray(encode(golden_messages()['ack_mcm']))
        data[-1] = 2
        with pytest.raises(BadEnum):
            decode(bytes(data))

    def test_bad_direction(self):
        """Direction 3 is rejected."""
        data = bytearray(encode(golden_messages()['mcm']))
        data[-1] = 3
        with pytest.raises(BadEnum):
            decode(bytes(data))

    def test_non_finite_distance(self):
        """An infinite DENM distance is rejected on decode."""
        data = bytearray(encode(golden_messages()['denm']))
        data[16:24] = bytes.fromhex("000000000000f07f")
        with pytest.raises(BadEnum):
            decode(bytes(data))

    def test_invalid_hex(self):
        """Non-hex text does not decode."""
        with pytest.raises(Truncated):
            decode_hex("zz")


class TestRoundTrip:
    """Seeded fuzzing of decode(encode(m)) == m."""

    def test_round_trip_sample(self):
        """A few thousand random messages round-trip."""
        rng = np.random.default_rng(20240)
        for _ in range(2000):
            msg = random_message(rng)
            assert decode(encode(msg)) == msg

    def test_encoding_is_canonical(self):
        """Equal messages encode identically; different ones differently."""
        rng = np.random.default_rng(7)
        seen = {}
        for _ in range(500):
            msg = random_message(rng)
            data = encode(msg)
            assert encode(decode(data)) == data
            if data in seen:
                assert seen[data] == msg
            seen[data] = msg

    def test_negative_zero_encodes_as_zero(self):
        """Messages equal up to the sign of zero share one encoding."""
        cam = golden_messages()['cam']
        cpm = golden_messages()['cpm']
        assert encode(replace(cam, current_position=(-0.0, -0.0))) == \
            encode(replace(cam, current_position=(0.0, 0.0)))
        signed = replace(cpm, perceived_objects=(PerceivedObjectRecord(3, -0.0, -0.0, -0.0),))
        unsigned = replace(cpm, perceived_objects=(PerceivedObjectRecord(3, 0.0, 0.0, 0.0),))
        assert signed == unsigned
        assert encode(signed) == encode(unsigned)

    def test_enum_mutations_rejected(self):
        """Every out-of-range station type byte is rejected."""
        data = bytearray(encode(golden_messages()['cam']))
        for value in range(4, 256):
            data[8] = value
            with pytest.raises(BadEnum):
                decode(bytes(data))

    @pytest.mark.slow
    def test_round_trip_full(self):
        """100,000 random messages across all five types round-trip."""
        rng = np.random.default_rng(1)
        kinds = set()
        for _ in range(100_000):
            msg = random_message(rng)
            kinds.add(message_kind(msg))
            assert decode(encode(msg)) == msg
        assert kinds == set(MessageId)
