"""
Binary codec for the five cooperation messages exchanged between stations.

Every message starts with the ITS PDU header (protocol version, message id,
station id) and then carries its fields in declaration order. The layout is
little-endian and fixed-width: unsigned integers at their declared width,
IEEE-754 binary64 floats, booleans as one byte, and the CPM perceived-object
list as an 8-bit count followed by the records. Encoding is canonical: negative
zero is written as positive zero, so two messages are equal iff their encodings
are equal.
"""

import math
import struct
import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Callable, Dict, Tuple, Type, TypeVar, Union

from ..core.utils import (
    InvariantViolation, Truncated, UnknownMessageId, BadEnum, TrailingBytes,
)

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_PERCEIVED_OBJECTS = 255


class MessageId(IntEnum):
    CAM = 1
    DENM = 2
    CPM = 3
    MCM = 4
    ACK_MCM = 5


class StationType(IntEnum):
    UNKNOWN = 0
    PEDESTRIAN = 1
    IAV = 2
    BEACON = 3


class DenmMessageType(IntEnum):
    TRIGGER = 1
    UPDATE = 2
    TERMINATE = 3


class CauseCode(IntEnum):
    TRAFFIC_CONDITION = 1
    ACCIDENT = 2
    SLOW_VIA = 26
    COLLISION_RISK = 97


class SubCauseCode(IntEnum):
    """Sub-causes defined for CauseCode.COLLISION_RISK."""
    UNAVAILABLE = 0
    LONGITUDINAL_COLLISION_RISK = 1
    CROSSING_COLLISION_RISK = 2
    LATERAL_COLLISION_RISK = 3
    INVOLVING_VULNERABLE_USER = 4


class InformationQuality(IntEnum):
    UNAVAILABLE = 0
    LOWEST = 1
    HIGHEST = 7


class SensorType(IntEnum):
    UNKNOWN = 0
    LIDAR = 1


class SensorConfidence(IntEnum):
    UNKNOWN = 0
    LOW = 1
    MEDIUM = 2
    HIGH = 3


class ObjectId(IntEnum):
    UNKNOWN = 0
    PEDESTRIAN = 1
    IAV = 2
    OBJECT = 3


class Direction(IntEnum):
    STRAIGHT = 0
    LEFT = 1
    RIGHT = 2


Position = Tuple[float, float]


@dataclass(frozen=True)
class ItsPduHeader:
    protocol_version: int
    message_id: int
    station_id: int


@dataclass(frozen=True)
class CamMessage:
    header: ItsPduHeader
    generation_time: int
    station_type: int
    current_position: Position


@dataclass(frozen=True)
class ManagementContainer:
    detection_time: int
    distance: float
    validity_duration: int


@dataclass(frozen=True)
class SituationContainer:
    cause_code: int
    sub_cause_code: int
    information_quality: int


@dataclass(frozen=True)
class DenmMessage:
    header: ItsPduHeader
    message_type: int
    station_type: int
    management: ManagementContainer
    situation: SituationContainer

    @property
    def alert_key(self) -> Tuple[int, int, int]:
        """Correlation key linking UPDATE/TERMINATE to their TRIGGER."""
        return (self.header.station_id, self.situation.cause_code, self.situation.sub_cause_code)


@dataclass(frozen=True)
class SensorInformation:
    type: int
    confidence: int


@dataclass(frozen=True)
class PerceivedObjectRecord:
    object_id: int
    distance: float
    acceleration: float
    yaw_angle: float


@dataclass(frozen=True)
class CpmMessage:
    header: ItsPduHeader
    generation_time: int
    station_type: int
    current_position: Position
    sensor_information: SensorInformation
    perceived_objects: Tuple[PerceivedObjectRecord, ...]


@dataclass(frozen=True)
class ManeuverContainer:
    id_intersection: int
    direction: int


@dataclass(frozen=True)
class McmMessage:
    header: ItsPduHeader
    generation_time: int
    station_type: int
    current_position: Position
    maneuver: ManeuverContainer


@dataclass(frozen=True)
class AckMcmMessage:
    header: ItsPduHeader
    generation_time: int
    station_type: int
    current_position: Position
    station_type_destinator: int
    station_id_destinator: int
    maneuver: ManeuverContainer
    ack_mcm_response: bool


Message = Union[CamMessage, DenmMessage, CpmMessage, McmMessage, AckMcmMessage]

MESSAGE_TYPES: Dict[MessageId, type] = {
    MessageId.CAM: CamMessage,
    MessageId.DENM: DenmMessage,
    MessageId.CPM: CpmMessage,
    MessageId.MCM: McmMessage,
    MessageId.ACK_MCM: AckMcmMessage,
}

_TYPE_IDS = {cls: mid for mid, cls in MESSAGE_TYPES.items()}

_HEADER = struct.Struct('<BBI')
_CAM_BODY = struct.Struct('<HBdd')
_DENM_BODY = struct.Struct('<BBQdIBBB')
_CPM_BODY = struct.Struct('<HBddBBB')
_CPM_RECORD = struct.Struct('<Bddd')
_MCM_BODY = struct.Struct('<HBddBB')
_ACK_BODY = struct.Struct('<HBddBIBBB')

_U8 = (0, 0xFF)
_U16 = (0, 0xFFFF)
_U32 = (0, 0xFFFFFFFF)
_U64 = (0, 0xFFFFFFFFFFFFFFFF)


def message_kind(msg: Message) -> MessageId:
    """Message id implied by the message's type (the union tag)."""
    try:
        return _TYPE_IDS[type(msg)]
    except KeyError:
        raise InvariantViolation(f"Not a protocol message: {type(msg).__name__}")


def generation_time_for(step: int, dt: float) -> int:
    """Milliseconds of simulated time at a step, modulo 65536."""
    return int(round(step * dt * 1000.0)) % 65536


def make_header(kind: MessageId, station_id: int) -> ItsPduHeader:
    return ItsPduHeader(PROTOCOL_VERSION, int(kind), station_id)


# --- validation ---------------------------------------------------------------

E = TypeVar('E', bound=IntEnum)


def _check_int(name: str, value: object, bounds: Tuple[int, int]) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvariantViolation(f"{name} must be an integer, got {value!r}")
    if not bounds[0] <= value <= bounds[1]:
        raise InvariantViolation(f"{name}={value} outside [{bounds[0]}, {bounds[1]}]")


def _check_enum(name: str, value: object, enum: Type[E], error: Type[Exception]) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise error(f"{name} must be an integer code, got {value!r}")
    try:
        enum(value)
    except ValueError:
        raise error(f"{name}={value} is not a valid {enum.__name__}")


def _check_float(name: str, value: object, *, non_negative: bool = False,
                 error: Type[Exception] = InvariantViolation) -> None:
    if isinstance(value, bool) or not isinstance(value, float):
        raise InvariantViolation(f"{name} must be a float, got {value!r}")
    if math.isnan(value) or math.isinf(value):
        raise error(f"{name} must be finite, got {value!r}")
    if non_negative and value < 0.0:
        raise error(f"{name} must be >= 0, got {value!r}")


def _check_position(name: str, value: object, error: Type[Exception] = InvariantViolation) -> None:
    if not isinstance(value, tuple) or len(value) != 2:
        raise InvariantViolation(f"{name} must have exactly 2 components, got {value!r}")
    _check_float(f"{name}.x", value[0], error=error)
    _check_float(f"{name}.y", value[1], error=error)


def _check_header(header: ItsPduHeader, expected: MessageId, error: Type[Exception]) -> None:
    if header.protocol_version != PROTOCOL_VERSION:
        raise error(f"protocol_version={header.protocol_version}, expected {PROTOCOL_VERSION}")
    if header.message_id != expected:
        raise error(f"message_id={header.message_id} does not match {expected.name}")
    _check_int('station_id', header.station_id, _U32)


def _check_yaw(value: float, error: Type[Exception]) -> None:
    if not -180.0 < value <= 180.0:
        raise error(f"yaw_angle={value!r} outside (-180, 180]")


def _check_situation(situation: SituationContainer, error: Type[Exception]) -> None:
    _check_enum('cause_code', situation.cause_code, CauseCode, error)
    if situation.cause_code == CauseCode.COLLISION_RISK:
        _check_enum('sub_cause_code', situation.sub_cause_code, SubCauseCode, error)
    elif not isinstance(situation.sub_cause_code, int) or not 0 <= situation.sub_cause_code <= 0xFF:
        raise error(f"sub_cause_code={situation.sub_cause_code!r} outside [0, 255]")
    quality = situation.information_quality
    if isinstance(quality, bool) or not isinstance(quality, int) or not 0 <= quality <= InformationQuality.HIGHEST:
        raise error(f"information_quality={quality!r} outside [0, 7]")


def validate(msg: Message, error: Type[Exception] = InvariantViolation) -> None:
    """
    Check every type invariant of a message.

    Args:
        msg: Message to check
        error: Exception raised for out-of-range enumerations; field arity and
            Python-type problems always raise InvariantViolation

    Raises:
        InvariantViolation: If any invariant fails (or ``error`` for enum codes)
    """
    kind = message_kind(msg)
    _check_header(msg.header, kind, error)

    if isinstance(msg, DenmMessage):
        _check_enum('message_type', msg.message_type, DenmMessageType, error)
        _check_enum('station_type', msg.station_type, StationType, error)
        _check_int('detection_time', msg.management.detection_time, _U64)
        _check_float('distance', msg.management.distance, non_negative=True, error=error)
        _check_int('validity_duration', msg.management.validity_duration, _U32)
        _check_situation(msg.situation, error)
        return

    _check_int('generation_time', msg.generation_time, _U16)
    _check_enum('station_type', msg.station_type, StationType, error)
    _check_position('current_position', msg.current_position, error)

    if isinstance(msg, CpmMessage):
        _check_enum('sensor_information.type', msg.sensor_information.type, SensorType, error)
        _check_enum('sensor_information.confidence', msg.sensor_information.confidence,
                    SensorConfidence, error)
        if not isinstance(msg.perceived_objects, tuple):
            raise InvariantViolation("perceived_objects must be a tuple")
        if len(msg.perceived_objects) > MAX_PERCEIVED_OBJECTS:
            raise InvariantViolation(
                f"{len(msg.perceived_objects)} perceived objects exceed {MAX_PERCEIVED_OBJECTS}"
            )
        for index, record in enumerate(msg.perceived_objects):
            _check_enum(f'perceived_objects[{index}].object_id', record.object_id, ObjectId, error)
            _check_float(f'perceived_objects[{index}].distance', record.distance,
                         non_negative=True, error=error)
            _check_float(f'perceived_objects[{index}].acceleration', record.acceleration, error=error)
            _check_float(f'perceived_objects[{index}].yaw_angle', record.yaw_angle, error=error)
            _check_yaw(record.yaw_angle, error)
    elif isinstance(msg, McmMessage):
        _check_int('id_intersection', msg.maneuver.id_intersection, _U8)
        _check_enum('direction', msg.maneuver.direction, Direction, error)
    elif isinstance(msg, AckMcmMessage):
        _check_enum('station_type_destinator', msg.station_type_destinator, StationType, error)
        _check_int('station_id_destinator', msg.station_id_destinator, _U32)
        _check_int('id_intersection', msg.maneuver.id_intersection, _U8)
        _check_enum('direction', msg.maneuver.direction, Direction, error)
        if not isinstance(msg.ack_mcm_response, bool):
            raise InvariantViolation("ack_mcm_response must be a bool")


# --- encoding -----------------------------------------------------------------

def _canon(value: float) -> float:
    """Fold -0.0 into 0.0."""
    return value + 0.0


def encode(msg: Message) -> bytes:
    """
    Serialize a message to its canonical byte form.

    Raises:
        InvariantViolation: If the message violates any type invariant
    """
    validate(msg)
    h = msg.header
    out = _HEADER.pack(h.protocol_version, h.message_id, h.station_id)

    if isinstance(msg, CamMessage):
        x, y = msg.current_position
        return out + _CAM_BODY.pack(msg.generation_time, msg.station_type, _canon(x), _canon(y))

    if isinstance(msg, DenmMessage):
        m, s = msg.management, msg.situation
        return out + _DENM_BODY.pack(
            msg.message_type, msg.station_type, m.detection_time, _canon(m.distance),
            m.validity_duration, s.cause_code, s.sub_cause_code, s.information_quality,
        )

    if isinstance(msg, CpmMessage):
        x, y = msg.current_position
        si = msg.sensor_information
        body = _CPM_BODY.pack(msg.generation_time, msg.station_type, _canon(x), _canon(y),
                              si.type, si.confidence, len(msg.perceived_objects))
        records = b''.join(
            _CPM_RECORD.pack(r.object_id, _canon(r.distance), _canon(r.acceleration), _canon(r.yaw_angle))
            for r in msg.perceived_objects
        )
        return out + body + records

    if isinstance(msg, McmMessage):
        x, y = msg.current_position
        return out + _MCM_BODY.pack(msg.generation_time, msg.station_type, _canon(x), _canon(y),
                                    msg.maneuver.id_intersection, msg.maneuver.direction)

    x, y = msg.current_position
    return out + _ACK_BODY.pack(
        msg.generation_time, msg.station_type, _canon(x), _canon(y),
        msg.station_type_destinator, msg.station_id_destinator,
        msg.maneuver.id_intersection, msg.maneuver.direction, int(msg.ack_mcm_response),
    )


# --- decoding -----------------------------------------------------------------

class _Reader:
    """Cursor over an input buffer raising Truncated on short reads."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def read(self, layout: struct.Struct, what: str) -> Tuple[Any, ...]:
        end = self.offset + layout.size
        if end > len(self.data):
            raise Truncated(
                f"{what} needs {layout.size} bytes at offset {self.offset}, "
                f"{len(self.data) - self.offset} available"
            )
        values = layout.unpack_from(self.data, self.offset)
        self.offset = end
        return values

    def finish(self) -> None:
        extra = len(self.data) - self.offset
        if extra:
            raise TrailingBytes(f"{extra} bytes after a complete message")


def _decode_bool(value: int) -> bool:
    if value not in (0, 1):
        raise BadEnum(f"ack_mcm_response byte must be 0 or 1, got {value}")
    return value == 1


def _decode_cam(header: ItsPduHeader, r: _Reader) -> CamMessage:
    gen, stype, x, y = r.read(_CAM_BODY, 'CAM body')
    return CamMessage(header, gen, stype, (x, y))


def _decode_denm(header: ItsPduHeader, r: _Reader) -> DenmMessage:
    mtype, stype, det, dist, validity, cause, sub, quality = r.read(_DENM_BODY, 'DENM body')
    return DenmMessage(
        header, mtype, stype,
        ManagementContainer(det, dist, validity),
        SituationContainer(cause, sub, quality),
    )


def _decode_cpm(header: ItsPduHeader, r: _Reader) -> CpmMessage:
    gen, stype, x, y, stype_sensor, confidence, count = r.read(_CPM_BODY, 'CPM body')
    records = tuple(
        PerceivedObjectRecord(*r.read(_CPM_RECORD, f'perceived object {i}'))
        for i in range(count)
    )
    return CpmMessage(header, gen, stype, (x, y),
                      SensorInformation(stype_sensor, confidence), records)


def _decode_mcm(header: ItsPduHeader, r: _Reader) -> McmMessage:
    gen, stype, x, y, inter, direction = r.read(_MCM_BODY, 'MCM body')
    return McmMessage(header, gen, stype, (x, y), ManeuverContainer(inter, direction))


def _decode_ack(header: ItsPduHeader, r: _Reader) -> AckMcmMessage:
    gen, stype, x, y, dtype, did, inter, direction, response = r.read(_ACK_BODY, 'ACK_MCM body')
    return AckMcmMessage(header, gen, stype, (x, y), dtype, did,
                         ManeuverContainer(inter, direction), _decode_bool(response))


_DECODERS: Dict[MessageId, Callable[[ItsPduHeader, _Reader], Message]] = {
    MessageId.CAM: _decode_cam,
    MessageId.DENM: _decode_denm,
    MessageId.CPM: _decode_cpm,
    MessageId.MCM: _decode_mcm,
    MessageId.ACK_MCM: _decode_ack,
}


def decode(data: bytes) -> Message:
    """
    Parse exactly one message from a byte sequence.

    Raises:
        Truncated: Too few bytes for the header or body
        UnknownMessageId: Message id byte outside 1..5
        BadEnum: Any enumerated field out of range (protocol version included)
        TrailingBytes: Extra bytes after a complete message
    """
    r = _Reader(bytes(data))
    version, message_id, station_id = r.read(_HEADER, 'ItsPduHeader')
    if message_id not in MessageId._value2member_map_:
        raise UnknownMessageId(f"message_id={message_id} is not one of 1..5")
    if version != PROTOCOL_VERSION:
        raise BadEnum(f"protocol_version={version}, expected {PROTOCOL_VERSION}")

    header = ItsPduHeader(version, message_id, station_id)
    msg = _DECODERS[MessageId(message_id)](header, r)
    validate(msg, error=BadEnum)
    r.finish()
    return msg


def encode_hex(msg: Message) -> str:
    return encode(msg).hex()


def decode_hex(text: str) -> Message:
    try:
        data = bytes.fromhex(text.strip())
    except ValueError as e:
        raise Truncated(f"Invalid hex payload: {e}", original_error=e)
    return decode(data)
