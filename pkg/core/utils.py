"""
Utility functions for IAV Coop Sim.
Exception hierarchy, planar geometry helpers and operation instrumentation shared
by the simulation modules and the tooling layer.
"""

import math
import time
import logging
import threading
from functools import wraps
from typing import Any, Callable, Dict, Optional, Tuple, TypeVar, cast

from .config import config

logger = logging.getLogger(__name__)

F = TypeVar("F", bound=Callable[..., Any])

Point = Tuple[float, float]

# Bearings are quantised so that symmetric geometries classify identically
# on every platform.
BEARING_DECIMALS = 9


class IavSimException(Exception):
    """Base exception for simulator operations."""

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None,
                 original_error: Optional[Exception] = None):
        super().__init__(message)
        self.context = context or {}
        self.original_error = original_error
        self.timestamp = time.time()


# --- wire codec ---------------------------------------------------------------

class CodecError(IavSimException):
    """Base class for encoding and decoding failures."""
    pass


class InvariantViolation(CodecError):
    """A message violates a type invariant (enum range, arity, float domain)."""
    pass


class Truncated(CodecError):
    """Input ended before a complete message was read."""
    pass


class UnknownMessageId(CodecError):
    """The header names a message id outside CAM..ACK_MCM."""
    pass


class BadEnum(CodecError):
    """An enumerated field carries an undefined code."""
    pass


class TrailingBytes(CodecError):
    """Extra bytes follow a complete message."""
    pass


# --- plan and world -----------------------------------------------------------

class UnknownIntersection(IavSimException):
    """Intersection id is not part of the plan."""
    pass


class OffRoute(IavSimException):
    """Position is not on the route's lane corridor."""
    pass


class OffLane(IavSimException):
    """Position is outside every lane corridor of the plan."""
    pass


class UnknownVehicle(IavSimException):
    """Vehicle id is not present in the world snapshot."""
    pass


class InvalidScenario(IavSimException):
    """Scenario is well-formed text but cannot be simulated."""
    pass


# --- scenario text ------------------------------------------------------------

class ScenarioError(InvalidScenario):
    """Scenario file error tied to a line of input."""

    def __init__(self, message: str, line: int = 0, key: Optional[str] = None,
                 context: Optional[Dict[str, Any]] = None):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}", context=context)
        self.line = line
        self.key = key


class ScenarioSyntaxError(ScenarioError):
    """Line cannot be parsed as a section header, comment or key = value."""
    pass


class UnknownKey(ScenarioError):
    """Key is not defined for its section (strict mode)."""
    pass


class DuplicateStationId(ScenarioError):
    """Two vehicle sections share a station id."""
    pass


class MalformedTrace(IavSimException):
    """Trace record cannot be parsed or violates trace ordering."""

    def __init__(self, message: str, line: int = 0):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}")
        self.line = line


# --- geometry -----------------------------------------------------------------

def wrap_degrees(angle: float) -> float:
    """Wrap an angle in degrees into (-180, 180]."""
    wrapped = math.fmod(angle, 360.0)
    if wrapped <= -180.0:
        wrapped += 360.0
    elif wrapped > 180.0:
        wrapped -= 360.0
    return wrapped


def heading_degrees(dx: float, dy: float) -> float:
    """Direction of a displacement in degrees, counter-clockwise from +x."""
    return round(math.degrees(math.atan2(dy, dx)), BEARING_DECIMALS)


def relative_bearing(origin: Point, heading: float, target: Point) -> float:
    """Bearing of target seen from origin, relative to heading, in (-180, 180]."""
    absolute = heading_degrees(target[0] - origin[0], target[1] - origin[1])
    return round(wrap_degrees(absolute - heading), BEARING_DECIMALS)


def distance(a: Point, b: Point) -> float:
    return math.hypot(b[0] - a[0], b[1] - a[1])


class SimUtils:
    """Instrumentation helpers for tool operations."""

    _performance_metrics: Dict[str, Dict[str, float]] = {}
    _metrics_lock = threading.Lock()

    @staticmethod
    def create_operation_context(tool_name: str, operation: str, **kwargs: Any) -> Dict[str, Any]:
        """Build the context dict attached to errors and logs."""
        return {
            'tool': tool_name,
            'operation': operation,
            'timestamp': time.time(),
            'parameters': {k: v for k, v in kwargs.items() if not k.startswith('_')},
        }

    @staticmethod
    def performance_monitor(func: Optional[F] = None, *, threshold_seconds: float = 1.0) -> Any:
        """
        Decorator to record call counts and durations, logging slow calls.

        Args:
            threshold_seconds: Log warning if a call takes longer than this
        """
        def decorator(f: F) -> F:
            @wraps(f)
            def wrapper(*args: Any, **kwargs: Any) -> Any:
                start_time = time.time()
                func_name = f"{f.__module__}.{f.__name__}"
                success = False
                try:
                    result = f(*args, **kwargs)
                    success = True
                    return result
                finally:
                    duration = time.time() - start_time
                    with SimUtils._metrics_lock:
                        metrics = SimUtils._performance_metrics.setdefault(func_name, {
                            'total_calls': 0,
                            'total_time': 0.0,
                            'max_time': 0.0,
                            'failures': 0,
                        })
                        metrics['total_calls'] += 1
                        metrics['total_time'] += duration
                        metrics['max_time'] = max(metrics['max_time'], duration)
                        if not success:
                            metrics['failures'] += 1

                    if config.enable_performance_logging and duration > threshold_seconds:
                        logger.warning(f"Slow operation: {func_name} took {duration:.2f}s")

            return cast(F, wrapper)

        if func is not None:
            return decorator(func)
        return decorator

    @staticmethod
    def get_performance_metrics() -> Dict[str, Dict[str, float]]:
        """Snapshot of recorded metrics with average durations."""
        with SimUtils._metrics_lock:
            snapshot = {}
            for name, metrics in SimUtils._performance_metrics.items():
                calls = metrics['total_calls'] or 1
                snapshot[name] = {**metrics, 'avg_time': metrics['total_time'] / calls}
            return snapshot

    @staticmethod
    def clear_performance_metrics() -> None:
        with SimUtils._metrics_lock:
            SimUtils._performance_metrics.clear()
