"""
Run monitoring for IAV Coop Sim.
Samples process resources around a simulation run and exposes run counters in
the Prometheus text format. Nothing here feeds back into the simulation.
"""

import time
import logging
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Any, Dict, Mapping, Optional

import psutil
from prometheus_client import CollectorRegistry, Counter, Gauge, generate_latest

logger = logging.getLogger(__name__)

NAMESPACE = "iav_sim"


class HealthStatus(Enum):
    """Health of the process after a run."""
    HEALTHY = "healthy"
    WARNING = "warning"
    CRITICAL = "critical"


@dataclass
class ResourceSample:
    """Process resources at one instant."""
    rss_mb: float
    cpu_percent: float
    threads: int

    @classmethod
    def take(cls, process: psutil.Process) -> 'ResourceSample':
        try:
            with process.oneshot():
                return cls(
                    rss_mb=process.memory_info().rss / (1024 * 1024),
                    cpu_percent=process.cpu_percent(),
                    threads=process.num_threads(),
                )
        except (psutil.NoSuchProcess, psutil.AccessDenied) as e:
            logger.warning(f"Could not sample process resources: {e}")
            return cls(0.0, 0.0, 0)


class RunMonitor:
    """
    Wall time, peak memory and outcome counters of simulation runs.

    Each monitor owns its own ``CollectorRegistry`` so several runs in one
    process never share series.
    """

    def __init__(self, scenario: str = "scenario", memory_warning_mb: float = 1024.0):
        self.scenario = scenario
        self.memory_warning_mb = memory_warning_mb
        self.registry = CollectorRegistry()
        self._process = psutil.Process()
        self._started: Optional[float] = None
        self.wall_time = 0.0
        self.peak_rss_mb = 0.0
        self.samples = 0

        labels = ['scenario']
        self._steps = Gauge(f"{NAMESPACE}_steps", "Steps executed by the last run", labels,
                            registry=self.registry)
        self._wall = Gauge(f"{NAMESPACE}_wall_seconds", "Wall-clock duration of the last run", labels,
                           registry=self.registry)
        self._rss = Gauge(f"{NAMESPACE}_peak_rss_megabytes", "Peak resident memory during the run",
                          labels, registry=self.registry)
        self._messages = Counter(f"{NAMESPACE}_messages", "Messages sent, by type",
                                 labels + ['type'], registry=self.registry)
        self._collisions = Counter(f"{NAMESPACE}_collisions", "Collision oracle hits", labels,
                                   registry=self.registry)
        self._goals = Counter(f"{NAMESPACE}_goals_reached", "Goals reached by all vehicles", labels,
                              registry=self.registry)
        self._mutex = Counter(f"{NAMESPACE}_mutex_violations",
                              "Steps with two vehicles crossing one intersection", labels,
                              registry=self.registry)

    def start(self) -> None:
        self._started = time.perf_counter()
        self.sample()

    def sample(self) -> ResourceSample:
        current = ResourceSample.take(self._process)
        self.peak_rss_mb = max(self.peak_rss_mb, current.rss_mb)
        self.samples += 1
        return current

    def stop(self) -> float:
        """End timing; returns the wall time in seconds."""
        self.sample()
        if self._started is not None:
            self.wall_time = time.perf_counter() - self._started
            self._started = None
        self._wall.labels(self.scenario).set(self.wall_time)
        self._rss.labels(self.scenario).set(self.peak_rss_mb)
        return self.wall_time

    def __enter__(self) -> 'RunMonitor':
        self.start()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.stop()

    def record_run(self, steps: int, messages: Mapping[str, int], collisions: int,
                   goals_reached: int, mutex_violations: int = 0) -> None:
        """Record the outcome of a finished run."""
        self._steps.labels(self.scenario).set(steps)
        for kind in sorted(messages):
            if messages[kind]:
                self._messages.labels(self.scenario, kind).inc(messages[kind])
        if collisions:
            self._collisions.labels(self.scenario).inc(collisions)
        if goals_reached:
            self._goals.labels(self.scenario).inc(goals_reached)
        if mutex_violations:
            self._mutex.labels(self.scenario).inc(mutex_violations)

    def health(self) -> HealthStatus:
        if self.peak_rss_mb > 2 * self.memory_warning_mb:
            return HealthStatus.CRITICAL
        if self.peak_rss_mb > self.memory_warning_mb:
            return HealthStatus.WARNING
        return HealthStatus.HEALTHY

    def summary(self) -> Dict[str, Any]:
        return {
            'scenario': self.scenario,
            'wall_time_s': round(self.wall_time, 3),
            'peak_rss_mb': round(self.peak_rss_mb, 1),
            'samples': self.samples,
            'health': self.health().value,
        }

    def exposition(self) -> str:
        """Prometheus text exposition of this monitor's registry."""
        return generate_latest(self.registry).decode('utf-8')


def sample_resources() -> Dict[str, Any]:
    """One-off resource sample of the current process."""
    return asdict(ResourceSample.take(psutil.Process()))
