"""
Configuration management for IAV Coop Sim.
Environment-driven settings for the command line and tooling layers.

Simulation parameters (sensor thresholds, protocol timers, bus behaviour) live
in scenario files, not here.
"""

import os
from pathlib import Path
from typing import Any, Dict
import logging

logger = logging.getLogger(__name__)

_PACKAGE_ROOT = Path(__file__).resolve().parent.parent
_VALID_LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}


class SimConfig:
    """Centralized configuration for simulator tooling."""

    def __init__(self) -> None:
        # Logging settings
        self.log_level = os.getenv('IAV_SIM_LOG_LEVEL', 'INFO').upper()
        self.enable_performance_logging = os.getenv('IAV_SIM_PERF_LOG', 'false').lower() == 'true'

        # Scenario settings
        self.scenario_dir = os.getenv('IAV_SIM_SCENARIO_DIR', str(_PACKAGE_ROOT / 'scenarios'))
        self.default_max_steps = int(os.getenv('IAV_SIM_MAX_STEPS', '20000'))

        # Execution settings
        self.workers = int(os.getenv('IAV_SIM_WORKERS', '1'))

        # Export settings
        self.enable_metrics_export = os.getenv('IAV_SIM_METRICS_EXPORT', 'false').lower() == 'true'

        self._validate_config()

    def _validate_config(self) -> None:
        """Validate configuration values and log warnings for invalid settings."""
        warnings = []

        if self.log_level not in _VALID_LOG_LEVELS:
            warnings.append(f"Unknown log level '{self.log_level}', using INFO")
            self.log_level = 'INFO'

        if self.default_max_steps < 1:
            warnings.append("default_max_steps must be at least 1")
            self.default_max_steps = 1
        elif self.default_max_steps > 10_000_000:
            warnings.append("default_max_steps is very high, runs may take hours")

        if self.workers < 1:
            warnings.append("workers must be at least 1")
            self.workers = 1
        elif self.workers > 32:
            warnings.append("workers is very high, thread overhead will dominate")

        if not Path(self.scenario_dir).is_dir():
            warnings.append(f"scenario_dir does not exist: {self.scenario_dir}")

        for warning in warnings:
            logger.warning(f"Configuration warning: {warning}")

    def scenario_path(self, name: str) -> Path:
        """Resolve a shipped scenario by bare name, or return the path unchanged."""
        candidate = Path(name)
        if candidate.exists() or candidate.suffix:
            return candidate
        return Path(self.scenario_dir) / f"{name}.scn"

    def to_dict(self) -> Dict[str, Any]:
        """Convert configuration to dictionary for serialization."""
        return {
            'log_level': self.log_level,
            'enable_performance_logging': self.enable_performance_logging,
            'scenario_dir': self.scenario_dir,
            'default_max_steps': self.default_max_steps,
            'workers': self.workers,
            'enable_metrics_export': self.enable_metrics_export,
        }


# Global configuration instance
config = SimConfig()
