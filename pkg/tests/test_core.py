"""
Tests for core infrastructure: configuration, errors, geometry and tool routing.
"""

import json
import math

import pytest

from ..core.base_tool import BaseTool, OperationStatus, operation_route
from ..core.config import SimConfig
from ..core.error_handler import ErrorHandler, handle_sim_errors
from ..core.utils import (
    IavSimException, MalformedTrace, OffLane, ScenarioError, SimUtils, Truncated, UnknownKey,
    distance, heading_degrees, relative_bearing, wrap_degrees,
)


class EchoTool(BaseTool):
    """Minimal tool for routing tests."""

    def get_tool_name(self) -> str:
        return "echo"

    def get_tool_description(self) -> str:
        return "Echo parameters back"

    @operation_route(name="echo", description="Return the value", required_params=["value"],
                     optional_params=["scenario_path"])
    def echo(self, value: int, scenario_path: str = None):
        return {'value': value}

    @operation_route(name="fail", description="Always raise", required_params=[])
    def fail(self):
        raise MalformedTrace("bad record", line=3)


class TestSimConfig:
    """Environment-driven settings."""

    def test_defaults(self, monkeypatch):
        for name in ('IAV_SIM_LOG_LEVEL', 'IAV_SIM_MAX_STEPS', 'IAV_SIM_WORKERS', 'IAV_SIM_METRICS_EXPORT'):
            monkeypatch.delenv(name, raising=False)
        settings = SimConfig()
        assert settings.to_dict()['default_max_steps'] == 20000
        assert settings.workers == 1
        assert settings.enable_metrics_export is False

    def test_environment(self, monkeypatch):
        monkeypatch.setenv('IAV_SIM_MAX_STEPS', '500')
        monkeypatch.setenv('IAV_SIM_WORKERS', '4')
        monkeypatch.setenv('IAV_SIM_METRICS_EXPORT', 'TRUE')
        settings = SimConfig()
        assert (settings.default_max_steps, settings.workers) == (500, 4)
        assert settings.enable_metrics_export is True

    def test_bad_values_are_clamped(self, monkeypatch):
        monkeypatch.setenv('IAV_SIM_LOG_LEVEL', 'chatty')
        monkeypatch.setenv('IAV_SIM_MAX_STEPS', '0')
        monkeypatch.setenv('IAV_SIM_WORKERS', '-2')
        settings = SimConfig()
        assert settings.log_level == "INFO"
        assert settings.default_max_steps == 1
        assert settings.workers == 1

    def test_scenario_path(self, tmp_path, monkeypatch):
        monkeypatch.setenv('IAV_SIM_SCENARIO_DIR', str(tmp_path))
        settings = SimConfig()
        assert settings.scenario_path("benchmark") == tmp_path / "benchmark.scn"
        assert str(settings.scenario_path("elsewhere/run.scn")) == "elsewhere/run.scn"


class TestGeometry:
    """Angle and distance helpers."""

    @pytest.mark.parametrize("angle, expected", [
        (0.0, 0.0), (180.0, 180.0), (-180.0, 180.0), (270.0, -90.0), (540.0, 180.0), (-190.0, 170.0),
    ])
    def test_wrap_degrees(self, angle, expected):
        assert wrap_degrees(angle) == pytest.approx(expected)

    def test_heading(self):
        assert heading_degrees(1.0, 0.0) == 0.0
        assert heading_degrees(0.0, 1.0) == 90.0
        assert heading_degrees(-1.0, 0.0) == 180.0

    def test_relative_bearing(self):
        assert relative_bearing((0.0, 0.0), 90.0, (1.0, 0.0)) == -90.0
        assert relative_bearing((0.0, 0.0), 0.0, (-1.0, 0.0)) == 180.0

    def test_distance(self):
        assert distance((0.0, 0.0), (3.0, 4.0)) == 5.0
        assert distance((1.0, 1.0), (1.0, 1.0)) == 0.0


class TestExceptions:
    """Exception hierarchy."""

    def test_scenario_error_carries_line_and_key(self):
        error = UnknownKey("unknown key", line=7, key="bus.lag")
        assert isinstance(error, ScenarioError)
        assert str(error) == "line 7: unknown key"
        assert (error.line, error.key) == (7, "bus.lag")

    def test_context(self):
        error = IavSimException("boom", context={'step': 3})
        assert error.context == {'step': 3}
        assert error.timestamp > 0


class TestErrorHandler:
    """Classification and structured error responses."""

    @pytest.mark.parametrize("error, category", [
        (UnknownKey("x", line=1), 'scenario'),
        (Truncated("x"), 'codec'),
        (MalformedTrace("x"), 'trace'),
        (OffLane("x"), 'geometry'),
        (FileNotFoundError("x"), 'file_system'),
        (RuntimeError("x"), 'internal'),
    ])
    def test_categories(self, error, category):
        response = ErrorHandler.handle_error(error, {'tool': 't', 'operation': 'o'})
        assert response['success'] is False
        assert response['error_category'] == category
        assert response['exit_code'] == 1

    def test_line_and_suggestions(self):
        response = ErrorHandler.handle_error(UnknownKey("bad", line=4, key="run.nme"), {})
        assert response['line'] == 4
        assert response['key'] == "run.nme"
        assert response['suggestions']

    def test_wrapped_operation_never_raises(self):
        @handle_sim_errors("parse", "tests")
        def parse():
            raise Truncated("short")

        @handle_sim_errors("ok", "tests")
        def ok():
            return {'value': 1}

        assert parse()['error_type'] == "Truncated"
        assert ok() == {'value': 1, 'success': True}


class TestBaseTool:
    """Operation routing through execute_operation."""

    @pytest.fixture
    def tool(self):
        return EchoTool()

    def test_route(self, tool):
        response = tool.execute_operation("echo", value=5)
        assert response.success
        assert response.data['value'] == 5
        assert json.loads(response.to_json())['status'] == "success"

    def test_error_response(self, tool):
        response = tool.execute_operation("fail")
        assert response.status is OperationStatus.ERROR
        assert response.data['line'] == 3

    def test_input_path_must_exist(self, tool, tmp_path):
        response = tool.execute_operation("echo", value=1, scenario_path=str(tmp_path / "missing.scn"))
        assert not response.success
        assert response.data['error_category'] == "file_system"

    def test_tool_info(self, tool):
        info = tool.get_tool_info()
        assert sorted(info['operations']) == ["echo", "fail"]
        assert info['operations']['echo']['required_params'] == ["value"]


class TestPerformanceMonitor:
    """Call statistics recorded by SimUtils.performance_monitor."""

    def test_records_calls_and_failures(self):
        SimUtils.clear_performance_metrics()

        @SimUtils.performance_monitor
        def square(x):
            if x < 0:
                raise ValueError("negative")
            return x * x

        assert square(3) == 9
        with pytest.raises(ValueError):
            square(-1)
        [(name, stats)] = SimUtils.get_performance_metrics().items()
        assert name.endswith("square")
        assert stats['total_calls'] == 2
        assert stats['failures'] == 1
        assert not math.isnan(stats['avg_time'])
        SimUtils.clear_performance_metrics()
