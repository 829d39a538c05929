"""
Tests for the iav-coop-sim command line.
"""

from pathlib import Path

import pytest
from typer.testing import CliRunner

from .. import __version__
from ..__main__ import app

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture
def runner():
    return CliRunner()


class TestCommands:
    """Commands and their exit codes."""

    def test_version(self, runner):
        result = runner.invoke(app, ["version"])
        assert result.exit_code == 0
        assert __version__ in result.output

    def test_validate_by_name(self, runner):
        """Shipped scenarios resolve by bare name."""
        result = runner.invoke(app, ["validate", "--scenario", "intersection"])
        assert result.exit_code == 0
        assert '"scenario": "intersection"' in result.output

    def test_validate_error_exits_1(self, runner, tmp_path):
        path = tmp_path / "bad.scn"
        path.write_text("[vehicle 1]\nroute = purple\nspawn = 0\n")
        result = runner.invoke(app, ["validate", "--scenario", str(path)])
        assert result.exit_code == 1

    def test_missing_scenario_exits_1(self, runner, tmp_path):
        result = runner.invoke(app, ["run", "--scenario", str(tmp_path / "nope.scn")])
        assert result.exit_code == 1

    def test_run_and_replay(self, runner, tmp_path):
        trace = tmp_path / "run.trace"
        metrics = tmp_path / "run.csv"
        ran = runner.invoke(app, ["run", "-s", "intersection", "--seed", "9", "--steps", "100",
                                  "--trace", str(trace), "--metrics", str(metrics)])
        assert ran.exit_code == 0
        assert trace.is_file() and metrics.is_file()

        replay_csv = tmp_path / "replay.csv"
        replayed = runner.invoke(app, ["replay", "--trace", str(trace), "--metrics", str(replay_csv)])
        assert replayed.exit_code == 0
        assert replay_csv.read_text() == metrics.read_text()

    def test_collision_exits_2(self, runner, tmp_path):
        trace = tmp_path / "crash.trace"
        ran = runner.invoke(app, ["run", "-s", str(SCENARIOS / "handshake_off.scn"), "--steps", "400",
                                  "--trace", str(trace)])
        assert ran.exit_code == 2
        assert runner.invoke(app, ["replay", "--trace", str(trace)]).exit_code == 2

    def test_malformed_trace_exits_1(self, runner, tmp_path):
        trace = tmp_path / "bad.trace"
        trace.write_text("0|1|Hovered|x=1.0\n")
        assert runner.invoke(app, ["replay", "--trace", str(trace)]).exit_code == 1

    def test_export_csv(self, runner, tmp_path):
        trace = tmp_path / "run.trace"
        out = tmp_path / "run.csv"
        runner.invoke(app, ["run", "-s", "intersection", "--steps", "5", "--trace", str(trace)])
        result = runner.invoke(app, ["export-csv", "--trace", str(trace), "--out", str(out)])
        assert result.exit_code == 0
        assert out.read_text().startswith("step,entity,event,fields")

    def test_plan(self, runner):
        result = runner.invoke(app, ["plan"])
        assert result.exit_code == 0
        assert '"benchmark"' in result.output
