#!/usr/bin/env python3
"""
CLI entry point for IAV Coop Sim.
Provides the ``iav-coop-sim`` command line built with Typer: run scenarios,
replay traces, validate scenario files and inspect traffic plans.

Exit codes: 0 on success, 1 on scenario or input errors, 2 when the produced
or replayed trace records a collision.
"""

import logging
import sys
from typing import Optional

import typer

from . import __version__, __description__
from .core.config import config
from .core.base_tool import OperationResponse
from .tools.simulation_manager import simulation_manager, response_exit_code, response_summary

app = typer.Typer(
    name="iav-coop-sim",
    help="Deterministic warehouse IAV simulator with cooperative messaging",
    add_completion=False,
    rich_markup_mode="rich"
)

LOG_LEVEL_HELP = "Log level (DEBUG, INFO, WARNING, ERROR)"


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Setup logging configuration. Console logs go to standard error."""
    level = getattr(logging, log_level.upper(), logging.INFO)
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    handlers: list[logging.Handler] = []

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    handlers.append(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        handlers.append(file_handler)

    logging.basicConfig(
        level=level,
        handlers=handlers,
        force=True
    )


def _finish(response: OperationResponse) -> None:
    """Report a tool response and leave with its exit code."""
    code = response_exit_code(response)
    if not response.success:
        typer.echo(f"❌ {response.message}", err=True)
        for suggestion in (response.data or {}).get('suggestions', []):
            typer.echo(f"   {suggestion}", err=True)
    else:
        typer.echo(response_summary(response))
        if code:
            typer.echo("❌ Collision detected in trace", err=True)
    raise typer.Exit(code)


@app.command()
def run(
    scenario: str = typer.Option(..., "--scenario", "-s", help="Scenario file or shipped scenario name"),
    seed: int = typer.Option(0, "--seed", help="Unsigned 64-bit seed"),
    steps: Optional[int] = typer.Option(None, "--steps", "-k",
                                        help="Step budget (default IAV_SIM_MAX_STEPS)"),
    trace: Optional[str] = typer.Option(None, "--trace", "-t", help="Trace output file"),
    metrics: Optional[str] = typer.Option(None, "--metrics", "-m", help="Metrics CSV output file"),
    workers: Optional[int] = typer.Option(None, "--workers", "-w",
                                          help="Agent-stepping threads (default IAV_SIM_WORKERS)"),
    log_level: str = typer.Option(config.log_level, "--log-level", "-l", help=LOG_LEVEL_HELP),
    log_file: Optional[str] = typer.Option(None, "--log-file", "-f", help="Log file path"),
) -> None:
    """Run a scenario and write its trace and metrics."""
    setup_logging(log_level, log_file)
    response = simulation_manager.execute_operation(
        "run", scenario_path=str(config.scenario_path(scenario)), seed=seed, steps=steps,
        trace_out=trace, metrics_out=metrics, workers=workers)
    _finish(response)


@app.command()
def replay(
    trace: str = typer.Option(..., "--trace", "-t", help="Trace file written by 'run'"),
    metrics: Optional[str] = typer.Option(None, "--metrics", "-m", help="Metrics CSV output file"),
    log_level: str = typer.Option(config.log_level, "--log-level", "-l", help=LOG_LEVEL_HELP),
    log_file: Optional[str] = typer.Option(None, "--log-file", "-f", help="Log file path"),
) -> None:
    """Recompute metrics from a saved trace."""
    setup_logging(log_level, log_file)
    _finish(simulation_manager.execute_operation("replay", trace_path=trace, metrics_out=metrics))


@app.command()
def validate(
    scenario: str = typer.Option(..., "--scenario", "-s", help="Scenario file or shipped scenario name"),
    log_level: str = typer.Option(config.log_level, "--log-level", "-l", help=LOG_LEVEL_HELP),
    log_file: Optional[str] = typer.Option(None, "--log-file", "-f", help="Log file path"),
) -> None:
    """Check a scenario file without running it."""
    setup_logging(log_level, log_file)
    _finish(simulation_manager.execute_operation(
        "validate", scenario_path=str(config.scenario_path(scenario))))


@app.command()
def plan(
    scenario: Optional[str] = typer.Option(None, "--scenario", "-s",
                                           help="Scenario whose plan to show (default: benchmark)"),
    log_level: str = typer.Option(config.log_level, "--log-level", "-l", help=LOG_LEVEL_HELP),
    log_file: Optional[str] = typer.Option(None, "--log-file", "-f", help="Log file path"),
) -> None:
    """Print a summary of a traffic plan."""
    setup_logging(log_level, log_file)
    path = str(config.scenario_path(scenario)) if scenario else None
    _finish(simulation_manager.execute_operation("describe_plan", scenario_path=path))


@app.command("export-csv")
def export_csv(
    trace: str = typer.Option(..., "--trace", "-t", help="Trace file written by 'run'"),
    out: str = typer.Option(..., "--out", "-o", help="CSV output file"),
    log_level: str = typer.Option(config.log_level, "--log-level", "-l", help=LOG_LEVEL_HELP),
    log_file: Optional[str] = typer.Option(None, "--log-file", "-f", help="Log file path"),
) -> None:
    """Convert a trace to CSV (step, entity, event, fields)."""
    setup_logging(log_level, log_file)
    _finish(simulation_manager.execute_operation("export_trace_csv", trace_path=trace, csv_out=out))


@app.command()
def version() -> None:
    """Show version information."""
    typer.echo(f"IAV Coop Sim v{__version__}")
    typer.echo(__description__)


def main() -> None:
    """Main entry point."""
    app()


if __name__ == "__main__":
    main()
