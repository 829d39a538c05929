"""
Simulation Manager Tool for IAV Coop Sim.

Groups the file-level workflows behind one routed tool: validating scenarios,
running them to trace and metrics files, replaying saved traces, exporting
traces to CSV and describing traffic plans.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from ..core.base_tool import BaseTool, OperationResponse, operation_route
from ..core.config import config
from ..core.error_handler import EXIT_COLLISION, EXIT_OK
from ..core.monitoring import RunMonitor
from ..sim.metrics import MetricsReport, compute_metrics, metrics_to_csv
from ..sim.scenario import build_plan, load_scenario, validate_scenario
from ..sim.sim_engine import run as run_simulation
from ..sim.trace import has_collision, read_trace, trace_to_csv
from ..sim.traffic_plan import build_benchmark_plan, describe

logger = logging.getLogger(__name__)


def _exit_code(collided: bool) -> int:
    return EXIT_COLLISION if collided else EXIT_OK


def _fleet_summary(report: MetricsReport) -> Dict[str, Any]:
    fleet = report.fleet
    return {
        'vehicles': len(report.vehicles),
        'collisions': fleet.collisions,
        'full_stops': fleet.full_stops,
        'goals_reached': fleet.goals_reached,
        'messages': fleet.messages(),
        'throughput_goals_per_min': fleet.throughput_goals_per_min,
    }


class SimulationManager(BaseTool):
    """
    Scenario, run and trace workflows.

    Every operation reports ``exit_code`` in its data: 0 for a clean result,
    2 when the produced or replayed trace holds a CollisionDetected event.
    Failures surface through ``execute_operation`` with exit code 1.
    """

    def get_tool_name(self) -> str:
        return "simulation_manager"

    def get_tool_description(self) -> str:
        return "Validate scenarios, run simulations, replay traces and describe plans"

    @operation_route(
        name="validate",
        description="Parse a scenario file and check it against its traffic plan",
        required_params=["scenario_path"],
    )
    def validate(self, scenario_path: str) -> Dict[str, Any]:
        scenario = load_scenario(scenario_path)
        plan = validate_scenario(scenario)
        logger.info(f"Scenario {scenario_path} is valid")
        return {
            'message': f"Scenario '{scenario.run.name}' is valid",
            'scenario': scenario.run.name,
            'plan': plan.name,
            'vehicles': len(scenario.vehicles),
            'obstacles': len(scenario.obstacles),
            'pedestrians': len(scenario.pedestrians),
            'exit_code': EXIT_OK,
        }

    @operation_route(
        name="run",
        description="Simulate a scenario, writing the trace and the metrics CSV",
        required_params=["scenario_path"],
        optional_params=["seed", "steps", "trace_out", "metrics_out", "workers"],
    )
    def run(self, scenario_path: str, seed: int = 0, steps: Optional[int] = None,
            trace_out: Optional[str] = None, metrics_out: Optional[str] = None,
            workers: Optional[int] = None) -> Dict[str, Any]:
        """
        Run one simulation.

        Args:
            scenario_path: Scenario file
            seed: Unsigned 64-bit seed
            steps: Step budget (defaults to IAV_SIM_MAX_STEPS)
            trace_out: Where to write the trace
            metrics_out: Where to write the metrics CSV
            workers: Agent-stepping threads (defaults to IAV_SIM_WORKERS)
        """
        scenario = load_scenario(scenario_path)
        steps = config.default_max_steps if steps is None else steps
        workers = config.workers if workers is None else workers

        with RunMonitor(scenario.run.name) as monitor:
            result = run_simulation(scenario, seed, steps, workers=workers)
        report = compute_metrics(result.trace, result.dt)
        monitor.record_run(result.steps, report.fleet.messages(), result.collisions,
                           report.fleet.goals_reached, result.mutex_violations)

        if trace_out is not None:
            Path(trace_out).write_text(result.render(), encoding='utf-8')
            logger.info(f"Wrote {len(result.trace)} trace records to {trace_out}")
        if metrics_out is not None:
            Path(metrics_out).write_text(metrics_to_csv(report), encoding='utf-8')
            logger.info(f"Wrote metrics to {metrics_out}")
            if config.enable_metrics_export:
                exposition = Path(metrics_out).with_suffix('.prom')
                exposition.write_text(monitor.exposition(), encoding='utf-8')
                logger.info(f"Wrote Prometheus exposition to {exposition}")

        collided = has_collision(result.trace)
        return {
            'message': f"Ran '{scenario.run.name}' for {result.steps} steps",
            'scenario': scenario.run.name,
            'seed': seed,
            'steps': result.steps,
            'events': len(result.trace),
            'mutex_violations': result.mutex_violations,
            'fleet': _fleet_summary(report),
            'monitor': monitor.summary(),
            'exit_code': _exit_code(collided),
        }

    @operation_route(
        name="replay",
        description="Recompute metrics from a saved trace",
        required_params=["trace_path"],
        optional_params=["metrics_out"],
    )
    def replay(self, trace_path: str, metrics_out: Optional[str] = None) -> Dict[str, Any]:
        events, meta = read_trace(Path(trace_path).read_text(encoding='utf-8'))
        dt = float(meta.get('dt', 0.1))
        report = compute_metrics(events, dt)
        if metrics_out is not None:
            Path(metrics_out).write_text(metrics_to_csv(report), encoding='utf-8')
            logger.info(f"Wrote metrics to {metrics_out}")
        return {
            'message': f"Replayed {len(events)} trace records",
            'events': len(events),
            'steps': report.steps,
            'fleet': _fleet_summary(report),
            'exit_code': _exit_code(has_collision(events)),
        }

    @operation_route(
        name="export_trace_csv",
        description="Convert a trace file to CSV with columns step, entity, event, fields",
        required_params=["trace_path", "csv_out"],
    )
    def export_trace_csv(self, trace_path: str, csv_out: str) -> Dict[str, Any]:
        events, _ = read_trace(Path(trace_path).read_text(encoding='utf-8'))
        Path(csv_out).write_text(trace_to_csv(events), encoding='utf-8')
        return {
            'message': f"Exported {len(events)} records to {csv_out}",
            'events': len(events),
            'exit_code': EXIT_OK,
        }

    @operation_route(
        name="describe_plan",
        description="Summarize the traffic plan of a scenario, or the benchmark plan",
        required_params=[],
        optional_params=["scenario_path"],
    )
    def describe_plan(self, scenario_path: Optional[str] = None) -> Dict[str, Any]:
        if scenario_path is None:
            plan = build_benchmark_plan()
        else:
            plan = build_plan(load_scenario(scenario_path).plan)
        return {'plan': describe(plan), 'exit_code': EXIT_OK}


# Create global instance
simulation_manager = SimulationManager()


def simulation_manager_tool(operation: str, **kwargs: Any) -> str:
    """
    Run a simulation manager operation and return the response as JSON.

    Args:
        operation: The operation to perform
        **kwargs: Operation-specific parameters
    """
    response: OperationResponse = simulation_manager.execute_operation(operation, **kwargs)
    return response.to_json()


def response_exit_code(response: OperationResponse) -> int:
    """Exit code carried by a response, 1 when the operation failed before reporting one."""
    data = response.data or {}
    return int(data.get('exit_code', EXIT_OK if response.success else 1))


def response_summary(response: OperationResponse) -> str:
    """Compact JSON of a response's data for the console."""
    data = {k: v for k, v in (response.data or {}).items() if k not in ('success', 'message')}
    return json.dumps(data, default=str, sort_keys=True)
