"""
Tests for trace metrics and DENM lifecycle checks.
"""

import csv
import io
from pathlib import Path

import pytest

from ..core.utils import MalformedTrace
from ..sim.bus import BusConfig
from ..sim.metrics import (
    MESSAGE_COLUMNS, compute_metrics, denm_lifecycle_issues, metrics_to_csv, sent_messages,
)
from ..sim.perception import EntityRef
from ..sim.scenario import load_scenario
from ..sim.sim_engine import run
from ..sim.trace import EventKind, TraceEvent, has_collision, read_trace
from ..sim.wire_codec import (
    AckMcmMessage, CamMessage, CpmMessage, DenmMessage, DenmMessageType, InformationQuality,
    ManagementContainer, McmMessage, MessageId, SituationContainer, StationType, SubCauseCode,
    encode_hex, make_header,
)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def moved(step, station_id, speed, phase="CRUISING", x=0.0):
    return TraceEvent.make(step, EntityRef.vehicle(station_id), EventKind.MOVED, x=x, y=0.0,
                           heading=0.0, speed=speed, phase=phase)


def sent(step, station_id, message, seq=0):
    return TraceEvent.make(step, EntityRef.vehicle(station_id), EventKind.SENT, seq,
                           kind=MessageId(message.header.message_id).name, bytes=encode_hex(message))


def cam(station_id):
    return CamMessage(make_header(MessageId.CAM, station_id), 0, int(StationType.IAV), (0.0, 0.0))


@pytest.fixture(scope="module")
def intersection_trace():
    return run(load_scenario(SCENARIOS / "intersection.scn"), 0, 400).trace


@pytest.fixture(scope="module")
def removal_trace():
    return run(load_scenario(SCENARIOS / "obstacle_removal.scn"), 0, 1000).trace


class TestComputeMetrics:
    """Aggregation over hand-built traces."""

    def test_empty_trace(self):
        report = compute_metrics([])
        assert report.steps == 0
        assert report.vehicles == []
        fleet = report.fleet
        assert fleet.collisions == fleet.full_stops == fleet.goals_reached == 0
        assert fleet.messages() == {name: 0 for name in MESSAGE_COLUMNS}
        assert fleet.throughput_goals_per_min == 0.0

    def test_message_counts(self):
        trace = [sent(s, 1, cam(1)) for s in range(3)]
        report = compute_metrics(trace)
        assert report.vehicle(1).cam == 3
        assert report.fleet.messages()['cam'] == 3

    def test_full_stops_are_maximal_runs(self):
        """Speeds 1, 0, 0, 1, 0 make two full stops over three stopped steps."""
        trace = [moved(s, 1, v) for s, v in enumerate([1.0, 0.0, 0.0, 1.0, 0.0])]
        row = compute_metrics(trace).vehicle(1)
        assert (row.full_stops, row.stop_steps, row.wait_steps) == (2, 3, 0)

    def test_waiting_at_intersection_is_not_a_stop(self):
        trace = [moved(0, 1, 0.0, "WAITING(2)"), moved(1, 1, 0.0, "REQUESTING(2)"), moved(2, 1, 0.0)]
        row = compute_metrics(trace).vehicle(1)
        assert (row.full_stops, row.wait_steps) == (1, 2)

    def test_intersection_wait(self):
        """Wait runs from entering REQUESTING to entering CROSSING."""
        ref = EntityRef.vehicle(4)
        trace = [
            TraceEvent.make(10, ref, EventKind.PHASE_CHANGED, **{'from': "CRUISING", 'to': "REQUESTING(1)"}),
            TraceEvent.make(12, ref, EventKind.PHASE_CHANGED, **{'from': "REQUESTING(1)", 'to': "WAITING(1)"}),
            TraceEvent.make(16, ref, EventKind.PHASE_CHANGED, **{'from': "WAITING(1)", 'to': "CROSSING(1)"}),
            TraceEvent.make(30, ref, EventKind.PHASE_CHANGED, **{'from': "CROSSING(1)", 'to': "REQUESTING(2)"}),
            TraceEvent.make(32, ref, EventKind.PHASE_CHANGED, **{'from': "REQUESTING(2)", 'to': "CROSSING(2)"}),
        ]
        report = compute_metrics(trace)
        assert report.vehicle(4).mean_intersection_wait == 4.0
        assert report.fleet.mean_intersection_wait == 4.0

    def test_collisions(self):
        """Vehicle rows count their own collisions; the fleet counts events."""
        trace = [
            TraceEvent.make(5, EntityRef.vehicle(1), EventKind.COLLISION_DETECTED, **{'with': "2"}),
            TraceEvent.make(5, EntityRef.vehicle(2), EventKind.COLLISION_DETECTED, **{'with': "obs1"}),
        ]
        report = compute_metrics(trace)
        assert report.vehicle(1).collisions == 1
        assert report.vehicle(2).collisions == 2
        assert report.fleet.collisions == 2

    def test_throughput(self):
        """Three goals over 600 steps of 0.1 s is three goals per minute."""
        trace = [TraceEvent.make(s, EntityRef.vehicle(1), EventKind.GOAL_REACHED, x=0.0, y=0.0, count=1)
                 for s in (100, 200, 300)] + [moved(599, 1, 1.0)]
        report = compute_metrics(trace, dt=0.1)
        assert report.steps == 600
        assert report.fleet.throughput_goals_per_min == pytest.approx(3.0)

    def test_pending_deliveries_do_not_extend_the_run(self):
        """A delivery stamped after the last simulated step leaves the step count alone."""
        delivered = TraceEvent.make(12, EntityRef.vehicle(2), EventKind.DELIVERED,
                                    **{'from': 1, 'kind': "CAM", 'sent': 9})
        trace = [moved(9, 1, 1.0), sent(9, 1, cam(1)), delivered]
        assert compute_metrics(trace).steps == 10

    def test_distance(self):
        trace = [moved(0, 1, 1.0, x=0.0), moved(1, 1, 1.0, x=0.1), moved(2, 1, 1.0, x=0.3)]
        assert compute_metrics(trace).vehicle(1).distance_m == pytest.approx(0.3)

    def test_out_of_order(self):
        with pytest.raises(MalformedTrace):
            compute_metrics([moved(2, 1, 1.0), moved(1, 1, 1.0)])

    def test_unknown_message_kind(self):
        bad = TraceEvent.make(0, EntityRef.vehicle(1), EventKind.SENT, kind="BSM", bytes="")
        with pytest.raises(MalformedTrace):
            compute_metrics([bad])

    def test_csv(self):
        report = compute_metrics([sent(0, 1, cam(1)), moved(0, 2, 0.0)])
        rows = list(csv.DictReader(io.StringIO(metrics_to_csv(report))))
        assert [r['entity'] for r in rows] == ["1", "2", "fleet"]
        assert rows[0]['cam'] == "1"
        assert rows[0]['throughput_goals_per_min'] == ""
        assert rows[2]['full_stops'] == "1"


class TestReplay:
    """Metrics from a saved trace equal those of the run."""

    def test_replay_matches_run(self):
        result = run(load_scenario(SCENARIOS / "intersection.scn"), 0, 400)
        events, meta = read_trace(result.render())
        replayed = compute_metrics(events, float(meta['dt']))
        assert replayed.to_dict() == compute_metrics(result.trace, result.dt).to_dict()
        assert metrics_to_csv(replayed) == metrics_to_csv(compute_metrics(result.trace, result.dt))

    def test_steps_match_run_with_latency(self):
        """Messages still in flight when the run stops do not count as extra steps."""
        scenario = load_scenario(SCENARIOS / "intersection.scn")
        scenario = scenario.model_copy(update={'bus': BusConfig(latency_steps=3)})
        result = run(scenario, 0, 41)
        assert max(e.step for e in result.trace) == 43
        assert compute_metrics(result.trace, result.dt).steps == result.steps == 41


class TestMessagePatterns:
    """Message sequences of the shipped scenarios."""

    def test_blocked_robot_reports_before_alerting(self, intersection_trace):
        """robot2 sees the goods first (CPM) and only then raises a DENM."""
        kinds = [type(m) for _, _, m in sent_messages(intersection_trace, 2)
                 if isinstance(m, (CpmMessage, DenmMessage))]
        assert CpmMessage in kinds and DenmMessage in kinds
        assert kinds.index(CpmMessage) < kinds.index(DenmMessage)

    @pytest.mark.parametrize("station_id", [3, 4])
    def test_junction_pair_alerts_without_cpm(self, intersection_trace, station_id):
        """robot3 and robot4 are already inside each other's safety distance in the junction."""
        messages = [(step, m) for step, _, m in sent_messages(intersection_trace, station_id)]
        first_denm = next(step for step, m in messages if isinstance(m, DenmMessage))
        assert not any(isinstance(m, CpmMessage) and step <= first_denm for step, m in messages)

    def test_junction_pair_negotiates(self, intersection_trace):
        """Both request the junction; robot3 refuses robot4 and crosses first."""
        for station_id in (3, 4):
            assert any(isinstance(m, McmMessage) for _, _, m in sent_messages(intersection_trace, station_id))
        refusals = [m for _, _, m in sent_messages(intersection_trace, 3)
                    if isinstance(m, AckMcmMessage) and m.station_id_destinator == 4]
        assert refusals and refusals[0].ack_mcm_response is False
        crossing = {}
        for e in intersection_trace:
            if e.kind is EventKind.PHASE_CHANGED and e.get('to') == "CROSSING(1)":
                crossing.setdefault(e.entity.index, e.step)
        assert crossing[3] < crossing[4]
        first_denm = next(m for _, _, m in sent_messages(intersection_trace, 4) if isinstance(m, DenmMessage))
        assert first_denm.situation.sub_cause_code == SubCauseCode.LONGITUDINAL_COLLISION_RISK
        assert not has_collision(intersection_trace)

    def test_removal_lifecycle_is_clean(self, removal_trace):
        """TRIGGER, escalation once blocked, and TERMINATE after the goods are removed."""
        assert denm_lifecycle_issues(removal_trace) == []
        denms = [(step, m) for step, _, m in sent_messages(removal_trace, 1) if isinstance(m, DenmMessage)]
        types = [DenmMessageType(m.message_type) for _, m in denms]
        assert types[0] is DenmMessageType.TRIGGER
        assert types[-1] is DenmMessageType.TERMINATE
        assert any(m.situation.information_quality == InformationQuality.HIGHEST for _, m in denms)
        terminate_step = denms[-1][0]
        assert terminate_step >= 250

    def test_lifecycle_flags_orphans(self):
        """An UPDATE with no TRIGGER and an unterminated TRIGGER are both reported."""
        def denm(kind):
            return DenmMessage(make_header(MessageId.DENM, 1), int(kind), int(StationType.IAV),
                               ManagementContainer(0, 0.5, 5), SituationContainer(97, 1, 1))
        trace = [sent(0, 1, denm(DenmMessageType.UPDATE)), sent(1, 1, denm(DenmMessageType.TRIGGER))]
        assert len(denm_lifecycle_issues(trace)) == 2
