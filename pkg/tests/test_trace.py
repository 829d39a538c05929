"""
Tests for trace records, files and CSV export.
"""

import csv
import io

import pytest

from ..core.utils import MalformedTrace
from ..sim.perception import EntityRef
from ..sim.trace import (
    EventKind, TraceEvent, check_order, format_trace, has_collision, parse_event, read_trace,
    sort_events, trace_to_csv, write_trace,
)


@pytest.fixture
def events():
    """A short, ordered trace."""
    return [
        TraceEvent.make(0, EntityRef.vehicle(1), EventKind.MOVED, x=1.0, y=10.0, heading=0.0,
                        speed=1.0, phase="CRUISING"),
        TraceEvent.make(0, EntityRef.vehicle(1), EventKind.SENT, kind="CAM", bytes="0101"),
        TraceEvent.make(0, EntityRef.vehicle(1), EventKind.SENT, 1, kind="DENM", bytes="0102"),
        TraceEvent.make(0, EntityRef.obstacle(2), EventKind.OBSTACLE_INJECTED, x=35.0, y=10.0,
                        radius=0.3, kind="static"),
        TraceEvent.make(1, EntityRef.vehicle(2), EventKind.PHASE_CHANGED,
                        **{'from': "CRUISING", 'to': "REQUESTING(3)"}),
    ]


class TestRecords:
    """Single trace lines."""

    def test_render(self, events):
        assert events[0].render() == "0|1|Moved|x=1.0|y=10.0|heading=0.0|speed=1.0|phase=CRUISING"
        assert events[3].render() == "0|obs2|ObstacleInjected|x=35.0|y=10.0|radius=0.3|kind=static"

    def test_negative_zero_renders_as_zero(self):
        event = TraceEvent.make(0, EntityRef.vehicle(1), EventKind.MOVED, x=-0.0)
        assert event.get('x') == "0.0"

    def test_parse_inverts_render(self, events):
        for event in events:
            parsed = parse_event(event.render())
            assert parsed.render() == event.render()
            assert parsed.kind is event.kind

    @pytest.mark.parametrize("line", [
        "0|1",
        "x|1|Moved",
        "-1|1|Moved",
        "0|robot|Moved",
        "0|1|Teleported",
        "0|1|Moved|speed",
    ])
    def test_malformed(self, line):
        with pytest.raises(MalformedTrace):
            parse_event(line)

    def test_number(self, events):
        assert events[0].number('speed') == 1.0
        with pytest.raises(MalformedTrace):
            events[0].number('missing')
        with pytest.raises(MalformedTrace):
            events[0].number('phase')


class TestOrdering:
    """Trace order is (step, entity, event kind, emission)."""

    def test_sort(self, events):
        shuffled = [events[4], events[3], events[2], events[0], events[1]]
        assert sort_events(shuffled) == events

    def test_vehicles_before_obstacles(self):
        a = TraceEvent.make(0, EntityRef.obstacle(1), EventKind.MOVED)
        b = TraceEvent.make(0, EntityRef.vehicle(99), EventKind.MISSION_DONE)
        assert sort_events([a, b]) == [b, a]

    def test_check_order(self, events):
        check_order(events)
        with pytest.raises(MalformedTrace):
            check_order([events[4], events[0]])


class TestFiles:
    """Trace text files."""

    def test_header_carries_meta(self, events):
        text = format_trace(events, {'dt': 0.1, 'seed': 7, 'steps': 2})
        assert text.splitlines()[0] == "# iav-coop-sim trace dt=0.1 seed=7 steps=2"

    def test_read_restores_events_and_meta(self, events):
        parsed, meta = read_trace(format_trace(events, {'dt': 0.1, 'seed': 7}))
        assert parsed == events
        assert meta == {'dt': '0.1', 'seed': '7'}

    def test_write(self, events):
        stream = io.StringIO()
        write_trace(events, stream)
        assert stream.getvalue() == format_trace(events)

    def test_out_of_order_file(self, events):
        text = "\n".join(e.render() for e in [events[4], events[0]])
        with pytest.raises(MalformedTrace) as exc_info:
            read_trace(text)
        assert exc_info.value.line == 2

    def test_blank_lines_ignored(self, events):
        parsed, _ = read_trace("\n" + format_trace(events) + "\n\n")
        assert len(parsed) == len(events)

    def test_csv(self, events):
        rows = list(csv.reader(io.StringIO(trace_to_csv(events))))
        assert rows[0] == ["step", "entity", "event", "fields"]
        assert rows[4] == ["0", "obs2", "ObstacleInjected", "x=35.0|y=10.0|radius=0.3|kind=static"]
        assert len(rows) == len(events) + 1

    def test_has_collision(self, events):
        assert not has_collision(events)
        hit = TraceEvent.make(3, EntityRef.vehicle(1), EventKind.COLLISION_DETECTED, **{'with': "2"})
        assert has_collision(events + [hit])
