import json

import numpy as np
import pytest

from evoplan.errors import ScheduleError
from evoplan.scheduling import (
    TimelineEvent,
    events_from_json,
    events_to_json,
    simulate_schedule,
)


def _worked_example():
    return [
        TimelineEvent("attention_compute", 10.0, "compute"),
        TimelineEvent("axis_switch", 4.0, "comm"),
        TimelineEvent("pair_update", 5.0, "compute",
                      deps=("attention_compute", "axis_switch")),
    ]


def test_worked_example_makespans():
    events = _worked_example()
    sync = simulate_schedule(events, "sync")
    overlap = simulate_schedule(events, "async")
    assert sync.makespan == 19.0
    assert overlap.makespan == 15.0
    # async: the 4-unit transfer hides entirely behind the 10-unit compute
    assert overlap.timeline["axis_switch"] == (0.0, 4.0)
    assert overlap.timeline["pair_update"] == (10.0, 15.0)
    assert sync.timeline["pair_update"] == (14.0, 19.0)


def test_comm_free_timeline_sync_equals_async():
    events = [
        TimelineEvent("a", 3.0, "compute"),
        TimelineEvent("b", 2.0, "compute", deps=("a",)),
        TimelineEvent("c", 4.0, "compute", deps=("b",)),
    ]
    assert simulate_schedule(events, "sync").makespan == \
        simulate_schedule(events, "async").makespan == 9.0


def test_event_validation():
    with pytest.raises(ScheduleError):
        TimelineEvent("x", -1.0)
    with pytest.raises(ScheduleError):
        TimelineEvent("x", 1.0, "gpu")


def test_cycle_and_unknown_dep_detection():
    cyc = [
        TimelineEvent("a", 1.0, deps=("b",)),
        TimelineEvent("b", 1.0, deps=("a",)),
    ]
    with pytest.raises(ScheduleError):
        simulate_schedule(cyc, "sync")
    with pytest.raises(ScheduleError):
        simulate_schedule([TimelineEvent("a", 1.0, deps=("ghost",))], "sync")
    with pytest.raises(ScheduleError):
        simulate_schedule([TimelineEvent("a", 1.0),
                           TimelineEvent("a", 2.0)], "sync")
    with pytest.raises(ScheduleError):
        simulate_schedule([TimelineEvent("a", 1.0)], "turbo")


def _random_dag(rng, n_events):
    events = []
    for i in range(n_events):
        n_deps = int(rng.integers(0, min(i, 3) + 1))
        deps = tuple(f"e{j}" for j in sorted(
            rng.choice(i, size=n_deps, replace=False))) if n_deps else ()
        stream = "comm" if rng.random() < 0.4 else "compute"
        events.append(TimelineEvent(
            f"e{i}", float(rng.uniform(0.0, 10.0)), stream, deps))
    return events


def test_async_never_slower_on_500_random_dags():
    rng = np.random.default_rng(0)
    for _ in range(500):
        events = _random_dag(rng, int(rng.integers(1, 14)))
        sync = simulate_schedule(events, "sync")
        overlap = simulate_schedule(events, "async")
        assert overlap.makespan <= sync.makespan + 1e-9


def test_timelines_respect_dependencies_and_streams():
    rng = np.random.default_rng(1)
    events = _random_dag(rng, 12)
    by_name = {e.name: e for e in events}
    for mode in ("sync", "async"):
        result = simulate_schedule(events, mode)
        for e in events:
            start, end = result.timeline[e.name]
            assert end == pytest.approx(start + e.duration)
            for d in e.deps:
                assert start >= result.timeline[d][1] - 1e-9
        # no overlap within any single stream (sync: any two events)
        names = list(result.timeline)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if mode == "async" and \
                        by_name[a].stream != by_name[b].stream:
                    continue
                sa, ea = result.timeline[a]
                sb, eb = result.timeline[b]
                assert ea <= sb + 1e-9 or eb <= sa + 1e-9


def test_events_json_round_trip():
    events = _worked_example()
    back = events_from_json(events_to_json(events))
    assert back == events
    with pytest.raises(ScheduleError):
        events_from_json("{bad")
    with pytest.raises(ScheduleError):
        events_from_json('{"schema": "nope"}')


def test_schedule_result_json():
    doc = json.loads(simulate_schedule(_worked_example(), "async").to_json())
    assert doc["schema"] == "evoplan-schedule-v1"
    assert doc["makespan"] == 15.0
    assert doc["timeline"]["pair_update"] == [10.0, 15.0]


def test_empty_timeline():
    assert simulate_schedule([], "sync").makespan == 0.0
    assert simulate_schedule([], "async").makespan == 0.0
