"""Timeline simulation of compute/communication overlap.

Events carry a duration, a stream ("compute" or "comm") and dependencies.
Synchronous mode serializes everything on one stream in topological order;
asynchronous mode gives each stream its own queue so communication hides
behind compute whenever dependencies allow.  Asynchronous makespan is never
worse than synchronous for the same event set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter

from .errors import ScheduleError

STREAMS = ("compute", "comm")
TIMELINE_SCHEMA = "evoplan-timeline-v1"


@dataclass(frozen=True)
class TimelineEvent:
    name: str
    duration: float
    stream: str = "compute"
    deps: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.duration < 0:
            raise ScheduleError(f"event {self.name!r} has negative duration")
        if self.stream not in STREAMS:
            raise ScheduleError(
                f"event {self.name!r} has unknown stream {self.stream!r}")
        object.__setattr__(self, "deps", tuple(self.deps))


@dataclass(frozen=True)
class ScheduleResult:
    mode: str
    makespan: float
    timeline: dict[str, tuple[float, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "schema": "evoplan-schedule-v1",
            "mode": self.mode,
            "makespan": self.makespan,
            "timeline": {k: list(v) for k, v in self.timeline.items()},
        }, sort_keys=True)


def _topo_order(events: list[TimelineEvent]) -> list[TimelineEvent]:
    by_name = {}
    for e in events:
        if e.name in by_name:
            raise ScheduleError(f"duplicate event name {e.name!r}")
        by_name[e.name] = e
    ts = TopologicalSorter()
    order_index = {e.name: i for i, e in enumerate(events)}
    for e in events:
        for d in e.deps:
            if d not in by_name:
                raise ScheduleError(f"event {e.name!r} depends on unknown {d!r}")
        ts.add(e.name, *e.deps)
    try:
        names = list(ts.static_order())
    except CycleError as exc:
        raise ScheduleError(f"dependency cycle: {exc.args[1]}") from exc
    # Stable order: ready events run in input order.
    names.sort(key=lambda n: order_index[n])
    seen: set[str] = set()
    ordered = []
    pending = list(names)
    while pending:
        progressed = False
        rest = []
        for n in pending:
            if all(d in seen for d in by_name[n].deps):
                ordered.append(by_name[n])
                seen.add(n)
                progressed = True
            else:
                rest.append(n)
        if not progressed:
            raise ScheduleError("dependency cycle")
        pending = rest
    return ordered


def simulate_schedule(events: list[TimelineEvent], mode: str) -> ScheduleResult:
    """Simulate the event set; mode is "sync" or "async"."""
    if mode not in ("sync", "async"):
        raise ScheduleError(f"unknown schedule mode {mode!r}")
    ordered = _topo_order(events)
    ends: dict[str, float] = {}
    timeline: dict[str, tuple[float, float]] = {}
    stream_free = dict.fromkeys(STREAMS, 0.0)
    serial_free = 0.0
    for e in ordered:
        ready = max((ends[d] for d in e.deps), default=0.0)
        if mode == "sync":
            start = max(serial_free, ready)
            serial_free = start + e.duration
        else:
            start = max(stream_free[e.stream], ready)
            stream_free[e.stream] = start + e.duration
        ends[e.name] = start + e.duration
        timeline[e.name] = (start, ends[e.name])
    makespan = max(ends.values(), default=0.0)
    return ScheduleResult(mode, makespan, timeline)


def events_to_json(events: list[TimelineEvent]) -> str:
    return json.dumps({
        "schema": TIMELINE_SCHEMA,
        "events": [
            {"name": e.name, "duration": e.duration, "stream": e.stream,
             "deps": list(e.deps)}
            for e in events
        ],
    }, sort_keys=True)


def events_from_json(text: str) -> list[TimelineEvent]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScheduleError(
            f"malformed timeline JSON at line {exc.lineno}: {exc.msg}") from exc
    if doc.get("schema") != TIMELINE_SCHEMA:
        raise ScheduleError(f"unexpected timeline schema {doc.get('schema')!r}")
    return [
        TimelineEvent(e["name"], e["duration"], e.get("stream", "compute"),
                      tuple(e.get("deps", ())))
        for e in doc["events"]
    ]
