from __future__ import annotations

import logging
import os
import time

import pytest

from provmesh.adapters import (
    LogFileObserver,
    RecordStoreObserver,
    RunRecord,
    SchedulerObserver,
    TaskLogFormatter,
    format_line,
    parse_line,
    read_run,
    write_run,
)
from provmesh.adapters.recordstore import UnreadableRecord
from provmesh.model import Status
from provmesh.observers import AdapterKind, ObserverConfig
from provmesh.scheduler import MiniScheduler
from provmesh.timeutil import format_ns


class ListSink:
    """Stands in for an EventBuffer and keeps every event."""

    def __init__(self) -> None:
        self.events = []

    def emit(self, event) -> None:
        self.events.append(event)

    def start(self) -> None:
        pass

    def stop(self) -> None:
        pass


def _obs(cls, kind, **kw):
    sink = ListSink()
    return cls(ObserverConfig(kind, **kw), sink), sink


# -- scheduler plugin ------------------------------------------------------------


def test_scheduler_observer_reports_each_transition():
    obs, sink = _obs(SchedulerObserver, AdapterKind.SCHEDULER_PLUGIN, campaign_id="c")
    obs.start()
    with MiniScheduler(2, workflow_id="wf", campaign_id="c") as sched:
        sched.register("double", lambda x: {"y": 2 * x})
        sched.register("boom", lambda: 1 / 0)
        sched.register_plugin(obs)
        ok = sched.submit("double", x=3)
        bad = sched.submit("boom")
        assert ok.result() == {"y": 6}
        with pytest.raises(ZeroDivisionError):
            bad.result()
    obs.stop()
    by_task: dict[str, list] = {}
    for ev in sink.events:
        by_task.setdefault(ev.task_id, []).append(ev)
    ok_events = by_task[ok.task_id]
    assert [e.new_status for e in ok_events] == [Status.SUBMITTED, Status.RUNNING, Status.FINISHED]
    assert all(e.payload["used"] == {"x": 3} for e in ok_events)
    assert ok_events[-1].payload["generated"] == {"y": 6}
    assert [e.sequence_no for e in ok_events] == sorted(e.sequence_no for e in ok_events)
    assert ok_events[-1].workflow_id == "wf" and ok_events[-1].adapter_kind == "SCHEDULER_PLUGIN"
    err = by_task[bad.task_id][-1]
    assert err.new_status is Status.ERROR and "ZeroDivisionError" in err.payload["error"]


def test_scheduler_observer_wraps_non_mapping_results():
    obs, sink = _obs(SchedulerObserver, AdapterKind.SCHEDULER_PLUGIN)
    obs.start()
    with MiniScheduler(1) as sched:
        sched.register("seven", lambda: 7)
        sched.register_plugin(obs)
        sched.gather([sched.submit("seven")])
    assert sink.events[-1].payload["generated"] == {"out": 7}


def test_disarmed_scheduler_observer_is_silent():
    obs, sink = _obs(SchedulerObserver, AdapterKind.SCHEDULER_PLUGIN)
    with MiniScheduler(1) as sched:
        sched.register("f", lambda: 1)
        sched.register_plugin(obs)
        sched.gather([sched.submit("f")])
    assert sink.events == []


# -- log file --------------------------------------------------------------------


def test_line_round_trip():
    line = format_line("t1", "wf", Status.FINISHED, {"generated": {"a": 1}}, timestamp=1_700_000_000_123_456_789)
    rec = parse_line(line)
    assert rec.task_id == "t1" and rec.workflow_id == "wf" and rec.kind is Status.FINISHED
    assert rec.timestamp == 1_700_000_000_123_456_789
    assert rec.payload == {"generated": {"a": 1}}
    for bad in ("", "garbage", line.replace("kind=FINISHED", "kind=DONE"), line.rsplit(" ", 1)[0] + " [1]"):
        with pytest.raises(ValueError):
            parse_line(bad)


def test_three_lines_give_three_events_stamped_with_line_time(tmp_path):
    path = tmp_path / "task.log"
    ts = [1_700_000_000_000_000_000 + i * 1_000_000 for i in range(3)]
    lines = [
        format_line("t1", "wf", Status.SUBMITTED, {"used": {"a": 1}}, timestamp=ts[0]),
        format_line("t1", "wf", Status.RUNNING, {}, timestamp=ts[1]),
        format_line("t1", "wf", Status.FINISHED, {"generated": {"b": 2}}, timestamp=ts[2]),
    ]
    path.write_text("\n".join(lines) + "\n")
    obs, sink = _obs(LogFileObserver, AdapterKind.LOG_FILE, locator=str(path))
    obs.observe()
    assert [e.new_status for e in sink.events] == [Status.SUBMITTED, Status.RUNNING, Status.FINISHED]
    assert [e.observed_at for e in sink.events] == ts
    assert obs.watermark == path.stat().st_size
    obs.observe()
    assert len(sink.events) == 3


def test_torn_line_waits_for_newline(tmp_path):
    path = tmp_path / "task.log"
    line = format_line("t1", "wf", Status.FINISHED, {"generated": {"b": 2}})
    path.write_text(line[:20])
    obs, sink = _obs(LogFileObserver, AdapterKind.LOG_FILE, locator=str(path))
    obs.observe()
    assert sink.events == [] and obs.watermark == 0 and obs.malformed == 0
    with open(path, "a") as fh:
        fh.write(line[20:] + "\n")
    obs.observe()
    assert len(sink.events) == 1 and sink.events[0].payload["generated"] == {"b": 2}


def test_malformed_lines_are_counted_and_skipped(tmp_path):
    path = tmp_path / "task.log"
    good = format_line("t1", "wf", Status.RUNNING, {})
    path.write_text(f"not a task line\n{good}\n\n")
    obs, sink = _obs(LogFileObserver, AdapterKind.LOG_FILE, locator=str(path))
    obs.observe()
    assert obs.malformed == 1 and len(sink.events) == 1


def test_rotation_restarts_at_zero(tmp_path):
    path = tmp_path / "task.log"
    path.write_text("".join(format_line(f"t{i}", "wf", Status.RUNNING, {}) + "\n" for i in range(5)))
    obs, sink = _obs(LogFileObserver, AdapterKind.LOG_FILE, locator=str(path))
    obs.observe()
    os.rename(path, tmp_path / "task.log.1")
    path.write_text(format_line("t9", "wf", Status.FINISHED, {}) + "\n")
    obs.observe()
    assert obs.rotations == 1
    assert [e.task_id for e in sink.events][-1] == "t9" and len(sink.events) == 6


def test_formatter_writes_parseable_lines(tmp_path):
    path = tmp_path / "task.log"
    logger = logging.getLogger("test_adapters.formatter")
    logger.propagate = False
    handler = logging.FileHandler(path)
    handler.setFormatter(TaskLogFormatter())
    logger.addHandler(handler)
    try:
        logger.warning("x", extra={"task": "t1", "wf": "wf", "kind": Status.ERROR, "payload": {"error": "bad"}})
    finally:
        handler.close()
        logger.removeHandler(handler)
    rec = parse_line(path.read_text().strip())
    assert rec.level == "WARNING" and rec.kind is Status.ERROR and rec.payload == {"error": "bad"}


# -- run-record directory --------------------------------------------------------


def test_run_record_round_trip_and_validation(tmp_path):
    run = RunRecord("r1", params={"a": 1}, metrics={"m": 0.5}, status="FINISHED", start_time=format_ns(0))
    got = read_run(write_run(tmp_path, run))
    assert got.to_dict() == run.to_dict() and got.last_modified
    (tmp_path / "bad.json").write_text('{"run_id": "x", "status": "EXPLODED"}')
    with pytest.raises(UnreadableRecord):
        read_run(tmp_path / "bad.json")
    (tmp_path / "torn.json").write_text('{"run_id": ')
    with pytest.raises(UnreadableRecord):
        read_run(tmp_path / "torn.json")


def test_record_store_maps_runs_onto_tasks(tmp_path):
    tags = {"workflow_id": "wf3", "campaign_id": "c", "user": "ana"}
    write_run(
        tmp_path,
        RunRecord("run-1", params={"alpha": 0.1}, metrics={"mse": 2.3}, artifacts={"plot": "file:///p.png"},
                  status="FINISHED", start_time=format_ns(10**18), end_time=format_ns(10**18 + 5), tags=tags),
    )
    obs, sink = _obs(RecordStoreObserver, AdapterKind.RECORD_STORE, locator=str(tmp_path))
    obs.observe()
    (ev,) = sink.events
    assert ev.task_id == "run-1" and ev.new_status is Status.FINISHED
    assert ev.payload["used"] == {"alpha": 0.1}
    assert ev.payload["generated"] == {"mse": 2.3, "plot": "file:///p.png"}
    assert ev.payload["user"] == "ana"
    assert ev.workflow_id == "wf3" and ev.campaign_id == "c"
    assert ev.payload["started_at"] == format_ns(10**18)
    obs.observe()
    assert len(sink.events) == 1  # unchanged file, no new event


def test_record_store_emits_only_changed_fields(tmp_path):
    write_run(tmp_path, RunRecord("r", params={"a": 1, "b": 2}, metrics={"m": 1.0}, status="RUNNING"))
    obs, sink = _obs(RecordStoreObserver, AdapterKind.RECORD_STORE, locator=str(tmp_path))
    obs.observe()
    time.sleep(0.01)
    write_run(tmp_path, RunRecord("r", params={"a": 1, "b": 2}, metrics={"m": 0.5, "n": 3}, status="FINISHED"))
    obs.observe()
    assert len(sink.events) == 2
    second = sink.events[1]
    assert second.new_status is Status.FINISHED
    assert second.payload.get("used") is None
    assert second.payload["generated"] == {"m": 0.5, "n": 3}


@pytest.mark.parametrize("status, want", [("SCHEDULED", Status.SUBMITTED), ("FAILED", Status.ERROR), ("KILLED", Status.ERROR)])
def test_record_status_mapping(tmp_path, status, want):
    write_run(tmp_path, RunRecord("r", status=status))
    obs, sink = _obs(RecordStoreObserver, AdapterKind.RECORD_STORE, locator=str(tmp_path))
    obs.observe()
    assert sink.events[0].new_status is want


def test_unreadable_records_are_skipped(tmp_path):
    (tmp_path / "broken.json").write_text("{")
    write_run(tmp_path, RunRecord("ok", status="RUNNING"))
    obs, sink = _obs(RecordStoreObserver, AdapterKind.RECORD_STORE, locator=str(tmp_path))
    obs.observe()
    assert obs.unreadable == 1 and [e.task_id for e in sink.events] == ["ok"]
