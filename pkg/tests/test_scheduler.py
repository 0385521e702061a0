from __future__ import annotations

import math
import threading
import time

import pytest

from provmesh.model import Status
from provmesh.scheduler import MiniScheduler, TaskFailed, Transition, UnknownActivity


def incr(n: int) -> int:
    return n + 1


class Recorder:
    def __init__(self) -> None:
        self.seen: list[Transition] = []
        self._lock = threading.Lock()

    def callback(self, transition: Transition) -> None:
        with self._lock:
            self.seen.append(transition)

    def statuses(self, task_id: str) -> list[Status]:
        return [t.status for t in self.seen if t.task_id == task_id]


def test_plugin_sees_three_transitions_in_order():
    rec = Recorder()
    with MiniScheduler(2) as sched:
        sched.register("incr", incr)
        sched.register_plugin(rec)
        fut = sched.submit("incr", n=1)
        assert sched.gather([fut]) == [2]
    assert rec.statuses(fut.task_id) == [Status.SUBMITTED, Status.RUNNING, Status.FINISHED]
    fin = rec.seen[-1]
    assert fin.result == 2 and fin.spec.args == {"n": 1}
    assert rec.seen[0].at_ns <= rec.seen[1].at_ns <= fin.at_ns


def test_two_plugins_see_identical_sequences():
    a, b = Recorder(), Recorder()
    with MiniScheduler(4) as sched:
        sched.register("incr", incr)
        sched.register_plugin(a)
        sched.register_plugin(b.callback)
        sched.gather(sched.map("incr", range(50)))
    key = lambda t: (t.task_id, t.status.value)  # noqa: E731
    assert sorted(map(key, a.seen)) == sorted(map(key, b.seen))
    assert len(a.seen) == 150


def test_throwing_plugin_is_isolated():
    def bad(_: Transition) -> None:
        raise RuntimeError("plugin bug")

    with MiniScheduler(4) as sched:
        sched.register("incr", incr)
        sched.register_plugin(bad)
        assert sched.gather(sched.map("incr", range(20))) == list(range(1, 21))
    assert sched.plugin_errors == 60


def test_map_incr_over_range_1000():
    with MiniScheduler(8) as sched:
        sched.register("incr", incr)
        assert sched.gather(sched.map("incr", range(1000))) == list(range(1, 1001))
        assert sched.map("incr", []) == []


def test_makespan_close_to_ideal():
    def sleep_ms(ms: int) -> None:
        time.sleep(ms / 1000)

    with MiniScheduler(4) as sched:
        sched.register("sleep_ms", sleep_ms)
        t0 = time.perf_counter()
        sched.gather(sched.map("sleep_ms", [10] * 100))
        elapsed = time.perf_counter() - t0
    ideal = math.ceil(100 / 4) * 0.010
    assert ideal * 0.5 <= elapsed <= ideal * 1.5
    assert sched.max_running <= 4


def test_gather_reports_exactly_the_failed_task():
    def maybe_fail(n: int) -> int:
        if n == 2:
            raise ValueError("two")
        return n

    rec = Recorder()
    with MiniScheduler(2) as sched:
        sched.register("f", maybe_fail)
        sched.register_plugin(rec)
        futs = sched.map("f", [1, 2, 3])
        with pytest.raises(TaskFailed) as info:
            sched.gather(futs)
    assert info.value.task_ids == [futs[1].task_id]
    assert isinstance(info.value.errors[0], ValueError)
    err = [t for t in rec.seen if t.status is Status.ERROR]
    assert len(err) == 1 and str(err[0].error) == "two"


def test_gather_is_idempotent():
    with MiniScheduler(2) as sched:
        sched.register("incr", incr)
        futs = sched.map("incr", [1, 2, 3])
        assert sched.gather(futs) == [2, 3, 4]
        assert sched.gather(futs) == [2, 3, 4]


def test_unknown_activity():
    with MiniScheduler(1) as sched, pytest.raises(UnknownActivity):
        sched.submit("nope")


def test_task_ids_are_unique_and_carry_context():
    rec = Recorder()
    with MiniScheduler(2, workflow_id="wf", campaign_id="c") as sched:
        sched.register("incr", incr)
        sched.register_plugin(rec)
        futs = sched.map("incr", range(100))
        sched.gather(futs)
    assert len({f.task_id for f in futs}) == 100
    assert {(t.spec.workflow_id, t.spec.campaign_id, t.spec.activity_id) for t in rec.seen} == {("wf", "c", "incr")}
