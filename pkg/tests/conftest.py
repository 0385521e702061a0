from __future__ import annotations

import itertools
import os
from typing import Any

import pytest
from hypothesis import HealthCheck, settings

from provmesh.model import Status, TaskStateEvent

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.register_profile("ci", parent=settings.get_profile("default"), derandomize=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []

_seq = itertools.count(1)


def make_event(
    task_id: str = "t1",
    status: Status | str = Status.FINISHED,
    observed_at: int = 1_700_000_000_000_000_000,
    **kw: Any,
) -> TaskStateEvent:
    kw.setdefault("sequence_no", next(_seq))
    kw.setdefault("adapter_kind", "SCHEDULER_PLUGIN")
    return TaskStateEvent(task_id=task_id, new_status=Status(status), observed_at=observed_at, **kw)


@pytest.fixture
def event_factory():
    return make_event


@pytest.fixture
def store(tmp_path):
    from provmesh.store import TaskStore

    s = TaskStore(tmp_path / "store")
    yield s
    s.close()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
