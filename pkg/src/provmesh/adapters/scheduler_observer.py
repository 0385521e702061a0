"""Intra-scheduler observer: a plugin for :class:`provmesh.scheduler.MiniScheduler`."""

from __future__ import annotations

from typing import Any

from provmesh.model import Status
from provmesh.observers.base import AdapterKind, DataObserver
from provmesh.scheduler import Transition


def generated_from_result(result: Any) -> dict[str, Any]:
    if isinstance(result, dict) and result and all(isinstance(k, str) and k for k in result):
        return dict(result)
    return {"out": result}


class SchedulerObserver(DataObserver):
    """Turns scheduler transitions into task events on the worker thread.

    Every event carries the task arguments as ``used`` so that the terminal
    event alone is complete when a relevance filter dropped earlier ones.
    """

    kind = AdapterKind.SCHEDULER_PLUGIN

    def callback(self, transition: Transition) -> None:
        if not self.armed:
            return
        spec = transition.spec
        payload: dict[str, Any] = {"used": spec.args}
        status = transition.status
        if status is Status.FINISHED:
            payload["generated"] = generated_from_result(transition.result)
        elif status is Status.ERROR:
            payload["error"] = f"{type(transition.error).__name__}: {transition.error}"
        self.emit(
            self.make_event(
                spec.task_id,
                status,
                payload,
                observed_at=transition.at_ns,
                workflow_id=spec.workflow_id,
                activity_id=spec.activity_id,
                campaign_id=spec.campaign_id,
            )
        )

    # the scheduler looks up ``callback`` on whatever it is given
    @property
    def plugin(self) -> SchedulerObserver:
        return self
