"""Embedded thread-pool task scheduler with state-change plugin hooks.

Plugins are called synchronously on the thread that performs the transition:
SUBMITTED on the submitting thread, RUNNING and the terminal transition on the
worker. They must therefore be cheap; exceptions they raise are swallowed and
counted in :attr:`MiniScheduler.plugin_errors`.
"""

from __future__ import annotations

import inspect
import threading
import time
import uuid
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol, Sequence

from provmesh.model import ProvmeshError, Status


class UnknownActivity(ProvmeshError, KeyError):
    pass


class TaskFailed(ProvmeshError):
    def __init__(self, task_ids: list[str], errors: list[BaseException]) -> None:
        self.task_ids = task_ids
        self.errors = errors
        super().__init__(f"{len(task_ids)} task(s) failed: {', '.join(task_ids)}")


@dataclass
class TaskSpec:
    activity_id: str
    args: dict[str, Any]
    workflow_id: str = ""
    campaign_id: str = ""
    task_id: str = field(default_factory=lambda: str(uuid.uuid4()))


@dataclass(frozen=True)
class Transition:
    """Notification passed to plugins; shaped like a task state event."""

    task_id: str
    status: Status
    at_ns: int
    spec: TaskSpec
    result: Any = None
    error: BaseException | None = None


class SchedulerPlugin(Protocol):
    def callback(self, transition: Transition) -> None: ...


class TaskFuture:
    def __init__(self, spec: TaskSpec, future: Future) -> None:
        self.spec = spec
        self._future = future

    @property
    def task_id(self) -> str:
        return self.spec.task_id

    def done(self) -> bool:
        return self._future.done()

    def result(self, timeout: float | None = None) -> Any:
        return self._future.result(timeout)

    def exception(self, timeout: float | None = None) -> BaseException | None:
        return self._future.exception(timeout)


class MiniScheduler:
    def __init__(self, workers: int = 4, workflow_id: str = "", campaign_id: str = "") -> None:
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self.workflow_id = workflow_id
        self.campaign_id = campaign_id
        self._activities: dict[str, tuple[Callable[..., Any], str]] = {}
        self._plugins: list[Callable[[Transition], None]] = []
        self._pool: ThreadPoolExecutor | None = None
        self._lock = threading.Lock()
        self._running = 0
        self.max_running = 0
        self.plugin_errors = 0

    def __enter__(self) -> MiniScheduler:
        self.start()
        return self

    def __exit__(self, *exc: object) -> None:
        self.shutdown()

    def start(self) -> None:
        with self._lock:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(self.workers, thread_name_prefix="mini-worker")

    def shutdown(self, wait: bool = True) -> None:
        with self._lock:
            pool, self._pool = self._pool, None
        if pool is not None:
            pool.shutdown(wait=wait)

    def register(self, name: str, fn: Callable[..., Any]) -> None:
        params = list(inspect.signature(fn).parameters)
        self._activities[name] = (fn, params[0] if params else "arg")

    def register_plugin(self, plugin: SchedulerPlugin | Callable[[Transition], None]) -> None:
        cb = getattr(plugin, "callback", plugin)
        with self._lock:
            self._plugins = [*self._plugins, cb]

    def _notify(self, transition: Transition) -> None:
        for cb in self._plugins:
            try:
                cb(transition)
            except Exception:
                with self._lock:
                    self.plugin_errors += 1

    def _run(self, spec: TaskSpec, fn: Callable[..., Any]) -> Any:
        with self._lock:
            self._running += 1
            if self._running > self.max_running:
                self.max_running = self._running
        self._notify(Transition(spec.task_id, Status.RUNNING, time.time_ns(), spec))
        try:
            result = fn(**spec.args)
        except Exception as exc:
            with self._lock:
                self._running -= 1
            self._notify(Transition(spec.task_id, Status.ERROR, time.time_ns(), spec, error=exc))
            raise
        with self._lock:
            self._running -= 1
        self._notify(Transition(spec.task_id, Status.FINISHED, time.time_ns(), spec, result=result))
        return result

    def submit(self, activity: str, **args: Any) -> TaskFuture:
        try:
            fn, _ = self._activities[activity]
        except KeyError:
            raise UnknownActivity(activity) from None
        if self._pool is None:
            self.start()
        spec = TaskSpec(activity, args, self.workflow_id, self.campaign_id)
        self._notify(Transition(spec.task_id, Status.SUBMITTED, time.time_ns(), spec))
        assert self._pool is not None
        return TaskFuture(spec, self._pool.submit(self._run, spec, fn))

    def map(self, activity: str, inputs: Iterable[Any]) -> list[TaskFuture]:
        """Submit one task per input; the input binds to the callable's first parameter."""
        try:
            _, param = self._activities[activity]
        except KeyError:
            raise UnknownActivity(activity) from None
        return [self.submit(activity, **{param: x}) for x in inputs]

    def gather(self, futures: Sequence[TaskFuture]) -> list[Any]:
        results, failed, errors = [], [], []
        for f in futures:
            exc = f.exception()
            if exc is not None:
                failed.append(f.task_id)
                errors.append(exc)
                results.append(None)
            else:
                results.append(f.result())
        if failed:
            raise TaskFailed(failed, errors)
        return results
