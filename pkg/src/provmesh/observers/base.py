"""Observer adapter interface and configuration."""

from __future__ import annotations

import enum
import fnmatch
import getpass
import itertools
import logging
import os
import socket
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable

from provmesh.model import ProvmeshError, Status, TaskStateEvent
from provmesh.observers.buffer import BufferPolicy, EventBuffer
from provmesh.observers.telemetry import capture_telemetry
from provmesh.timeutil import now_ns

log = logging.getLogger(__name__)

DEFAULT_POLL_INTERVAL = 0.5


class AdapterKind(str, enum.Enum):
    SCHEDULER_PLUGIN = "SCHEDULER_PLUGIN"
    LOG_FILE = "LOG_FILE"
    RECORD_STORE = "RECORD_STORE"

    @property
    def polling(self) -> bool:
        return self is not AdapterKind.SCHEDULER_PLUGIN


class BadConfig(ProvmeshError, ValueError):
    def __init__(self, field_name: str, message: str) -> None:
        self.field = field_name
        super().__init__(f"BadConfig({field_name}): {message}")


class UnknownAdapterKind(ProvmeshError, ValueError):
    pass


@dataclass
class ObserverConfig:
    adapter_kind: AdapterKind
    locator: str | None = None
    poll_interval: float = DEFAULT_POLL_INTERVAL
    relevance: list[str] = field(default_factory=list)
    telemetry_enabled: bool = False
    buffer: BufferPolicy = field(default_factory=BufferPolicy)
    # defaults stamped on events whose source does not carry them
    campaign_id: str = ""
    workflow_id: str = ""
    activity_id: str = ""
    channel: str = "task_events"
    name: str = ""
    site: str = ""


def host_environment(site: str = "") -> dict[str, Any]:
    env: dict[str, Any] = {"hostname": socket.gethostname(), "cpu_count": os.cpu_count() or 1}
    if site:
        env["site"] = site
    return env


def current_user() -> str:
    try:
        return getpass.getuser()
    except Exception:
        return "unknown"


def is_relevant(event: TaskStateEvent, patterns: Iterable[str]) -> bool:
    """True if any ``used.*`` / ``generated.*`` payload key matches a glob pattern.

    An empty pattern list makes every event relevant.
    """
    patterns = list(patterns)
    if not patterns:
        return True
    payload = event.payload
    for role in ("used", "generated"):
        for key in payload.get(role) or ():
            name = f"{role}.{key}"
            if any(fnmatch.fnmatchcase(name, p) for p in patterns):
                return True
    return False


class DataObserver:
    """Base adapter.

    Polling adapters implement :meth:`observe` (one pass over the source);
    scheduler adapters implement :meth:`callback`. Both hand events to
    :meth:`emit`, which applies the relevance filter and buffers the event.
    """

    kind: AdapterKind

    def __init__(self, config: ObserverConfig, sink: EventBuffer) -> None:
        self.config = config
        self.sink = sink
        self._seq = itertools.count(1)
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._observe_lock = threading.Lock()
        self.armed = False
        self.filtered = 0
        self.environment = host_environment(config.site)
        self.user = current_user()

    def next_seq(self) -> int:
        return next(self._seq)

    def make_event(
        self,
        task_id: str,
        status: Status,
        payload: dict[str, Any],
        observed_at: int | None = None,
        workflow_id: str | None = None,
        activity_id: str | None = None,
        campaign_id: str | None = None,
    ) -> TaskStateEvent:
        cfg = self.config
        if status.terminal:
            payload.setdefault("environment", self.environment)
            payload.setdefault("user", self.user)
        return TaskStateEvent(
            task_id=task_id,
            new_status=status,
            observed_at=observed_at if observed_at is not None else now_ns(),
            workflow_id=workflow_id or cfg.workflow_id,
            campaign_id=campaign_id or cfg.campaign_id,
            activity_id=activity_id or cfg.activity_id,
            payload=payload,
            telemetry=capture_telemetry() if cfg.telemetry_enabled else None,
            adapter_kind=self.kind.value,
            sequence_no=self.next_seq(),
        )

    def emit(self, event: TaskStateEvent) -> bool:
        if not is_relevant(event, self.config.relevance):
            self.filtered += 1
            return False
        self.sink.emit(event)
        return True

    def observe(self) -> None:
        raise NotImplementedError(f"{type(self).__name__} does not poll")

    def callback(self, transition: Any) -> None:
        raise NotImplementedError(f"{type(self).__name__} has no scheduler callback")

    def _observe_once(self) -> None:
        with self._observe_lock:
            try:
                self.observe()
            except Exception:
                log.exception("%s observe pass failed", type(self).__name__)

    def _loop(self) -> None:
        while not self._stop.wait(self.config.poll_interval):
            self._observe_once()

    def start(self) -> None:
        self.sink.start()
        self.armed = True
        if self.kind.polling:
            self._stop.clear()
            self._observe_once()
            self._thread = threading.Thread(target=self._loop, name=f"observer-{self.kind.value}", daemon=True)
            self._thread.start()

    def stop(self) -> None:
        """Finish the in-flight pass, run a last pass, flush the buffer."""
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None
            self._observe_once()
        self.armed = False
        self.sink.stop()
