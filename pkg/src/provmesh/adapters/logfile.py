"""External-polling observer over an append-only task log file.

Line grammar (one task state change per line)::

    <RFC3339> <LEVEL> task=<id> wf=<id> kind=<SUBMITTED|RUNNING|FINISHED|ERROR> <JSON object>

The JSON object may hold ``used``, ``generated``, ``activity_id``,
``campaign_id``, ``error``, ``environment`` and ``user``. The line timestamp
becomes the event's ``observed_at``.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass
from typing import Any

from provmesh.model import Status
from provmesh.observers.base import AdapterKind, DataObserver
from provmesh.timeutil import format_ns, now_ns, parse_rfc3339

log = logging.getLogger(__name__)

LINE_RE = re.compile(
    r"^(?P<ts>\S+) (?P<level>[A-Z]+) task=(?P<task>\S+) wf=(?P<wf>\S+) "
    r"kind=(?P<kind>SUBMITTED|RUNNING|FINISHED|ERROR) (?P<payload>\{.*\})$"
)
READ_CHUNK = 4 << 20
_PAYLOAD_FIELDS = ("used", "generated", "error", "environment", "user")


class FileRotated(Exception):
    """The observed file shrank or was replaced; reading restarts at offset 0."""


@dataclass(frozen=True)
class LogLineRecord:
    timestamp: int
    level: str
    task_id: str
    workflow_id: str
    kind: Status
    payload: dict[str, Any]


def parse_line(line: str) -> LogLineRecord:
    """Parse one line (without newline). Raises ValueError if it does not fit the grammar."""
    m = LINE_RE.match(line)
    if m is None:
        raise ValueError(f"line does not match grammar: {line[:80]!r}")
    payload = json.loads(m["payload"])
    if not isinstance(payload, dict):
        raise ValueError("payload must be a JSON object")
    return LogLineRecord(parse_rfc3339(m["ts"]), m["level"], m["task"], m["wf"], Status(m["kind"]), payload)


def format_line(
    task_id: str,
    workflow_id: str,
    kind: Status | str,
    payload: dict[str, Any],
    level: str = "INFO",
    timestamp: int | None = None,
) -> str:
    ts = format_ns(timestamp if timestamp is not None else now_ns())
    kind = kind.value if isinstance(kind, Status) else kind
    body = json.dumps(payload, separators=(",", ":"), sort_keys=True)
    return f"{ts} {level} task={task_id} wf={workflow_id} kind={kind} {body}"


class TaskLogFormatter(logging.Formatter):
    """Formats records logged with ``extra={"task": ..., "wf": ..., "kind": ..., "payload": ...}``."""

    def format(self, record: logging.LogRecord) -> str:
        return format_line(
            record.task,  # type: ignore[attr-defined]
            record.wf,  # type: ignore[attr-defined]
            record.kind,  # type: ignore[attr-defined]
            getattr(record, "payload", {}),
            level=record.levelname,
            timestamp=int(record.created * 1e9),
        )


class LogFileObserver(DataObserver):
    kind = AdapterKind.LOG_FILE

    def __init__(self, *args: Any, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self.watermark = 0
        self._inode: int | None = None
        self.malformed = 0
        self.rotations = 0
        self.lines = 0

    @property
    def path(self) -> str:
        assert self.config.locator is not None
        return self.config.locator

    def _check_rotation(self, st: os.stat_result) -> None:
        if self._inode is not None and (st.st_ino != self._inode or st.st_size < self.watermark):
            raise FileRotated(self.path)

    def observe(self) -> None:
        try:
            st = os.stat(self.path)
        except FileNotFoundError:
            return
        try:
            self._check_rotation(st)
        except FileRotated:
            log.info("log file %s rotated; re-reading from start", self.path)
            self.rotations += 1
            self.watermark = 0
        self._inode = st.st_ino
        if st.st_size <= self.watermark:
            return
        with open(self.path, "rb") as fh:
            fh.seek(self.watermark)
            while True:
                data = fh.read(READ_CHUNK)
                if not data:
                    break
                end = data.rfind(b"\n")
                if end < 0:
                    break  # torn write: wait for the newline
                for raw in data[: end + 1].splitlines():
                    self._handle(raw)
                self.watermark += end + 1
                if end + 1 < len(data):
                    fh.seek(self.watermark)

    def _handle(self, raw: bytes) -> None:
        if not raw.strip():
            return
        try:
            rec = parse_line(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            self.malformed += 1
            log.debug("malformed log line: %s", exc)
            return
        self.lines += 1
        payload = {k: rec.payload[k] for k in _PAYLOAD_FIELDS if k in rec.payload}
        self.emit(
            self.make_event(
                rec.task_id,
                rec.kind,
                payload,
                observed_at=rec.timestamp,
                workflow_id=rec.workflow_id,
                activity_id=rec.payload.get("activity_id"),
                campaign_id=rec.payload.get("campaign_id"),
            )
        )
