"""External-polling observer over a directory of run records.

Each run is one JSON file in a flat directory::

    {
      "run_id": "run-0007",
      "status": "SCHEDULED" | "RUNNING" | "FINISHED" | "FAILED" | "KILLED",
      "params":    {"alpha": 0.1},
      "metrics":   {"mse": 2.3},
      "artifacts": {"plot": "file:///plots/run-0007.png"},      (optional)
      "start_time": "<RFC3339>" | null,
      "end_time":   "<RFC3339>" | null,
      "tags": {"workflow_id": ..., "campaign_id": ..., "activity_id": ..., "user": ...}  (optional)
    }

A run maps onto a task: run_id -> task_id, params -> used, metrics and
artifacts -> generated. Writers should replace files atomically
(:func:`write_run` does).
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from provmesh.model import Status
from provmesh.observers.base import AdapterKind, DataObserver
from provmesh.timeutil import parse_rfc3339

log = logging.getLogger(__name__)

MTIME_SLACK_NS = 100_000_000

RUN_STATUS = {
    "SCHEDULED": Status.SUBMITTED,
    "RUNNING": Status.RUNNING,
    "FINISHED": Status.FINISHED,
    "FAILED": Status.ERROR,
    "KILLED": Status.ERROR,
}


class UnreadableRecord(Exception):
    pass


@dataclass
class RunRecord:
    run_id: str
    params: dict[str, Any] = field(default_factory=dict)
    metrics: dict[str, Any] = field(default_factory=dict)
    artifacts: dict[str, Any] = field(default_factory=dict)
    status: str = "RUNNING"
    start_time: str | None = None
    end_time: str | None = None
    tags: dict[str, str] = field(default_factory=dict)
    last_modified: int = 0  # file mtime in ns, filled on read

    @classmethod
    def from_dict(cls, d: Any) -> RunRecord:
        if not isinstance(d, dict) or not isinstance(d.get("run_id"), str) or not d["run_id"]:
            raise UnreadableRecord("missing run_id")
        if d.get("status", "RUNNING") not in RUN_STATUS:
            raise UnreadableRecord(f"unknown run status {d.get('status')!r}")
        for name in ("params", "metrics", "artifacts", "tags"):
            if not isinstance(d.get(name, {}), dict):
                raise UnreadableRecord(f"{name} must be a map")
        try:
            for name in ("start_time", "end_time"):
                if d.get(name) is not None:
                    parse_rfc3339(d[name])
        except ValueError as exc:
            raise UnreadableRecord(str(exc)) from None
        return cls(
            run_id=d["run_id"],
            params=dict(d.get("params", {})),
            metrics=dict(d.get("metrics", {})),
            artifacts=dict(d.get("artifacts", {})),
            status=d.get("status", "RUNNING"),
            start_time=d.get("start_time"),
            end_time=d.get("end_time"),
            tags=dict(d.get("tags", {})),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "status": self.status,
            "params": self.params,
            "metrics": self.metrics,
            "artifacts": self.artifacts,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "tags": self.tags,
        }


def read_run(path: str | Path) -> RunRecord:
    try:
        with open(path, "rb") as fh:
            st = os.fstat(fh.fileno())
            run = RunRecord.from_dict(json.loads(fh.read()))
    except (OSError, ValueError) as exc:
        raise UnreadableRecord(f"{path}: {exc}") from exc
    run.last_modified = st.st_mtime_ns
    return run


def write_run(directory: str | Path, run: RunRecord) -> Path:
    """Atomically (re)write a run file; returns its path."""
    directory = Path(directory)
    target = directory / f"{run.run_id}.json"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    with os.fdopen(fd, "w") as fh:
        json.dump(run.to_dict(), fh, sort_keys=True)
    os.replace(tmp, target)
    return target


def _snapshot(run: RunRecord) -> dict[str, Any]:
    return {
        "params": run.params,
        "generated": {**run.metrics, **run.artifacts},
        "status": run.status,
        "start_time": run.start_time,
        "end_time": run.end_time,
    }


def _changed(old: dict[str, Any], new: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in new.items() if k not in old or old[k] != v}


class RecordStoreObserver(DataObserver):
    kind = AdapterKind.RECORD_STORE

    def __init__(self, *args: Any, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self.watermark = 0
        self._seen: dict[str, dict[str, Any]] = {}
        self.unreadable = 0

    @property
    def directory(self) -> Path:
        assert self.config.locator is not None
        return Path(self.config.locator)

    def observe(self) -> None:
        cutoff = self.watermark - MTIME_SLACK_NS
        newest = self.watermark
        entries = []
        with os.scandir(self.directory) as it:
            for entry in it:
                if not entry.name.endswith(".json") or entry.name.startswith("."):
                    continue
                try:
                    mtime = entry.stat().st_mtime_ns
                except FileNotFoundError:
                    continue
                if mtime >= cutoff:
                    entries.append((mtime, entry.name, entry.path))
        for mtime, _, path in sorted(entries):
            try:
                run = read_run(path)
            except UnreadableRecord as exc:
                self.unreadable += 1
                log.warning("skipping unreadable run record: %s", exc)
                continue
            newest = max(newest, mtime)
            self._handle(run)
        self.watermark = newest

    def _handle(self, run: RunRecord) -> None:
        snap = _snapshot(run)
        old = self._seen.get(run.run_id)
        if old == snap:
            return
        payload: dict[str, Any] = {}
        if old is None:
            if run.params:
                payload["used"] = dict(run.params)
            if snap["generated"]:
                payload["generated"] = dict(snap["generated"])
            starts, ends = run.start_time, run.end_time
        else:
            used = _changed(old["params"], run.params)
            gen = _changed(old["generated"], snap["generated"])
            if used:
                payload["used"] = used
            if gen:
                payload["generated"] = gen
            starts = run.start_time if run.start_time != old["start_time"] else None
            ends = run.end_time if run.end_time != old["end_time"] else None
        if starts:
            payload["started_at"] = starts
        if ends:
            payload["ended_at"] = ends
        if "user" in run.tags:
            payload["user"] = run.tags["user"]
        self._seen[run.run_id] = snap
        tags = run.tags
        self.emit(
            self.make_event(
                run.run_id,
                RUN_STATUS[run.status],
                payload,
                workflow_id=tags.get("workflow_id"),
                activity_id=tags.get("activity_id"),
                campaign_id=tags.get("campaign_id"),
            )
        )
