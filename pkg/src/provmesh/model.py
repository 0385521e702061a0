"""Task metadata model: records, state events, telemetry and the merge fold.

A task is a PROV activity; the keys of its ``used`` and ``generated`` maps are
the entities it consumed and produced. Stored records are folded from the
task's state events with :func:`merge_event`, which is idempotent and
insensitive to the arrival order of events.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping

from provmesh.timeutil import format_ns, parse_rfc3339

TAIL_BYTES = 4096


class ProvmeshError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(ProvmeshError, ValueError):
    def __init__(self, field_name: str, message: str = "") -> None:
        self.field = field_name
        super().__init__(f"{type(self).__name__}({field_name})" + (f": {message}" if message else ""))


class MissingField(ValidationError):
    pass


class BadStatus(ValidationError):
    pass


class BadTimestamp(ValidationError):
    pass


class BadPayload(ValidationError):
    pass


class TaskIdMismatch(ProvmeshError):
    pass


class Status(str, enum.Enum):
    SUBMITTED = "SUBMITTED"
    RUNNING = "RUNNING"
    FINISHED = "FINISHED"
    ERROR = "ERROR"

    @property
    def rank(self) -> int:
        return _RANK[self]

    @property
    def terminal(self) -> bool:
        return self in (Status.FINISHED, Status.ERROR)


_RANK = {Status.SUBMITTED: 0, Status.RUNNING: 1, Status.FINISHED: 2, Status.ERROR: 2}


@dataclass(frozen=True)
class Telemetry:
    cpu_percent: float
    rss_bytes: int
    io_read_bytes: int
    io_write_bytes: int
    captured_at: int  # UTC ns

    def to_dict(self) -> dict[str, Any]:
        return {
            "cpu_percent": self.cpu_percent,
            "rss_bytes": self.rss_bytes,
            "io_read_bytes": self.io_read_bytes,
            "io_write_bytes": self.io_write_bytes,
            "captured_at": format_ns(self.captured_at),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], where: str = "telemetry") -> Telemetry:
        if not isinstance(d, Mapping):
            raise BadPayload(where, "telemetry must be a map")
        if "captured_at" not in d or d["captured_at"] is None:
            raise MissingField(f"{where}.captured_at")
        captured = _coerce_ts(d["captured_at"], f"{where}.captured_at")
        vals: dict[str, Any] = {}
        for name, kind in (
            ("cpu_percent", float),
            ("rss_bytes", int),
            ("io_read_bytes", int),
            ("io_write_bytes", int),
        ):
            v = d.get(name, 0)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
                raise BadPayload(f"{where}.{name}", "must be a non-negative number")
            vals[name] = kind(v)
        return cls(captured_at=captured, **vals)


@dataclass(frozen=True)
class TaskStateEvent:
    task_id: str
    new_status: Status
    observed_at: int  # UTC ns
    workflow_id: str = ""
    campaign_id: str = ""
    activity_id: str = ""
    payload: dict[str, Any] = field(default_factory=dict)
    telemetry: Telemetry | None = None
    adapter_kind: str = ""
    sequence_no: int = 0

    @cached_property
    def order_key(self) -> tuple:
        """Total order used for last-observed-wins resolution."""
        return (
            self.observed_at,
            self.sequence_no,
            self.adapter_kind,
            self.new_status.value,
            hashlib.blake2b(_canonical(self.payload).encode("utf-8"), digest_size=8).hexdigest(),
        )

    @property
    def dedup_key(self) -> tuple[str, str, int, str]:
        return (self.task_id, self.new_status.value, self.sequence_no, self.adapter_kind)

    def to_wire(self) -> dict[str, Any]:
        payload = dict(self.payload)
        for ts in ("started_at", "ended_at"):
            if isinstance(payload.get(ts), int):
                payload[ts] = format_ns(payload[ts])
        return {
            "task_id": self.task_id,
            "workflow_id": self.workflow_id,
            "campaign_id": self.campaign_id,
            "activity_id": self.activity_id,
            "new_status": self.new_status.value,
            "observed_at": format_ns(self.observed_at),
            "payload": payload,
            "telemetry": self.telemetry.to_dict() if self.telemetry else None,
            "adapter_kind": self.adapter_kind,
            "sequence_no": self.sequence_no,
        }


@dataclass(frozen=True)
class ProvenanceLink:
    producer_task_id: str
    consumer_task_id: str
    entity_key: str
    entity_value_digest: str

    def to_dict(self) -> dict[str, str]:
        return {
            "producer_task_id": self.producer_task_id,
            "consumer_task_id": self.consumer_task_id,
            "entity_key": self.entity_key,
            "entity_value_digest": self.entity_value_digest,
        }


def _fresh_versions() -> dict[str, Any]:
    return {
        "used": {},
        "generated": {},
        "environment": {},
        "scalar": {},
        "terminal": None,
        "start": None,
        "end": None,
        "tel_start": None,
        "tel_end": None,
    }


@dataclass
class TaskRecord:
    task_id: str
    workflow_id: str = ""
    campaign_id: str = ""
    activity_id: str = ""
    status: Status = Status.SUBMITTED
    used: dict[str, Any] = field(default_factory=dict)
    generated: dict[str, Any] = field(default_factory=dict)
    started_at: int | None = None
    ended_at: int | None = None
    stdout_tail: str | None = None
    stderr_tail: str | None = None
    telemetry_at_start: Telemetry | None = None
    telemetry_at_end: Telemetry | None = None
    environment: dict[str, Any] = field(default_factory=dict)
    user: str | None = None
    adapter_kind: str = ""
    # merge bookkeeping: the order key that last wrote each field
    versions: dict[str, Any] = field(default_factory=_fresh_versions, repr=False)

    @property
    def elapsed(self) -> float | None:
        if self.started_at is None or self.ended_at is None:
            return None
        return (self.ended_at - self.started_at) / 1e9

    def to_doc(self, with_versions: bool = True) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "task_id": self.task_id,
            "workflow_id": self.workflow_id,
            "campaign_id": self.campaign_id,
            "activity_id": self.activity_id,
            "status": self.status.value,
            "used": self.used,
            "generated": self.generated,
            "environment": self.environment,
            "adapter_kind": self.adapter_kind,
        }
        if self.started_at is not None:
            doc["started_at"] = format_ns(self.started_at)
        if self.ended_at is not None:
            doc["ended_at"] = format_ns(self.ended_at)
        for name in ("stdout_tail", "stderr_tail", "user"):
            value = getattr(self, name)
            if value is not None:
                doc[name] = value
        if self.telemetry_at_start is not None:
            doc["telemetry_at_start"] = self.telemetry_at_start.to_dict()
        if self.telemetry_at_end is not None:
            doc["telemetry_at_end"] = self.telemetry_at_end.to_dict()
        if with_versions:
            doc["_versions"] = self.versions
        return doc

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> TaskRecord:
        versions = _fresh_versions()
        for name, value in doc.get("_versions", {}).items():
            versions[name] = _tuplify(value)
        return cls(
            task_id=doc["task_id"],
            workflow_id=doc.get("workflow_id", ""),
            campaign_id=doc.get("campaign_id", ""),
            activity_id=doc.get("activity_id", ""),
            status=Status(doc["status"]),
            used=dict(doc.get("used", {})),
            generated=dict(doc.get("generated", {})),
            started_at=parse_rfc3339(doc["started_at"]) if "started_at" in doc else None,
            ended_at=parse_rfc3339(doc["ended_at"]) if "ended_at" in doc else None,
            stdout_tail=doc.get("stdout_tail"),
            stderr_tail=doc.get("stderr_tail"),
            telemetry_at_start=_opt_telemetry(doc.get("telemetry_at_start")),
            telemetry_at_end=_opt_telemetry(doc.get("telemetry_at_end")),
            environment=dict(doc.get("environment", {})),
            user=doc.get("user"),
            adapter_kind=doc.get("adapter_kind", ""),
            versions=versions,
        )


def _opt_telemetry(d: Any) -> Telemetry | None:
    return None if d is None else Telemetry.from_dict(d)


def _tuplify(value: Any) -> Any:
    # JSON turns order-key tuples into lists; comparisons need tuples back
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    if isinstance(value, dict):
        return {k: _tuplify(v) for k, v in value.items()}
    return value


def _canonical(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=repr)


def entity_digest(value: Any) -> str:
    """Deterministic, type-sensitive digest of a used/generated value."""
    return hashlib.sha256(_canonical(value).encode("utf-8")).hexdigest()


_REFERENCE = re.compile(r"^(?:[A-Za-z][A-Za-z0-9+.\-]*://|/)\S")


def is_reference(value: Any) -> bool:
    """True for path-like or URI-like strings, which are linkable entities."""
    return isinstance(value, str) and _REFERENCE.match(value) is not None


def bounded_tail(text: str, limit: int = TAIL_BYTES) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= limit:
        return text
    return raw[-limit:].decode("utf-8", errors="ignore")


# -- validation and wire encoding -------------------------------------------------

_PAYLOAD_KEYS = frozenset(
    {"used", "generated", "started_at", "ended_at", "stdout", "stderr", "error", "environment", "user"}
)


def _coerce_ts(value: Any, where: str) -> int:
    if isinstance(value, bool):
        raise BadTimestamp(where, "boolean is not a timestamp")
    if isinstance(value, int):
        if value < 0:
            raise BadTimestamp(where, "negative timestamp")
        return value
    try:
        return parse_rfc3339(value)
    except ValueError as exc:
        raise BadTimestamp(where, str(exc)) from None


def _check_value(value: Any, where: str, seen: set[int]) -> None:
    if value is None or isinstance(value, (str, int, float, bool)):
        return
    if isinstance(value, (list, tuple, dict)):
        if id(value) in seen:
            raise BadPayload(where, "cyclic value")
        seen.add(id(value))
        if isinstance(value, dict):
            for k, v in value.items():
                if not isinstance(k, str):
                    raise BadPayload(where, "nested map keys must be strings")
                _check_value(v, f"{where}.{k}", seen)
        else:
            for i, v in enumerate(value):
                _check_value(v, f"{where}[{i}]", seen)
        seen.discard(id(value))
        return
    raise BadPayload(where, f"unsupported value type {type(value).__name__}")


def _check_entity_map(value: Any, where: str) -> dict[str, Any]:
    if not isinstance(value, Mapping):
        raise BadPayload(where, "must be a map")
    for k, v in value.items():
        if not isinstance(k, str) or not k:
            raise BadPayload(where, "keys must be non-empty strings")
        _check_value(v, f"{where}.{k}", set())
    return dict(value)


def _check_str(raw: Mapping[str, Any], name: str) -> str:
    value = raw.get(name, "")
    if value is None:
        return ""
    if not isinstance(value, str):
        raise BadPayload(name, "must be a string")
    return value


def validate_event(raw: Mapping[str, Any] | TaskStateEvent) -> TaskStateEvent:
    """Check a decoded event against the event invariants and normalize it.

    Accepts either a wire-shaped mapping or an already constructed event.
    Timestamps may be RFC 3339 strings or integer nanoseconds.
    """
    if isinstance(raw, TaskStateEvent):
        raw = {
            "task_id": raw.task_id,
            "workflow_id": raw.workflow_id,
            "campaign_id": raw.campaign_id,
            "activity_id": raw.activity_id,
            "new_status": raw.new_status,
            "observed_at": raw.observed_at,
            "payload": raw.payload,
            "telemetry": raw.telemetry,
            "adapter_kind": raw.adapter_kind,
            "sequence_no": raw.sequence_no,
        }
    if not isinstance(raw, Mapping):
        raise BadPayload("event", "event must be a map")

    task_id = raw.get("task_id")
    if not isinstance(task_id, str) or not task_id:
        raise MissingField("task_id")

    if raw.get("new_status") in (None, ""):
        raise MissingField("new_status")
    try:
        status = Status(raw["new_status"])
    except ValueError:
        raise BadStatus("new_status", f"unknown status {raw['new_status']!r}") from None

    if raw.get("observed_at") in (None, ""):
        raise MissingField("observed_at")
    observed = _coerce_ts(raw["observed_at"], "observed_at")

    seq = raw.get("sequence_no", 0)
    if isinstance(seq, bool) or not isinstance(seq, int) or seq < 0:
        raise BadPayload("sequence_no", "must be a non-negative integer")

    payload_in = raw.get("payload") or {}
    if not isinstance(payload_in, Mapping):
        raise BadPayload("payload", "must be a map")
    payload: dict[str, Any] = {}
    for key, value in payload_in.items():
        if key not in _PAYLOAD_KEYS:
            raise BadPayload(f"payload.{key}", "unknown payload field")
        if key in ("used", "generated", "environment"):
            payload[key] = _check_entity_map(value, f"payload.{key}")
        elif key in ("started_at", "ended_at"):
            payload[key] = _coerce_ts(value, f"payload.{key}")
        else:
            if not isinstance(value, str):
                raise BadPayload(f"payload.{key}", "must be a string")
            payload[key] = value

    tel = raw.get("telemetry")
    if tel is not None and not isinstance(tel, Telemetry):
        tel = Telemetry.from_dict(tel)

    return TaskStateEvent(
        task_id=task_id,
        new_status=status,
        observed_at=observed,
        workflow_id=_check_str(raw, "workflow_id"),
        campaign_id=_check_str(raw, "campaign_id"),
        activity_id=_check_str(raw, "activity_id"),
        payload=payload,
        telemetry=tel,
        adapter_kind=_check_str(raw, "adapter_kind"),
        sequence_no=seq,
    )


def encode_event(event: TaskStateEvent) -> bytes:
    return json.dumps(event.to_wire(), separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode_event(data: bytes | str) -> dict[str, Any]:
    """Decode one wire message. Raises ValueError on malformed JSON."""
    obj = json.loads(data)
    if not isinstance(obj, dict):
        raise ValueError("event message must be a JSON object")
    return obj


# -- merge -----------------------------------------------------------------------

_LWW_SCALARS = ("workflow_id", "campaign_id", "activity_id", "adapter_kind")


def _beats(new: tuple, old: tuple | None) -> bool:
    """Write precedence for one field.

    Versions are ``(terminal_flag, order_key, ...)``. Terminal writes outrank
    non-terminal ones; among terminal writes the earliest wins (later ones
    only fill absent fields); among the rest the latest wins. This is a total
    order, so the fold does not depend on arrival order.
    """
    if old is None:
        return True
    if new[0] != old[0]:
        return new[0] > old[0]
    if new[0]:
        return new[1:] < old[1:]
    return new[1:] > old[1:]


def merge_event(record: TaskRecord | None, event: TaskStateEvent) -> TaskRecord:
    """Fold one validated event into the stored state of its task.

    Returns a new record; the input record is not modified. Status only
    advances in rank and the earliest terminal event decides it. Field values
    follow :func:`_beats` on ``event.order_key``.
    """
    key = event.order_key
    if record is None:
        rec = TaskRecord(task_id=event.task_id, status=event.new_status)
        v = _fresh_versions()
        rec.versions = v
        fresh = True
    else:
        if record.task_id != event.task_id:
            raise TaskIdMismatch(f"record {record.task_id!r} != event {event.task_id!r}")
        rec = copy.copy(record)
        v = rec.versions = dict(record.versions)
        fresh = False

    status = event.new_status
    if status.terminal:
        tk = v["terminal"]
        if tk is None or key < tk:
            rec.status = status
            v["terminal"] = key
    elif not fresh and v["terminal"] is None and status.rank > rec.status.rank:
        rec.status = status

    ver = (1 if status.terminal else 0, key)
    scalar_v = None
    for name in _LWW_SCALARS:
        value = getattr(event, name)
        if value and _beats(ver, v["scalar"].get(name)):
            if scalar_v is None:
                scalar_v = v["scalar"] = dict(v["scalar"])
            scalar_v[name] = ver
            setattr(rec, name, value)

    payload = event.payload
    for name in ("used", "generated", "environment"):
        entries = payload.get(name)
        if not entries:
            continue
        target = None
        vmap = v[name]
        for k, value in entries.items():
            if _beats(ver, vmap.get(k)):
                if target is None:
                    target = dict(getattr(rec, name))
                    vmap = v[name] = dict(vmap)
                target[k] = value
                vmap[k] = ver
        if target is not None:
            setattr(rec, name, target)

    for pname, fname in (("stdout", "stdout_tail"), ("stderr", "stderr_tail"), ("error", "stderr_tail"), ("user", "user")):
        value = payload.get(pname)
        if value is None:
            continue
        vkey = (*ver, pname)
        if _beats(vkey, v["scalar"].get(fname)):
            v["scalar"] = dict(v["scalar"])
            v["scalar"][fname] = vkey
            setattr(rec, fname, bounded_tail(value) if fname != "user" else value)

    # start: provider timestamp > first RUNNING > earliest observation
    if "started_at" in payload:
        cand = (0, payload["started_at"])
    elif status is Status.RUNNING:
        cand = (1, event.observed_at)
    else:
        cand = (2, event.observed_at)
    if v["start"] is None or cand < v["start"]:
        v["start"] = cand

    end = None
    if "ended_at" in payload:
        end = (0, payload["ended_at"])
    elif status.terminal:
        end = (1, event.observed_at)
    if end is not None and (v["end"] is None or end < v["end"]):
        v["end"] = end

    # derived from the versions alone, so the clamp is order-insensitive too
    rec.started_at = v["start"][1]
    rec.ended_at = v["end"][1] if v["end"] is not None else None
    if rec.ended_at is not None and rec.started_at > rec.ended_at:
        rec.started_at = rec.ended_at

    if event.telemetry is not None:
        if v["tel_start"] is None or key < v["tel_start"]:
            v["tel_start"] = key
            rec.telemetry_at_start = event.telemetry
        if status.terminal and (v["tel_end"] is None or key < v["tel_end"]):
            v["tel_end"] = key
            rec.telemetry_at_end = event.telemetry

    return rec
