"""Persistent task store: the integrated data view.

On-disk layout of a store directory::

    MANIFEST.json   {"format": "provmesh-task-store", "format_version": 1, ...}
    tasks.sqlite3   SQLite database (WAL mode) holding
                      tasks      one JSON document per task, PRIMARY KEY task_id,
                                 secondary index on campaign_id
                      entities   linkable used/generated values by digest
                      links      cross-workflow provenance links
                      campaigns  CampaignConfig documents

A single process writes; other processes may open the same directory
read-only. Every bulk upsert runs in one transaction, so each record's
read-modify-write is atomic.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from provmesh.model import (
    ProvenanceLink,
    ProvmeshError,
    TaskRecord,
    TaskStateEvent,
    entity_digest,
    is_reference,
    merge_event,
)
from provmesh.store.query import QuerySpec, execute
from provmesh.timeutil import format_ns, now_ns

FORMAT = "provmesh-task-store"
FORMAT_VERSION = 1
DB_FILE = "tasks.sqlite3"
MANIFEST_FILE = "MANIFEST.json"

_SCHEMA = """
CREATE TABLE IF NOT EXISTS tasks (
    task_id     TEXT PRIMARY KEY,
    campaign_id TEXT NOT NULL,
    workflow_id TEXT NOT NULL,
    status      TEXT NOT NULL,
    doc         TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS tasks_campaign ON tasks (campaign_id);
CREATE TABLE IF NOT EXISTS entities (
    task_id     TEXT NOT NULL,
    campaign_id TEXT NOT NULL,
    workflow_id TEXT NOT NULL,
    role        TEXT NOT NULL,
    key         TEXT NOT NULL,
    digest      TEXT NOT NULL,
    terminal    INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS entities_task ON entities (task_id);
CREATE INDEX IF NOT EXISTS entities_match ON entities (campaign_id, digest, role);
CREATE TABLE IF NOT EXISTS links (
    producer    TEXT NOT NULL,
    consumer    TEXT NOT NULL,
    entity_key  TEXT NOT NULL,
    digest      TEXT NOT NULL,
    PRIMARY KEY (producer, consumer, entity_key, digest)
);
CREATE INDEX IF NOT EXISTS links_consumer ON links (consumer);
CREATE TABLE IF NOT EXISTS campaigns (
    campaign_id TEXT PRIMARY KEY,
    doc         TEXT NOT NULL
);
"""


class StoreError(ProvmeshError):
    pass


class StoreIO(StoreError):
    pass


class StoreUnavailable(StoreError):
    pass


class _UnknownId(StoreError, KeyError):
    what = "id"

    def __str__(self) -> str:
        return f"unknown {self.what} {self.args[0]!r}" if self.args else f"unknown {self.what}"


class UnknownTask(_UnknownId):
    what = "task"


class UnknownCampaign(_UnknownId):
    what = "campaign"


@dataclass
class CampaignConfig:
    campaign_id: str
    workflows: list[str]
    entity_keys: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.campaign_id:
            raise ValueError("campaign_id must be non-empty")
        if not self.workflows:
            raise ValueError("a campaign declares at least one workflow")

    def to_dict(self) -> dict[str, Any]:
        return {"campaign_id": self.campaign_id, "workflows": self.workflows, "entity_keys": self.entity_keys}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CampaignConfig:
        return cls(d["campaign_id"], list(d["workflows"]), list(d.get("entity_keys", [])))


@dataclass
class LineageGraph:
    root: str
    nodes: dict[str, TaskRecord]
    edges: list[dict[str, Any]]  # producer, consumer, entity_key, kind, depth

    def workflows(self) -> set[str]:
        return {r.workflow_id for r in self.nodes.values()}


def _entity_rows(rec: TaskRecord, entity_keys: frozenset[str]) -> list[tuple]:
    rows = []
    terminal = int(rec.status.terminal)
    for role, entries in (("used", rec.used), ("generated", rec.generated)):
        for key, value in entries.items():
            declared = key in entity_keys
            values = value if isinstance(value, list) else [value]
            seen = set()
            for v in values:
                if isinstance(v, (dict, list)) and not declared:
                    continue
                if declared or is_reference(v):
                    d = entity_digest(v)
                    if d not in seen:
                        seen.add(d)
                        rows.append((rec.task_id, rec.campaign_id, rec.workflow_id, role, key, d, terminal))
    return rows


class TaskStore:
    def __init__(self, path: str | Path, readonly: bool = False) -> None:
        self.path = Path(path)
        self.readonly = readonly
        self._lock = threading.RLock()
        self._entity_keys: dict[str, frozenset[str]] = {}
        manifest = self.path / MANIFEST_FILE
        try:
            if readonly:
                if not manifest.exists():
                    raise StoreUnavailable(f"no task store at {self.path}")
            else:
                self.path.mkdir(parents=True, exist_ok=True)
            if manifest.exists():
                meta = json.loads(manifest.read_text())
                if meta.get("format") != FORMAT or meta.get("format_version") != FORMAT_VERSION:
                    raise StoreIO(f"unsupported store format in {manifest}: {meta}")
            else:
                manifest.write_text(
                    json.dumps(
                        {
                            "format": FORMAT,
                            "format_version": FORMAT_VERSION,
                            "created_at": format_ns(now_ns()),
                            "files": {"data": DB_FILE},
                        },
                        indent=2,
                    )
                )
            uri = f"file:{self.path / DB_FILE}" + ("?mode=ro" if readonly else "")
            self._db: sqlite3.Connection | None = sqlite3.connect(
                uri, uri=True, check_same_thread=False, isolation_level=None, timeout=30.0
            )
            if not readonly:
                self._db.execute("PRAGMA journal_mode=WAL")
                self._db.execute("PRAGMA synchronous=NORMAL")
                self._db.executescript(_SCHEMA)
        except sqlite3.Error as exc:
            raise StoreIO(str(exc)) from exc

    def __enter__(self) -> TaskStore:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def close(self) -> None:
        with self._lock:
            if self._db is not None:
                self._db.close()
                self._db = None

    @property
    def db(self) -> sqlite3.Connection:
        if self._db is None:
            raise StoreUnavailable("store is closed")
        return self._db

    # -- campaigns ---------------------------------------------------------------

    def put_campaign(self, config: CampaignConfig) -> None:
        with self._lock, self._txn():
            self.db.execute(
                "INSERT OR REPLACE INTO campaigns VALUES (?, ?)",
                (config.campaign_id, json.dumps(config.to_dict())),
            )
            self._entity_keys[config.campaign_id] = frozenset(config.entity_keys)
            ids = [r[0] for r in self.db.execute("SELECT task_id FROM tasks WHERE campaign_id = ?", (config.campaign_id,))]
            self._reindex([self._load(t) for t in ids])

    def get_campaign(self, campaign_id: str) -> CampaignConfig | None:
        with self._lock:
            row = self.db.execute("SELECT doc FROM campaigns WHERE campaign_id = ?", (campaign_id,)).fetchone()
        return CampaignConfig.from_dict(json.loads(row[0])) if row else None

    def has_campaign(self, campaign_id: str) -> bool:
        with self._lock:
            if self.db.execute("SELECT 1 FROM campaigns WHERE campaign_id = ?", (campaign_id,)).fetchone():
                return True
            return self.db.execute("SELECT 1 FROM tasks WHERE campaign_id = ? LIMIT 1", (campaign_id,)).fetchone() is not None

    def _keys_for(self, campaign_id: str) -> frozenset[str]:
        keys = self._entity_keys.get(campaign_id)
        if keys is None:
            cfg = self.get_campaign(campaign_id)
            keys = self._entity_keys[campaign_id] = frozenset(cfg.entity_keys if cfg else ())
        return keys

    # -- records -----------------------------------------------------------------

    def _txn(self) -> _Txn:
        return _Txn(self)

    def _load(self, task_id: str) -> TaskRecord | None:
        row = self.db.execute("SELECT doc FROM tasks WHERE task_id = ?", (task_id,)).fetchone()
        return TaskRecord.from_doc(json.loads(row[0])) if row else None

    def get(self, task_id: str) -> TaskRecord | None:
        with self._lock:
            try:
                return self._load(task_id)
            except sqlite3.Error as exc:
                raise StoreIO(str(exc)) from exc

    def __len__(self) -> int:
        return self.count()

    def count(
        self, campaign_id: str | None = None, workflow_id: str | None = None, statuses: Iterable[str] | None = None
    ) -> int:
        sql, args = "SELECT COUNT(*) FROM tasks WHERE 1=1", []
        if statuses is not None:
            wanted = [getattr(s, "value", s) for s in statuses]
            sql += f" AND status IN ({','.join('?' * len(wanted))})"
            args.extend(wanted)
        if campaign_id is not None:
            sql += " AND campaign_id = ?"
            args.append(campaign_id)
        if workflow_id is not None:
            sql += " AND workflow_id = ?"
            args.append(workflow_id)
        with self._lock:
            return self.db.execute(sql, args).fetchone()[0]

    def bulk_upsert(self, items: Sequence[TaskStateEvent | TaskRecord]) -> list[str]:
        """Apply merge events (or write whole records) in one transaction.

        Returns the ids of the touched tasks.
        """
        if not items:
            return []
        with self._lock:
            try:
                with self._txn():
                    ids = list(dict.fromkeys(i.task_id for i in items))
                    current: dict[str, TaskRecord | None] = {}
                    for chunk in _chunks(ids, 500):
                        marks = ",".join("?" * len(chunk))
                        for tid, doc in self.db.execute(f"SELECT task_id, doc FROM tasks WHERE task_id IN ({marks})", chunk):
                            current[tid] = TaskRecord.from_doc(json.loads(doc))
                    for item in items:
                        if isinstance(item, TaskRecord):
                            current[item.task_id] = item
                        else:
                            current[item.task_id] = merge_event(current.get(item.task_id), item)
                    records = [current[t] for t in ids]
                    self.db.executemany(
                        "INSERT OR REPLACE INTO tasks VALUES (?, ?, ?, ?, ?)",
                        [
                            (r.task_id, r.campaign_id, r.workflow_id, r.status.value, json.dumps(r.to_doc(), separators=(",", ":")))
                            for r in records
                            if r is not None
                        ],
                    )
                    self._reindex(records)
            except sqlite3.Error as exc:
                raise StoreIO(str(exc)) from exc
        return ids

    def _reindex(self, records: Iterable[TaskRecord | None]) -> None:
        records = [r for r in records if r is not None]
        db = self.db
        for rec in records:
            db.execute("DELETE FROM entities WHERE task_id = ?", (rec.task_id,))
            db.executemany("INSERT INTO entities VALUES (?, ?, ?, ?, ?, ?, ?)", _entity_rows(rec, self._keys_for(rec.campaign_id)))
        for rec in records:
            if rec.status.terminal:
                self._link(rec)

    def _link(self, rec: TaskRecord) -> None:
        # links are recomputed from current state so arrival order cannot matter
        db = self.db
        db.execute("DELETE FROM links WHERE producer = ? OR consumer = ?", (rec.task_id, rec.task_id))
        mine = db.execute("SELECT role, key, digest FROM entities WHERE task_id = ?", (rec.task_id,)).fetchall()
        new = set()
        for role, key, digest in mine:
            other_role = "generated" if role == "used" else "used"
            for other, okey in db.execute(
                "SELECT task_id, key FROM entities WHERE campaign_id = ? AND digest = ? AND role = ? "
                "AND workflow_id != ? AND terminal = 1 AND task_id != ?",
                (rec.campaign_id, digest, other_role, rec.workflow_id, rec.task_id),
            ):
                if role == "used":
                    new.add((other, rec.task_id, key, digest))
                else:
                    new.add((rec.task_id, other, okey, digest))
        db.executemany("INSERT OR IGNORE INTO links VALUES (?, ?, ?, ?)", sorted(new))

    # -- reads -------------------------------------------------------------------

    def iter_docs(self, campaign_id: str | None = None, task_id: str | None = None) -> Iterator[dict[str, Any]]:
        """Task documents without merge bookkeeping."""
        if task_id is not None:
            sql, args = "SELECT doc FROM tasks WHERE task_id = ?", (task_id,)
        elif campaign_id is not None:
            sql, args = "SELECT doc FROM tasks WHERE campaign_id = ?", (campaign_id,)
        else:
            sql, args = "SELECT doc FROM tasks", ()
        with self._lock:
            try:
                rows = self.db.execute(sql, args).fetchall()
            except sqlite3.Error as exc:
                raise StoreUnavailable(str(exc)) from exc
        for (doc,) in rows:
            d = json.loads(doc)
            d.pop("_versions", None)
            yield d

    def records(self, campaign_id: str | None = None) -> list[TaskRecord]:
        with self._lock:
            if campaign_id is None:
                rows = self.db.execute("SELECT doc FROM tasks ORDER BY task_id").fetchall()
            else:
                rows = self.db.execute("SELECT doc FROM tasks WHERE campaign_id = ? ORDER BY task_id", (campaign_id,)).fetchall()
        return [TaskRecord.from_doc(json.loads(d)) for (d,) in rows]

    def query(self, spec: QuerySpec | Mapping[str, Any]) -> list[dict[str, Any]]:
        if not isinstance(spec, QuerySpec):
            spec = QuerySpec.from_dict(spec)
        # use the task_id / campaign_id indexes for plain equality filters
        tid = spec.filter.get("task_id")
        cid = spec.filter.get("campaign_id")
        if isinstance(tid, str):
            docs = self.iter_docs(task_id=tid)
        elif isinstance(cid, str):
            docs = self.iter_docs(campaign_id=cid)
        else:
            docs = self.iter_docs()
        return execute(spec, docs)

    def links(self, task_id: str | None = None) -> list[ProvenanceLink]:
        with self._lock:
            if task_id is None:
                rows = self.db.execute("SELECT * FROM links ORDER BY producer, consumer, entity_key, digest").fetchall()
            else:
                rows = self.db.execute(
                    "SELECT * FROM links WHERE producer = ? OR consumer = ? ORDER BY producer, consumer, entity_key, digest",
                    (task_id, task_id),
                ).fetchall()
        return [ProvenanceLink(*r) for r in rows]

    def link_provenance(self, record: TaskRecord) -> list[ProvenanceLink]:
        """(Re)compute and persist the cross-workflow links of a stored terminal record."""
        with self._lock, self._txn():
            self._reindex([record])
        return self.links(record.task_id)

    def _neighbors(self, task_id: str, backward: bool) -> list[tuple[str, str, str]]:
        """(other_task, entity_key, kind) adjacent to task_id in the given direction."""
        db = self.db
        out = []
        if backward:
            for p, key in db.execute("SELECT producer, entity_key FROM links WHERE consumer = ?", (task_id,)):
                out.append((p, key, "link"))
            mine_role, other_role = "used", "generated"
        else:
            for c, key in db.execute("SELECT consumer, entity_key FROM links WHERE producer = ?", (task_id,)):
                out.append((c, key, "link"))
            mine_role, other_role = "generated", "used"
        for other, key in db.execute(
            "SELECT o.task_id, CASE WHEN ? = 'used' THEN m.key ELSE o.key END FROM entities m JOIN entities o "
            "ON o.campaign_id = m.campaign_id AND o.digest = m.digest AND o.workflow_id = m.workflow_id "
            "WHERE m.task_id = ? AND m.role = ? AND o.role = ? AND o.task_id != m.task_id",
            (mine_role, task_id, mine_role, other_role),
        ):
            out.append((other, key, "workflow"))
        return out

    def traverse_lineage(self, task_id: str, direction: str = "backward", max_depth: int = 10) -> LineageGraph:
        """Breadth-first walk over provenance links and same-workflow matches."""
        if direction not in ("backward", "forward"):
            raise ValueError("direction must be 'backward' or 'forward'")
        backward = direction == "backward"
        with self._lock:
            root = self._load(task_id)
            if root is None:
                raise UnknownTask(task_id)
            nodes = {task_id: root}
            edges: dict[tuple[str, str, str], dict[str, Any]] = {}
            frontier = deque([(task_id, 0)])
            while frontier:
                tid, depth = frontier.popleft()
                if depth >= max_depth:
                    continue
                for other, key, kind in sorted(self._neighbors(tid, backward)):
                    producer, consumer = (other, tid) if backward else (tid, other)
                    ekey = (producer, consumer, key)
                    if ekey not in edges:
                        edges[ekey] = {"producer": producer, "consumer": consumer, "entity_key": key, "kind": kind, "depth": depth + 1}
                    if other not in nodes:
                        rec = self._load(other)
                        if rec is None:
                            continue
                        nodes[other] = rec
                        frontier.append((other, depth + 1))
        return LineageGraph(task_id, nodes, list(edges.values()))


class _Txn:
    def __init__(self, store: TaskStore) -> None:
        self.store = store
        self.depth_owner = False

    def __enter__(self) -> None:
        db = self.store.db
        if not db.in_transaction:
            db.execute("BEGIN IMMEDIATE")
            self.depth_owner = True

    def __exit__(self, exc_type: object, *rest: object) -> None:
        if not self.depth_owner:
            return
        db = self.store.db
        if exc_type is None:
            db.execute("COMMIT")
        else:
            db.execute("ROLLBACK")


def _chunks(seq: Sequence[str], n: int) -> Iterator[Sequence[str]]:
    for i in range(0, len(seq), n):
        yield seq[i : i + n]
