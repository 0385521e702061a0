"""Integrated analyses over the task store: lineage reports and correlations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

from provmesh.model import ProvmeshError, TaskRecord
from provmesh.store import TaskStore, UnknownCampaign
from provmesh.store.query import MISSING as _MISSING, resolve

ELAPSED = "elapsed"


class MetricAbsent(ProvmeshError, LookupError):
    pass


@dataclass
class LineageReport:
    campaign_id: str
    k: int
    metric: str
    minimize: bool
    entries: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "campaign_id": self.campaign_id,
            "k": self.k,
            "metric": self.metric,
            "minimize": self.minimize,
            "entries": self.entries,
        }


@dataclass
class CorrelationMatrix:
    rows: list[str]
    columns: list[str]
    values: list[list[float | None]]
    counts: list[list[int]]

    def get(self, row: str, column: str) -> float | None:
        return self.values[self.rows.index(row)][self.columns.index(column)]

    def to_dict(self) -> dict[str, Any]:
        return {"rows": self.rows, "columns": self.columns, "values": self.values, "counts": self.counts}


def _summary(rec: TaskRecord) -> dict[str, Any]:
    doc = rec.to_doc(with_versions=False)
    out = {
        k: doc[k]
        for k in (
            "task_id",
            "workflow_id",
            "activity_id",
            "status",
            "used",
            "generated",
            "started_at",
            "ended_at",
            "telemetry_at_start",
            "telemetry_at_end",
            "environment",
            "user",
        )
        if k in doc
    }
    out["elapsed"] = rec.elapsed
    return out


def _numeric(value: Any) -> float | None:
    if isinstance(value, bool):
        return float(value)
    if isinstance(value, (int, float)) and math.isfinite(value):
        return float(value)
    return None


def lineage_report(
    store: TaskStore,
    campaign_id: str,
    k: int,
    metric: str,
    minimize: bool = True,
    max_depth: int = 10,
) -> LineageReport:
    """The k extremal tasks by ``metric``, each with its backward lineage grouped by workflow.

    Entries are listed in ascending metric order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not store.has_campaign(campaign_id):
        raise UnknownCampaign(campaign_id)
    scored = []
    for rec in store.records(campaign_id):
        if not rec.status.terminal:
            continue
        value = resolve(rec.to_doc(with_versions=False), metric)
        num = None if value is _MISSING else _numeric(value)
        if num is not None and not isinstance(value, bool):
            scored.append((num, rec))
    if not scored:
        raise MetricAbsent(f"no terminal task in {campaign_id!r} carries {metric!r}")
    sign = 1.0 if minimize else -1.0
    scored.sort(key=lambda p: (sign * p[0], p[1].task_id))
    chosen = sorted(scored[:k], key=lambda p: (p[0], p[1].task_id))

    report = LineageReport(campaign_id, k, metric, minimize)
    for value, rec in chosen:
        graph = store.traverse_lineage(rec.task_id, "backward", max_depth)
        upstream: dict[str, list[dict[str, Any]]] = {}
        for tid, node in graph.nodes.items():
            if tid == rec.task_id:
                continue
            upstream.setdefault(node.workflow_id, []).append(_summary(node))
        for chain in upstream.values():
            chain.sort(key=lambda s: (s.get("started_at") or "", s["task_id"]))
        entry = _summary(rec)
        entry["metric_value"] = value
        entry["upstream"] = dict(sorted(upstream.items()))
        entry["edges"] = sorted(graph.edges, key=lambda e: (e["depth"], e["producer"], e["consumer"], e["entity_key"]))
        report.entries.append(entry)
    return report


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Two-pass Pearson r; ``None`` when n < 3 or either side is constant."""
    n = len(xs)
    if n != len(ys):
        raise ValueError("length mismatch")
    if n < 3:
        return None
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _field(rec: TaskRecord, doc: dict[str, Any], path: str) -> float | None:
    if path == ELAPSED:
        return rec.elapsed
    value = resolve(doc, path)
    return None if value is _MISSING else _numeric(value)


def correlation_matrix(
    store: TaskStore,
    campaign_id: str,
    used_fields: Sequence[str],
    target_fields: Sequence[str],
    workflow_id: str | None = None,
    activity_id: str | None = None,
) -> CorrelationMatrix:
    """Pearson correlation of each used field against each target field.

    Only tasks that carry every requested field (numeric or boolean, booleans
    as 0/1) contribute; ``elapsed`` is ended_at - started_at in seconds.
    """
    if not store.has_campaign(campaign_id):
        raise UnknownCampaign(campaign_id)
    fields = list(dict.fromkeys([*used_fields, *target_fields]))
    samples: list[dict[str, float]] = []
    for rec in store.records(campaign_id):
        if workflow_id is not None and rec.workflow_id != workflow_id:
            continue
        if activity_id is not None and rec.activity_id != activity_id:
            continue
        doc = rec.to_doc(with_versions=False)
        row = {}
        for f in fields:
            v = _field(rec, doc, f)
            if v is None:
                break
            row[f] = v
        else:
            samples.append(row)
    values, counts = [], []
    for u in used_fields:
        xs = [s[u] for s in samples]
        vrow, crow = [], []
        for t in target_fields:
            ys = [s[t] for s in samples]
            vrow.append(pearson(xs, ys))
            crow.append(len(samples))
        values.append(vrow)
        counts.append(crow)
    return CorrelationMatrix(list(used_fields), list(target_fields), values, counts)
