"""Declarative queries over task documents.

Evaluation order: filter, then either aggregation (optionally grouped) or
projection, then sort, then limit. Records without a user sort come back in
ascending ``task_id`` order and aggregate rows in group-key order, so results
are deterministic and ties keep that order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from provmesh.model import ProvmeshError

log = logging.getLogger(__name__)

FILTER_OPS = frozenset({"eq", "ne", "gt", "gte", "lt", "lte", "in"})
AGG_OPS = frozenset({"min", "max", "avg", "sum", "count"})
_ASC = {"ascending": False, "asc": False, 1: False, "descending": True, "desc": True, -1: True}

_MISSING = object()
MISSING = _MISSING


class BadQuery(ProvmeshError, ValueError):
    def __init__(self, clause: str, message: str) -> None:
        self.clause = clause
        super().__init__(f"bad {clause} clause: {message}")


@dataclass
class QuerySpec:
    projection: list[str] = field(default_factory=list)
    filter: dict[str, Any] = field(default_factory=dict)
    aggregation: list[tuple[str, str]] = field(default_factory=list)
    group_by: str | None = None
    sort: list[tuple[str, bool]] = field(default_factory=list)  # (path, descending)
    limit: int | None = None

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> QuerySpec:
        """Build and check a spec from its JSON form; errors name the clause."""
        if not isinstance(raw, Mapping):
            raise BadQuery("query", "query must be a map")
        unknown = set(raw) - {"projection", "filter", "aggregation", "group_by", "sort", "limit"}
        if unknown:
            name = sorted(unknown)[0]
            raise BadQuery(name, "unknown clause")

        projection = raw.get("projection") or []
        if not isinstance(projection, list) or not all(_is_path(p) for p in projection):
            raise BadQuery("projection", "must be a list of dotted field paths")

        filt = raw.get("filter") or {}
        if not isinstance(filt, Mapping):
            raise BadQuery("filter", "must be a map of field path to predicate")
        for path, pred in filt.items():
            if not _is_path(path):
                raise BadQuery("filter", f"bad field path {path!r}")
            if isinstance(pred, Mapping):
                if not pred:
                    raise BadQuery("filter", f"empty predicate for {path!r}")
                for op, operand in pred.items():
                    if op not in FILTER_OPS:
                        raise BadQuery("filter", f"unknown operator {op!r} on {path!r}")
                    if op == "in" and not isinstance(operand, list):
                        raise BadQuery("filter", f"'in' on {path!r} needs a list")

        aggregation = []
        for item in raw.get("aggregation") or []:
            if not isinstance(item, (list, tuple)) or len(item) != 2:
                raise BadQuery("aggregation", f"expected (op, path) pairs, got {item!r}")
            op, path = item
            if op not in AGG_OPS:
                raise BadQuery("aggregation", f"unknown aggregate {op!r}")
            star_ok = op == "count" and path == "*"
            if not star_ok and (path == "*" or not _is_path(path)):
                raise BadQuery("aggregation", f"bad field path {path!r}")
            aggregation.append((op, path))

        group_by = raw.get("group_by")
        if group_by is not None and not _is_path(group_by):
            raise BadQuery("group_by", "must be a dotted field path")
        if group_by is not None and not aggregation:
            raise BadQuery("group_by", "group_by requires an aggregation")

        sort = []
        for item in raw.get("sort") or []:
            if not isinstance(item, (list, tuple)) or len(item) != 2 or not _is_path(item[0]):
                raise BadQuery("sort", f"expected (path, direction) pairs, got {item!r}")
            direction = item[1]
            if isinstance(direction, bool) or direction not in _ASC:
                raise BadQuery("sort", f"unknown direction {direction!r}")
            sort.append((item[0], _ASC[direction]))

        limit = raw.get("limit")
        if limit is not None and (isinstance(limit, bool) or not isinstance(limit, int) or limit < 1):
            raise BadQuery("limit", "must be a positive integer")

        return cls(list(projection), dict(filt), aggregation, group_by, sort, limit)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        if self.projection:
            out["projection"] = list(self.projection)
        if self.filter:
            out["filter"] = dict(self.filter)
        if self.aggregation:
            out["aggregation"] = [list(a) for a in self.aggregation]
        if self.group_by:
            out["group_by"] = self.group_by
        if self.sort:
            out["sort"] = [[p, "descending" if d else "ascending"] for p, d in self.sort]
        if self.limit is not None:
            out["limit"] = self.limit
        return out


def _is_path(p: Any) -> bool:
    return isinstance(p, str) and bool(p) and all(p.split("."))


def resolve(doc: Mapping[str, Any], path: str) -> Any:
    """Value at a dotted path, or the module sentinel ``_MISSING``."""
    cur: Any = doc
    for part in path.split("."):
        if not isinstance(cur, Mapping) or part not in cur:
            return _MISSING
        cur = cur[part]
    return cur


def _sort_value(row: Mapping[str, Any], path: str) -> Any:
    # aggregate columns such as "min(generated.loss)" are literal keys
    if path in row:
        return row[path]
    return resolve(row, path)


def _kind(v: Any) -> int:
    if v is None:
        return 0
    if isinstance(v, bool):
        return 1
    if isinstance(v, (int, float)):
        return 2
    if isinstance(v, str):
        return 3
    return 4


def _equal(a: Any, b: Any) -> bool:
    return _kind(a) == _kind(b) and a == b


def _matches(value: Any, pred: Any) -> bool:
    if value is _MISSING:
        return False
    if not isinstance(pred, Mapping):
        return _equal(value, pred)
    for op, operand in pred.items():
        if op == "eq":
            ok = _equal(value, operand)
        elif op == "ne":
            ok = not _equal(value, operand)
        elif op == "in":
            ok = any(_equal(value, o) for o in operand)
        else:
            k = _kind(value)
            if k not in (2, 3) or k != _kind(operand):
                return False
            if op == "gt":
                ok = value > operand
            elif op == "gte":
                ok = value >= operand
            elif op == "lt":
                ok = value < operand
            else:
                ok = value <= operand
        if not ok:
            return False
    return True


def sort_key(value: Any) -> tuple:
    """Total order over JSON values; a missing field sorts lowest."""
    if value is _MISSING:
        return (-1,)
    k = _kind(value)
    if k == 0:
        return (0,)
    if k == 4:
        return (4, json.dumps(value, sort_keys=True))
    return (k, value)


def _set_path(out: dict[str, Any], path: str, value: Any) -> None:
    parts = path.split(".")
    cur = out
    for part in parts[:-1]:
        cur = cur.setdefault(part, {})
    cur[parts[-1]] = value


def project(doc: Mapping[str, Any], paths: list[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    chosen = [p for p in paths if not any(p != q and p.startswith(q + ".") for q in paths)]
    for path in chosen:
        value = resolve(doc, path)
        if value is not _MISSING:
            _set_path(out, path, value)
    return out


def _aggregate(op: str, path: str, docs: list[Mapping[str, Any]]) -> Any:
    if op == "count":
        if path == "*":
            return len(docs)
        return sum(1 for d in docs if resolve(d, path) not in (_MISSING, None))
    nums = [v for v in (resolve(d, path) for d in docs) if _kind(v) == 2]
    if op == "sum":
        return sum(nums)
    if not nums:
        return _MISSING
    if op == "min":
        return min(nums)
    if op == "max":
        return max(nums)
    return sum(nums) / len(nums)


def _agg_rows(spec: QuerySpec, docs: list[Mapping[str, Any]]) -> list[dict[str, Any]]:
    if spec.group_by is None:
        if spec.projection:
            log.warning("projection ignored: aggregation without group_by returns a single row")
        groups = [(None, docs)]
    else:
        # sort keys compare 1 and 1.0 equal, matching filter equality
        buckets: dict[tuple, tuple[Any, list]] = {}
        for d in docs:
            gv = resolve(d, spec.group_by)
            buckets.setdefault(sort_key(gv), (gv, []))[1].append(d)
        groups = sorted(buckets.values(), key=lambda g: sort_key(g[0]))

    rows = []
    for gv, members in groups:
        row: dict[str, Any] = {}
        if spec.group_by is not None:
            if gv is not _MISSING:
                _set_path(row, spec.group_by, gv)
            for path in spec.projection:
                if path == spec.group_by:
                    continue
                values = [resolve(d, path) for d in members]
                first = values[0]
                if first is not _MISSING and all(_equal(v, first) for v in values):
                    _set_path(row, path, first)
        for op, path in spec.aggregation:
            value = _aggregate(op, path, members)
            if value is not _MISSING:
                row[f"{op}({path})"] = value
        rows.append(row)
    return rows


def execute(spec: QuerySpec, docs: Iterable[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """Run ``spec`` over an iterable of task documents."""
    filt = list(spec.filter.items())
    selected = [d for d in docs if all(_matches(resolve(d, p), pred) for p, pred in filt)]
    selected.sort(key=lambda d: sort_key(d.get("task_id", _MISSING)))

    if spec.aggregation:
        rows: list[Any] = _agg_rows(spec, selected)
    else:
        rows = selected
    for path, descending in reversed(spec.sort):
        rows.sort(key=lambda r: sort_key(_sort_value(r, path)), reverse=descending)
    if spec.limit is not None:
        rows = rows[: spec.limit]
    if not spec.aggregation:
        rows = [project(d, spec.projection) if spec.projection else dict(d) for d in rows]
    return rows
