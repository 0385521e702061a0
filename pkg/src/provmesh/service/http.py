"""Read-only HTTP API over a task store.

Routes::

    POST /query                                     QuerySpec JSON -> {"rows": [...]}
    GET  /task/{id}                                 one task document
    GET  /campaign/{id}/lineage?k=&metric=&minimize=
    GET  /campaign/{id}/correlation?used=a,b&targets=c,d[&workflow=][&activity=]

Row bodies are encoded canonically (sorted keys, compact separators), the
same way :func:`encode_rows` encodes a direct library result, so both paths
give byte-identical output for the same spec.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any
from urllib.parse import parse_qs, unquote, urlsplit

from provmesh.service.analysis import MetricAbsent, correlation_matrix, lineage_report
from provmesh.store import StoreIO, StoreUnavailable, TaskStore, UnknownCampaign, UnknownTask
from provmesh.store.query import BadQuery, QuerySpec

log = logging.getLogger(__name__)

MAX_BODY = 4 * 1024 * 1024


def canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_rows(rows: list[dict[str, Any]]) -> bytes:
    return canonical({"rows": rows})


class _HttpError(Exception):
    def __init__(self, status: int, body: dict[str, Any]) -> None:
        self.status = status
        self.body = body


def _truthy(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise _HttpError(400, {"error": f"not a boolean: {text!r}", "clause": "minimize"})


class _Handler(BaseHTTPRequestHandler):
    server: QueryServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt: str, *args: Any) -> None:
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _dispatch(self, fn: Any) -> None:
        try:
            status, body = fn()
        except _HttpError as exc:
            status, body = exc.status, canonical(exc.body)
        except BadQuery as exc:
            status, body = 400, canonical({"error": str(exc), "clause": exc.clause})
        except (UnknownTask, UnknownCampaign, MetricAbsent) as exc:
            status, body = 404, canonical({"error": str(exc)})
        except (StoreUnavailable, StoreIO) as exc:
            status, body = 503, canonical({"error": str(exc)})
        except Exception as exc:  # noqa: BLE001 - last-resort guard for a server thread
            log.exception("unhandled error")
            status, body = 500, canonical({"error": f"internal: {exc}"})
        self._send(status, body)

    def do_POST(self) -> None:  # noqa: N802
        self._dispatch(self._post)

    def do_GET(self) -> None:  # noqa: N802
        self._dispatch(self._get)

    def _post(self) -> tuple[int, bytes]:
        path = urlsplit(self.path).path.rstrip("/")
        if path != "/query":
            raise _HttpError(404, {"error": f"no route {path}"})
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            raise _HttpError(413, {"error": "request body too large"})
        raw = self.rfile.read(length) if length else b"{}"
        try:
            body = json.loads(raw or b"{}")
        except (ValueError, UnicodeDecodeError) as exc:
            raise _HttpError(400, {"error": f"body is not JSON: {exc}", "clause": "query"}) from None
        spec = QuerySpec.from_dict(body)
        return 200, encode_rows(self.server.store.query(spec))

    def _get(self) -> tuple[int, bytes]:
        url = urlsplit(self.path)
        parts = [unquote(p) for p in url.path.split("/") if p]
        params = {k: v[-1] for k, v in parse_qs(url.query).items()}
        store = self.server.store
        if len(parts) == 2 and parts[0] == "task":
            rec = store.get(parts[1])
            if rec is None:
                raise UnknownTask(parts[1])
            return 200, canonical(rec.to_doc(with_versions=False))
        if len(parts) == 3 and parts[0] == "campaign" and parts[2] == "lineage":
            if "metric" not in params:
                raise _HttpError(400, {"error": "metric is required", "clause": "metric"})
            try:
                k = int(params.get("k", "3"))
            except ValueError:
                raise _HttpError(400, {"error": "k must be an integer", "clause": "k"}) from None
            if k < 1:
                raise _HttpError(400, {"error": "k must be >= 1", "clause": "k"})
            minimize = _truthy(params.get("minimize", "true"))
            report = lineage_report(store, parts[1], k, params["metric"], minimize)
            return 200, canonical(report.to_dict())
        if len(parts) == 3 and parts[0] == "campaign" and parts[2] == "correlation":
            used = [f for f in params.get("used", "").split(",") if f]
            targets = [f for f in params.get("targets", "").split(",") if f]
            if not used or not targets:
                raise _HttpError(400, {"error": "used and targets are required", "clause": "used" if not used else "targets"})
            matrix = correlation_matrix(
                store, parts[1], used, targets, workflow_id=params.get("workflow"), activity_id=params.get("activity")
            )
            return 200, canonical(matrix.to_dict())
        raise _HttpError(404, {"error": f"no route {url.path}"})


class QueryServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, store: TaskStore, host: str = "127.0.0.1", port: int = 0) -> None:
        super().__init__((host, port), _Handler)
        self.store = store
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> QueryServer:
        self._thread = threading.Thread(target=self.serve_forever, name="query-http", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
