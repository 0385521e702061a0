"""Command line entry point.

Every subcommand prints JSON on stdout. Exit status: 0 on success, 1 on a
user error (bad arguments, bad query, unknown campaign), 2 on anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
import time
from pathlib import Path
from typing import Any, Sequence

from provmesh.model import ProvmeshError
from provmesh.store import BadQuery, StoreUnavailable, TaskStore, UnknownCampaign
from provmesh.store.query import QuerySpec

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
DEFAULT_STORE = "provmesh-store"
_OPS = (("!=", "ne"), (">=", "gte"), ("<=", "lte"), ("=", "eq"), (">", "gt"), ("<", "lt"))


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _literal(text: str) -> Any:
    """JSON literal if it parses as one (numbers, true, null, quoted strings), else the raw text."""
    try:
        return json.loads(text)
    except ValueError:
        return text


def parse_filter(expr: str) -> tuple[str, Any]:
    for token, op in _OPS:
        path, sep, value = expr.partition(token)
        if sep and path:
            return path.strip(), (_literal(value) if op == "eq" else {op: _literal(value)})
    raise UserError(f"bad --filter {expr!r}; expected path=value, path!=value, path>value, ...")


def spec_from_args(args: argparse.Namespace) -> QuerySpec:
    raw: dict[str, Any] = {}
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text())
        except (OSError, ValueError) as exc:
            raise UserError(f"cannot read query spec {args.spec}: {exc}") from None
        if not isinstance(raw, dict):
            raise UserError("query spec file must hold a JSON object")
    if args.filter:
        filt = dict(raw.get("filter") or {})
        for expr in args.filter:
            path, pred = parse_filter(expr)
            if isinstance(pred, dict) and isinstance(filt.get(path), dict):
                filt[path] = {**filt[path], **pred}
            else:
                filt[path] = pred
        raw["filter"] = filt
    if args.projection:
        raw["projection"] = [p for item in args.projection for p in item.split(",") if p]
    if args.agg:
        aggs = []
        for item in args.agg:
            op, sep, path = item.partition(":")
            if not sep:
                raise UserError(f"bad --agg {item!r}; expected op:path")
            aggs.append([op, path])
        raw["aggregation"] = aggs
    if args.group_by:
        raw["group_by"] = args.group_by
    if args.sort:
        sorts = []
        for item in args.sort:
            path, _, direction = item.partition(":")
            sorts.append([path, direction or "ascending"])
        raw["sort"] = sorts
    if args.limit is not None:
        raw["limit"] = args.limit
    return QuerySpec.from_dict(raw)


def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _open_store(args: argparse.Namespace) -> TaskStore:
    return TaskStore(args.store, readonly=True)


def cmd_query(args: argparse.Namespace) -> int:
    spec = spec_from_args(args)
    with _open_store(args) as store:
        _emit({"rows": store.query(spec)})
    return EXIT_OK


def cmd_lineage(args: argparse.Namespace) -> int:
    from provmesh.service.analysis import lineage_report

    with _open_store(args) as store:
        report = lineage_report(store, args.campaign, args.k, args.metric, minimize=not args.maximize)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_corr(args: argparse.Namespace) -> int:
    from provmesh.service.analysis import correlation_matrix

    used = [f for f in args.used.split(",") if f]
    targets = [f for f in args.targets.split(",") if f]
    if not used or not targets:
        raise UserError("--used and --targets need at least one field each")
    with _open_store(args) as store:
        matrix = correlation_matrix(store, args.campaign, used, targets, workflow_id=args.workflow)
    _emit(matrix.to_dict())
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from provmesh.service.http import QueryServer
    from provmesh.service.node import IngestNode

    node = None
    if args.broker_listen:
        host, _, port = args.broker_listen.rpartition(":")
        if not port.isdigit():
            raise UserError(f"bad --broker-listen {args.broker_listen!r}; expected host:port")
        node = IngestNode(args.store, host=host or "127.0.0.1", port=int(port)).start()
    store = TaskStore(args.store, readonly=node is None)
    server = QueryServer(store, args.host, args.port)
    info = {"http": server.url}
    if node is not None:
        info["broker"] = node.broker_address
    _emit(info)
    sys.stdout.flush()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        if node is not None:
            node.stop()
        store.close()
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    from provmesh.bench import Workload, results_table, run_benchmark, write_results

    try:
        wl = Workload(
            total_tasks=args.tasks,
            task_duration=args.duration_ms / 1000.0,
            workers=args.workers,
            observability=args.observability,
            repetitions=args.reps,
            max_repetitions=max(args.reps, args.max_reps),
        )
    except ValueError as exc:
        raise UserError(str(exc)) from None
    result = run_benchmark(wl)
    if args.out:
        write_results([result], args.out)
    _emit({"table": results_table([result]), "overhead_pct": result.overhead_pct, "converged": result.converged})
    return EXIT_OK


def cmd_ingest_demo(args: argparse.Namespace) -> int:
    from provmesh.demo import DemoConfig, check_report, run_demo

    base = Path(args.dir) if args.dir else Path(tempfile.mkdtemp(prefix="provmesh-demo-"))
    t0 = time.perf_counter()
    result = run_demo(DemoConfig(base, campaign_id=args.campaign, k=args.k, seed=args.seed))
    problems = check_report(result)
    _emit(
        {
            "store": str(result.store_dir),
            "seconds": round(time.perf_counter() - t0, 3),
            "expected_top": result.expected_top(),
            "problems": problems,
            "report": result.report.to_dict(),
        }
    )
    return EXIT_OK if not problems else EXIT_INTERNAL


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="provmesh", description="Multi-workflow provenance capture and query.")
    p.add_argument("--store", default=DEFAULT_STORE, help="task store directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("serve", help="run the HTTP query service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--broker-listen", metavar="HOST:PORT", help="also run a TCP broker and integrator into the store")
    s.set_defaults(func=cmd_serve)

    q = sub.add_parser("query", help="run a query spec")
    q.add_argument("--spec", help="JSON file holding a query spec")
    q.add_argument("--filter", action="append", metavar="PATH=VALUE", help="also !=, >, >=, <, <=")
    q.add_argument("--projection", action="append", metavar="PATH[,PATH]")
    q.add_argument("--agg", action="append", metavar="OP:PATH")
    q.add_argument("--group-by", metavar="PATH")
    q.add_argument("--sort", action="append", metavar="PATH[:descending]")
    q.add_argument("--limit", type=int)
    q.set_defaults(func=cmd_query)

    ln = sub.add_parser("lineage", help="lineage report for the k best tasks by a metric")
    ln.add_argument("--campaign", required=True)
    ln.add_argument("-k", type=int, default=3)
    ln.add_argument("--metric", required=True)
    ln.add_argument("--maximize", action="store_true")
    ln.set_defaults(func=cmd_lineage)

    c = sub.add_parser("corr", help="correlation matrix of used fields against targets")
    c.add_argument("--campaign", required=True)
    c.add_argument("--used", required=True, metavar="PATH[,PATH]")
    c.add_argument("--targets", required=True, metavar="PATH[,PATH]")
    c.add_argument("--workflow")
    c.set_defaults(func=cmd_corr)

    b = sub.add_parser("bench", help="observability overhead benchmark")
    b.add_argument("--tasks", type=int, default=1000)
    b.add_argument("--duration-ms", type=float, default=10.0)
    b.add_argument("--workers", type=int, default=8)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--max-reps", type=int, default=10)
    b.add_argument("--observability", choices=("on", "off", "both"), default="both")
    b.add_argument("--out", help="write results JSON here")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("ingest-demo", help="run the three-workflow synthetic campaign")
    d.add_argument("--dir", help="working directory (default: a new temp dir)")
    d.add_argument("--campaign", default="demo-campaign")
    d.add_argument("-k", type=int, default=3)
    d.add_argument("--seed", type=int, default=7)
    d.set_defaults(func=cmd_ingest_demo)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except (UserError, BadQuery, UnknownCampaign, StoreUnavailable, ValueError, LookupError) as exc:
        print(f"provmesh: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except ProvmeshError as exc:
        print(f"provmesh: error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"provmesh: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
