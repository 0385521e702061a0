"""An ingest node: TCP broker + integrator + task store in one process."""

from __future__ import annotations

import logging
import os
from pathlib import Path

from provmesh.broker import DEFAULT_CHANNEL, BrokerServer
from provmesh.store import TaskStore
from provmesh.store.integrator import CommitHook, Integrator

log = logging.getLogger(__name__)


class IngestNode:
    def __init__(
        self,
        store_dir: str | Path,
        host: str = "127.0.0.1",
        port: int = 0,
        channel: str = DEFAULT_CHANNEL,
        on_commit: CommitHook | None = None,
        capacity: int = 1000,
        tick: float = 0.25,
    ) -> None:
        self.store = TaskStore(store_dir)
        self.server = BrokerServer(host, port)
        self.integrator = Integrator(
            self.store, self.server.core.subscribe(channel), capacity=capacity, tick=tick, on_commit=on_commit
        )

    @property
    def broker_address(self) -> str:
        return self.server.address

    def start(self) -> IngestNode:
        self.server.start()
        self.integrator.start()
        log.info("ingest node listening on %s", self.broker_address)
        return self

    def stop(self) -> None:
        self.integrator.stop()
        self.server.stop()
        self.store.close()

    def __enter__(self) -> IngestNode:
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()


def run_node_process(store_dir: str, conn: object, host: str = "127.0.0.1", niceness: int = 0) -> None:
    """Entry point for a child process: report the broker address, run until told to stop.

    A positive ``niceness`` lowers the node's CPU priority, which on a machine
    with fewer cores than processes keeps it off the measured workload's
    critical path, the way a separate ingest host would.
    """
    logging.basicConfig(level=logging.WARNING)
    if niceness:
        try:
            os.nice(niceness)
        except OSError:
            log.warning("could not lower ingest node priority")
    node = IngestNode(store_dir, host=host).start()
    conn.send(node.broker_address)  # type: ignore[attr-defined]
    try:
        conn.recv()  # type: ignore[attr-defined]
    except EOFError:
        pass
    node.stop()
    conn.send({"applied": node.integrator.applied, "malformed": node.integrator.malformed})  # type: ignore[attr-defined]
