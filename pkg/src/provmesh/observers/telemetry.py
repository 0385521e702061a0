"""Best-effort CPU / memory / IO snapshots of the observing process."""

from __future__ import annotations

import logging
import threading

import psutil

from provmesh.model import Telemetry
from provmesh.timeutil import now_ns

log = logging.getLogger(__name__)

_proc: psutil.Process | None = None
_lock = threading.Lock()


def capture_telemetry() -> Telemetry | None:
    """Snapshot of this process; ``None`` if sampling fails.

    ``cpu_percent`` is measured since the previous call in this process, so
    the first call reports 0.0.
    """
    global _proc
    try:
        with _lock:
            if _proc is None:
                _proc = psutil.Process()
            proc = _proc
            cpu = proc.cpu_percent(interval=None)
        rss = proc.memory_info().rss
        try:
            io = proc.io_counters()
            io_read, io_write = io.read_bytes, io.write_bytes
        except (psutil.AccessDenied, AttributeError, NotImplementedError, OSError):
            io_read = io_write = 0
        return Telemetry(
            cpu_percent=float(cpu),
            rss_bytes=int(rss),
            io_read_bytes=int(io_read),
            io_write_bytes=int(io_write),
            captured_at=now_ns(),
        )
    except Exception:  # never break the emission path
        log.debug("telemetry capture failed", exc_info=True)
        return None
