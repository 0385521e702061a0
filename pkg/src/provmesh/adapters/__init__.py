"""Built-in data observers: scheduler plugin, log file, run-record directory."""

from provmesh.adapters.logfile import FileRotated, LogFileObserver, LogLineRecord, TaskLogFormatter, format_line, parse_line
from provmesh.adapters.recordstore import RecordStoreObserver, RunRecord, UnreadableRecord, read_run, write_run
from provmesh.adapters.scheduler_observer import SchedulerObserver
from provmesh.observers.base import AdapterKind

ADAPTERS = {
    AdapterKind.SCHEDULER_PLUGIN: SchedulerObserver,
    AdapterKind.LOG_FILE: LogFileObserver,
    AdapterKind.RECORD_STORE: RecordStoreObserver,
}

__all__ = [
    "ADAPTERS",
    "FileRotated",
    "LogFileObserver",
    "LogLineRecord",
    "RecordStoreObserver",
    "RunRecord",
    "SchedulerObserver",
    "TaskLogFormatter",
    "UnreadableRecord",
    "format_line",
    "parse_line",
    "read_run",
    "write_run",
]
