"""Observer framework: adapter interface, controller, buffering, telemetry."""

from provmesh.observers.base import (
    AdapterKind,
    BadConfig,
    DataObserver,
    ObserverConfig,
    UnknownAdapterKind,
    is_relevant,
)
from provmesh.observers.buffer import BufferPolicy, EventBuffer, adjust_capacity
from provmesh.observers.controller import Controller, config_from_section
from provmesh.observers.telemetry import capture_telemetry

__all__ = [
    "AdapterKind",
    "BadConfig",
    "BufferPolicy",
    "Controller",
    "DataObserver",
    "EventBuffer",
    "ObserverConfig",
    "UnknownAdapterKind",
    "adjust_capacity",
    "capture_telemetry",
    "config_from_section",
    "is_relevant",
]
