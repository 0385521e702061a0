"""Controller API: register observers, start them, stop them gracefully.

Configuration files are INI-style, one ``[observer.<name>]`` section per
observer plus an optional ``[controller]`` section::

    [controller]
    broker = tcp://127.0.0.1:5555

    [observer.microscope]
    adapter_kind = LOG_FILE
    locator = /data/wf1/tasks.log
    poll_interval = 0.5
    relevance = used.*, generated.dataset
    telemetry_enabled = false
    campaign_id = c1
    workflow_id = wf1
    min_capacity = 10
    max_capacity = 1000
    flush_interval = 0.5
    dynamic = true

``PROVMESH_BROKER`` overrides the broker address.
"""

from __future__ import annotations

import configparser
import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Any

from provmesh import broker as broker_mod
from provmesh.broker import Broker, BrokerUnreachable
from provmesh.observers.base import AdapterKind, BadConfig, DataObserver, ObserverConfig, UnknownAdapterKind
from provmesh.observers.buffer import BufferPolicy, EventBuffer

log = logging.getLogger(__name__)


class Controller:
    def __init__(self, broker: Broker | str | None = None) -> None:
        if broker is None or isinstance(broker, str):
            self.broker = broker_mod.connect(broker)
            # in-process brokers are shared by name; only close our own sockets
            self._owns_broker = isinstance(self.broker, broker_mod.TcpBrokerClient)
        else:
            self.broker = broker
            self._owns_broker = False
        self.observers: list[DataObserver] = []
        self.running = False

    def register(self, config: ObserverConfig) -> DataObserver:
        from provmesh.adapters import ADAPTERS

        try:
            kind = AdapterKind(config.adapter_kind)
        except ValueError:
            raise UnknownAdapterKind(f"unknown adapter kind {config.adapter_kind!r}") from None
        config = replace(config, adapter_kind=kind)
        if kind.polling:
            if not config.poll_interval > 0:
                raise BadConfig("poll_interval", "must be > 0 for polling adapters")
            if not config.locator:
                raise BadConfig("locator", "polling adapters need a source locator")
            path = Path(config.locator)
            if kind is AdapterKind.LOG_FILE and not path.is_file():
                raise BadConfig("locator", f"log file {path} does not exist")
            if kind is AdapterKind.RECORD_STORE and not path.is_dir():
                raise BadConfig("locator", f"run-record directory {path} does not exist")
        if not isinstance(config.buffer, BufferPolicy):
            raise BadConfig("buffer", "must be a BufferPolicy")
        sink = EventBuffer(self.broker, config.buffer, config.channel)
        observer = ADAPTERS[kind](config, sink)
        self.observers.append(observer)
        return observer

    def start_all(self) -> None:
        """Start every registered observer, or none of them."""
        if self.running:
            return
        try:
            self.broker.ping()
        except BrokerUnreachable:
            raise
        except Exception as exc:
            raise BrokerUnreachable(str(exc)) from exc
        started: list[DataObserver] = []
        try:
            for obs in self.observers:
                obs.start()
                started.append(obs)
        except Exception:
            for obs in reversed(started):
                obs.stop()
            raise
        self.running = True

    def stop_all(self) -> None:
        """Flush and stop all observers; calling it again does nothing."""
        if not self.running:
            return
        for obs in self.observers:
            obs.stop()
        self.running = False
        if self._owns_broker:
            self.broker.close()

    def __enter__(self) -> Controller:
        self.start_all()
        return self

    def __exit__(self, *exc: object) -> None:
        self.stop_all()

    @property
    def dropped_events(self) -> int:
        return sum(o.sink.dropped for o in self.observers)

    @classmethod
    def from_config_file(cls, path: str | Path, broker: Broker | None = None) -> Controller:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise BadConfig("path", f"cannot read {path}")
        if os.environ.get(broker_mod.BROKER_ENV) or broker is None:
            ctl = cls(parser.get("controller", "broker", fallback=None))
        else:
            ctl = cls(broker)
        for section in parser.sections():
            if section.startswith("observer."):
                ctl.register(config_from_section(parser[section], name=section[len("observer."):]))
        return ctl


def _bool(section: Any, key: str, default: bool) -> bool:
    try:
        return section.getboolean(key, fallback=default)
    except ValueError:
        raise BadConfig(key, "must be a boolean") from None


def _num(section: Any, key: str, kind: type, default: Any) -> Any:
    raw = section.get(key)
    if raw is None:
        return default
    try:
        return kind(raw)
    except ValueError:
        raise BadConfig(key, f"not a {kind.__name__}: {raw!r}") from None


def config_from_section(section: Any, name: str = "") -> ObserverConfig:
    kind = section.get("adapter_kind")
    if kind is None:
        raise BadConfig("adapter_kind", "missing")
    try:
        kind = AdapterKind(kind.strip().upper())
    except ValueError:
        raise UnknownAdapterKind(f"unknown adapter kind {kind!r}") from None
    relevance = [p.strip() for p in section.get("relevance", "").split(",") if p.strip()]
    defaults = BufferPolicy()
    knobs = dict(
        min_capacity=_num(section, "min_capacity", int, defaults.min_capacity),
        max_capacity=_num(section, "max_capacity", int, defaults.max_capacity),
        flush_interval=_num(section, "flush_interval", float, defaults.flush_interval),
        dynamic=_bool(section, "dynamic", defaults.dynamic),
    )
    try:
        policy = BufferPolicy(**knobs)
    except ValueError as exc:
        raise BadConfig("buffer", str(exc)) from None
    return ObserverConfig(
        adapter_kind=kind,
        locator=section.get("locator"),
        poll_interval=_num(section, "poll_interval", float, 0.5),
        relevance=relevance,
        telemetry_enabled=_bool(section, "telemetry_enabled", False),
        buffer=policy,
        campaign_id=section.get("campaign_id", ""),
        workflow_id=section.get("workflow_id", ""),
        activity_id=section.get("activity_id", ""),
        channel=section.get("channel", "task_events"),
        name=name,
    )
