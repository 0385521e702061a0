"""Data integrator: drains the event channel into the task store."""

from __future__ import annotations

import logging
import threading
import time
from typing import Callable

from provmesh.broker import Broker, Disconnected, Subscription, DEFAULT_CHANNEL
from provmesh.model import TaskStateEvent, ValidationError, decode_event, validate_event
from provmesh.store.taskstore import StoreError, TaskStore
from provmesh.timeutil import now_ns

log = logging.getLogger(__name__)

CommitHook = Callable[[list[TaskStateEvent], int], None]


class Integrator:
    """Decode, validate, deduplicate and bulk-upsert events from one channel.

    The buffer is written with a single bulk upsert when it holds
    ``capacity`` events or ``tick`` seconds have passed since the last write.
    """

    def __init__(
        self,
        store: TaskStore,
        subscription: Subscription,
        capacity: int = 1000,
        tick: float = 0.25,
        on_commit: CommitHook | None = None,
    ) -> None:
        self.store = store
        self.subscription = subscription
        self.capacity = capacity
        self.tick = tick
        self.on_commit = on_commit
        self._seen: set[tuple] = set()
        self._buffer: list[TaskStateEvent] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.received = 0
        self.applied = 0
        self.duplicates = 0
        self.malformed = 0
        self.flushes = 0
        self.store_errors = 0

    @classmethod
    def from_broker(cls, store: TaskStore, broker: Broker, channel: str = DEFAULT_CHANNEL, **kw) -> Integrator:
        return cls(store, broker.subscribe(channel), **kw)

    def handle(self, message: bytes) -> None:
        self.received += 1
        try:
            event = validate_event(decode_event(message))
        except (ValueError, ValidationError) as exc:
            self.malformed += 1
            log.debug("dropping malformed event: %s", exc)
            return
        key = event.dedup_key
        if key in self._seen:
            self.duplicates += 1
            return
        self._seen.add(key)
        self._buffer.append(event)

    def flush(self) -> None:
        if not self._buffer:
            return
        batch, self._buffer = self._buffer, []
        try:
            self.store.bulk_upsert(batch)
        except StoreError:
            # keep the batch; the next tick retries
            self.store_errors += 1
            self._buffer = batch + self._buffer
            log.exception("bulk upsert failed")
            return
        self.applied += len(batch)
        self.flushes += 1
        if self.on_commit is not None:
            self.on_commit(batch, now_ns())

    def consume_loop(self) -> None:
        last_flush = time.monotonic()
        while not self._stop.is_set():
            wait = max(0.0, last_flush + self.tick - time.monotonic())
            try:
                batch = self.subscription.pull_batch(self.capacity, min(wait, self.tick))
            except Disconnected:
                log.warning("integrator subscription disconnected")
                break
            for msg in batch:
                self.handle(msg)
            if len(self._buffer) >= self.capacity or time.monotonic() - last_flush >= self.tick:
                self.flush()
                last_flush = time.monotonic()
        self.drain()

    def drain(self, quiet_period: float = 0.05) -> None:
        """Pull until the channel stays empty for ``quiet_period``, then flush."""
        while True:
            try:
                batch = self.subscription.pull_batch(self.capacity, quiet_period)
            except Disconnected:
                break
            if not batch:
                break
            for msg in batch:
                self.handle(msg)
            if len(self._buffer) >= self.capacity:
                self.flush()
        self.flush()

    def start(self) -> Integrator:
        self._thread = threading.Thread(target=self.consume_loop, name="integrator", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        """Stop consuming after draining everything already published."""
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
