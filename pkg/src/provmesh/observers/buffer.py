"""Buffered, asynchronous emission of task events to the broker."""

from __future__ import annotations

import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass

from provmesh.broker import DEFAULT_CHANNEL, Broker, BrokerError
from provmesh.model import TaskStateEvent, encode_event

log = logging.getLogger(__name__)

RATE_WINDOW_S = 2.0
PUBLISH_ATTEMPTS = 3
BACKOFF_S = 0.05
BACKPRESSURE_FACTOR = 4
# events encoded per GIL hold; keeps a large flush from stalling woken workers
ENCODE_CHUNK = 64


@dataclass(frozen=True)
class BufferPolicy:
    min_capacity: int = 10
    max_capacity: int = 1000
    flush_interval: float = 0.5
    dynamic: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.min_capacity <= self.max_capacity:
            raise ValueError("need 1 <= min_capacity <= max_capacity")
        if not self.flush_interval > 0:
            raise ValueError("flush_interval must be > 0")


def adjust_capacity(rate: float, policy: BufferPolicy) -> int:
    """Buffer size that fills in about one flush interval at ``rate`` events/s."""
    if not math.isfinite(rate):
        return policy.max_capacity if rate > 0 else policy.min_capacity
    target = round(max(rate, 0.0) * policy.flush_interval)
    return min(max(target, policy.min_capacity), policy.max_capacity)


class EventBuffer:
    """Per-observer buffer drained by one background flusher thread.

    ``emit`` only appends under a lock. The flusher publishes everything
    buffered as one bulk message when the buffer reaches the current capacity
    or ``flush_interval`` elapses. If the broker falls behind and the buffer
    grows past ``BACKPRESSURE_FACTOR * max_capacity``, emit flushes inline.
    """

    def __init__(self, broker: Broker, policy: BufferPolicy | None = None, channel: str = DEFAULT_CHANNEL) -> None:
        self.broker = broker
        self.policy = policy or BufferPolicy()
        self.channel = channel
        self.capacity = self.policy.min_capacity if self.policy.dynamic else self.policy.max_capacity
        self._items: list[TaskStateEvent] = []
        self._cond = threading.Condition(threading.Lock())
        self._publish_lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._stopping = False
        self._emitted = 0
        self._rate = 0.0
        self._rate_mark = (time.monotonic(), 0)
        self.publishes = 0
        self.published_events = 0
        self.timer_flushes = 0
        self.dropped = 0
        self.batch_sizes: deque[int] = deque(maxlen=10_000)

    @property
    def rate(self) -> float:
        return self._rate

    def __len__(self) -> int:
        return len(self._items)

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stopping = False
        self._thread = threading.Thread(target=self._run, name="event-flusher", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        """Flush everything still buffered and join the flusher."""
        with self._cond:
            self._stopping = True
            self._cond.notify()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
        self._flush(self._take())

    def emit(self, event: TaskStateEvent) -> None:
        with self._cond:
            items = self._items
            items.append(event)
            self._emitted += 1
            n = len(items)
            if n >= self.capacity:
                self._cond.notify()
            if n < BACKPRESSURE_FACTOR * self.policy.max_capacity:
                return
            batch = self._take_locked()
        self._flush(batch)

    def _take_locked(self) -> list[TaskStateEvent]:
        batch, self._items = self._items, []
        return batch

    def _take(self) -> list[TaskStateEvent]:
        with self._cond:
            return self._take_locked()

    def _update_rate(self) -> None:
        now = time.monotonic()
        t0, n0 = self._rate_mark
        dt = now - t0
        if dt <= 0:
            return
        inst = (self._emitted - n0) / dt
        alpha = 1.0 - math.exp(-dt / RATE_WINDOW_S)
        self._rate += alpha * (inst - self._rate)
        self._rate_mark = (now, self._emitted)
        if self.policy.dynamic:
            self.capacity = adjust_capacity(self._rate, self.policy)

    def _run(self) -> None:
        interval = self.policy.flush_interval
        deadline = time.monotonic() + interval
        while True:
            with self._cond:
                while not self._stopping and len(self._items) < self.capacity:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        break
                    self._cond.wait(min(remaining, interval))
                if self._stopping:
                    return
                timer = len(self._items) < self.capacity
                batch = self._take_locked()
            self._update_rate()
            if batch:
                if timer:
                    self.timer_flushes += 1
                self._flush(batch)
            deadline = time.monotonic() + interval

    def _flush(self, batch: list[TaskStateEvent]) -> None:
        if not batch:
            return
        messages: list[bytes] = []
        for i in range(0, len(batch), ENCODE_CHUNK):
            if i:
                time.sleep(0)
            messages.extend(encode_event(e) for e in batch[i : i + ENCODE_CHUNK])
        with self._publish_lock:
            for attempt in range(PUBLISH_ATTEMPTS):
                try:
                    self.broker.publish_bulk(self.channel, messages)
                    break
                except BrokerError as exc:
                    log.warning("bulk publish failed (attempt %d): %s", attempt + 1, exc)
                    if attempt + 1 < PUBLISH_ATTEMPTS:
                        time.sleep(BACKOFF_S * 2**attempt)
            else:
                self.dropped += len(batch)
                return
            self.publishes += 1
            self.published_events += len(batch)
            self.batch_sizes.append(len(batch))
