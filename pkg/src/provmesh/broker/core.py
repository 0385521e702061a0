"""Channel-based pub/sub with bulk publish, in-process flavour.

There is no persistence and no replay: a subscription sees only messages
published after it was created.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from typing import Protocol, Sequence

from provmesh.model import ProvmeshError

DEFAULT_CHANNEL = "task_events"
MAX_MESSAGE_BYTES = 1 << 20


class BrokerError(ProvmeshError):
    pass


class Disconnected(BrokerError):
    pass


class OversizedMessage(BrokerError):
    pass


class BrokerUnreachable(BrokerError):
    pass


class Subscription(Protocol):
    def pull(self, timeout: float = 0.0) -> bytes | None: ...

    def pull_batch(self, max_messages: int = 1000, timeout: float = 0.0) -> list[bytes]: ...

    def close(self) -> None: ...


class Broker(Protocol):
    def publish_bulk(self, channel: str, messages: Sequence[bytes]) -> int: ...

    def subscribe(self, channel: str = DEFAULT_CHANNEL) -> Subscription: ...

    def ping(self) -> None: ...

    def close(self) -> None: ...


def check_sizes(messages: Sequence[bytes]) -> None:
    for m in messages:
        if len(m) > MAX_MESSAGE_BYTES:
            raise OversizedMessage(f"message of {len(m)} bytes exceeds {MAX_MESSAGE_BYTES}")


class LocalSubscription:
    def __init__(self, channel: Channel) -> None:
        self._channel = channel
        self._queue: deque[bytes] = deque()
        self._cond = threading.Condition()
        self.closed = False

    def _offer(self, messages: Sequence[bytes]) -> None:
        with self._cond:
            self._queue.extend(messages)
            self._cond.notify()

    def pending(self) -> int:
        return len(self._queue)

    def pull(self, timeout: float = 0.0) -> bytes | None:
        batch = self.pull_batch(1, timeout)
        return batch[0] if batch else None

    def pull_batch(self, max_messages: int = 1000, timeout: float = 0.0) -> list[bytes]:
        """Block up to ``timeout`` seconds for messages; empty list means timeout."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while not self._queue:
                if self.closed:
                    raise Disconnected("subscription closed")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self._cond.wait(remaining)
            q = self._queue
            n = min(max_messages, len(q))
            return [q.popleft() for _ in range(n)]

    def close(self) -> None:
        self._channel._unsubscribe(self)
        with self._cond:
            self.closed = True
            self._cond.notify_all()


class Channel:
    def __init__(self, name: str) -> None:
        self.name = name
        self._lock = threading.Lock()
        self._subs: list[LocalSubscription] = []
        self.published = 0

    def subscribe(self) -> LocalSubscription:
        sub = LocalSubscription(self)
        with self._lock:
            self._subs.append(sub)
        return sub

    def _unsubscribe(self, sub: LocalSubscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def publish(self, messages: Sequence[bytes]) -> None:
        # the channel lock makes each batch contiguous for every subscriber
        with self._lock:
            for sub in self._subs:
                sub._offer(messages)
            self.published += len(messages)


class InProcessBroker:
    def __init__(self) -> None:
        self._channels: dict[str, Channel] = {}
        self._lock = threading.Lock()
        self.closed = False

    def channel(self, name: str) -> Channel:
        with self._lock:
            ch = self._channels.get(name)
            if ch is None:
                ch = self._channels[name] = Channel(name)
            return ch

    def publish_bulk(self, channel: str, messages: Sequence[bytes]) -> int:
        if self.closed:
            raise Disconnected("broker closed")
        if not messages:
            return 0
        check_sizes(messages)
        self.channel(channel).publish(list(messages))
        return len(messages)

    def subscribe(self, channel: str = DEFAULT_CHANNEL) -> LocalSubscription:
        if self.closed:
            raise Disconnected("broker closed")
        return self.channel(channel).subscribe()

    def ping(self) -> None:
        if self.closed:
            raise BrokerUnreachable("broker closed")

    def close(self) -> None:
        self.closed = True


_registry: dict[str, InProcessBroker] = {}
_registry_lock = threading.Lock()


def inproc(name: str = "default") -> InProcessBroker:
    """Process-wide named in-process broker."""
    with _registry_lock:
        b = _registry.get(name)
        if b is None or b.closed:
            b = _registry[name] = InProcessBroker()
        return b
