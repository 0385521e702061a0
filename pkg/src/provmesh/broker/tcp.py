"""TCP transport for the broker.

Wire format: every frame is a 4-byte big-endian payload length followed by a
UTF-8 JSON object ``{"op": "pub"|"sub"|"pull"|"ack", "channel": ..., "messages": [...]}``.
Messages travel as JSON strings, so payloads must be UTF-8 text.

A connection that sends ``sub`` becomes a subscriber connection and from then
on only issues ``pull`` requests; publishing uses a separate connection.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
from typing import Any, Sequence

from provmesh.broker.core import (
    DEFAULT_CHANNEL,
    BrokerError,
    BrokerUnreachable,
    Disconnected,
    InProcessBroker,
    LocalSubscription,
    OversizedMessage,
    check_sizes,
)

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME_BYTES = 16 << 20
# leave room for the JSON envelope and string escaping
_SPLIT_BYTES = 12 << 20


def send_frame(sock: socket.socket, obj: dict[str, Any]) -> None:
    body = json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise OversizedMessage(f"frame of {len(body)} bytes exceeds {MAX_FRAME_BYTES}")
    sock.sendall(HEADER.pack(len(body)) + body)


def _recv_exact(rfile: Any, n: int) -> bytes:
    data = rfile.read(n)
    if data is None or len(data) < n:
        raise Disconnected("connection closed mid-frame" if data else "connection closed")
    return data


def recv_frame(rfile: Any) -> dict[str, Any]:
    (length,) = HEADER.unpack(_recv_exact(rfile, HEADER.size))
    if length > MAX_FRAME_BYTES:
        raise OversizedMessage(f"incoming frame of {length} bytes")
    obj = json.loads(_recv_exact(rfile, length))
    if not isinstance(obj, dict):
        raise BrokerError("frame payload must be a JSON object")
    return obj


class _Handler(socketserver.StreamRequestHandler):
    server: BrokerServer

    def handle(self) -> None:
        sub: LocalSubscription | None = None
        core = self.server.core
        try:
            while True:
                try:
                    req = recv_frame(self.rfile)
                except Disconnected:
                    return
                op = req.get("op")
                channel = req.get("channel") or DEFAULT_CHANNEL
                if op == "pub":
                    msgs = [m.encode("utf-8") for m in req.get("messages") or []]
                    try:
                        n = core.publish_bulk(channel, msgs)
                        reply: dict[str, Any] = {"op": "ack", "channel": channel, "count": n}
                    except OversizedMessage as exc:
                        reply = {"op": "ack", "channel": channel, "error": str(exc)}
                elif op == "sub":
                    if sub is None:
                        sub = core.subscribe(channel)
                    reply = {"op": "ack", "channel": channel}
                elif op == "pull":
                    if sub is None:
                        reply = {"op": "ack", "channel": channel, "error": "not subscribed"}
                    else:
                        batch = sub.pull_batch(int(req.get("max", 1000)), float(req.get("timeout", 0.0)))
                        reply = {
                            "op": "ack",
                            "channel": channel,
                            "messages": [m.decode("utf-8") for m in batch],
                        }
                else:
                    reply = {"op": "ack", "error": f"unknown op {op!r}"}
                send_frame(self.connection, reply)
        except (OSError, ValueError, BrokerError) as exc:
            log.debug("broker connection ended: %s", exc)
        finally:
            if sub is not None:
                sub.close()


class BrokerServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0, core: InProcessBroker | None = None) -> None:
        self.core = core or InProcessBroker()
        super().__init__((host, port), _Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"tcp://{host}:{port}"

    def start(self) -> BrokerServer:
        self._thread = threading.Thread(target=self.serve_forever, name="broker-server", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()


def _split_batches(messages: Sequence[str]) -> list[list[str]]:
    batches: list[list[str]] = []
    cur: list[str] = []
    size = 0
    for m in messages:
        n = len(m) + 8
        if cur and size + n > _SPLIT_BYTES:
            batches.append(cur)
            cur, size = [], 0
        cur.append(m)
        size += n
    if cur:
        batches.append(cur)
    return batches


class _Conn:
    def __init__(self, host: str, port: int, timeout: float) -> None:
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise BrokerUnreachable(f"cannot reach broker at {host}:{port}: {exc}") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.settimeout(None)
        self.rfile = self.sock.makefile("rb")
        self.lock = threading.Lock()

    def call(self, obj: dict[str, Any]) -> dict[str, Any]:
        with self.lock:
            try:
                send_frame(self.sock, obj)
                reply = recv_frame(self.rfile)
            except OSError as exc:
                raise Disconnected(str(exc)) from exc
        if "error" in reply:
            raise BrokerError(reply["error"])
        return reply

    def close(self) -> None:
        try:
            self.rfile.close()
            self.sock.close()
        except OSError:
            pass


class TcpSubscription:
    def __init__(self, conn: _Conn, channel: str) -> None:
        self._conn = conn
        self.channel = channel
        conn.call({"op": "sub", "channel": channel})

    def pull(self, timeout: float = 0.0) -> bytes | None:
        batch = self.pull_batch(1, timeout)
        return batch[0] if batch else None

    def pull_batch(self, max_messages: int = 1000, timeout: float = 0.0) -> list[bytes]:
        reply = self._conn.call({"op": "pull", "channel": self.channel, "max": max_messages, "timeout": timeout})
        return [m.encode("utf-8") for m in reply.get("messages", [])]

    def close(self) -> None:
        self._conn.close()


class TcpBrokerClient:
    """Publisher/subscriber client for a :class:`BrokerServer`."""

    def __init__(self, host: str, port: int, connect_timeout: float = 5.0) -> None:
        self.host, self.port = host, port
        self.connect_timeout = connect_timeout
        self._pub: _Conn | None = None
        self._lock = threading.Lock()

    def _publisher(self) -> _Conn:
        with self._lock:
            if self._pub is None:
                self._pub = _Conn(self.host, self.port, self.connect_timeout)
            return self._pub

    def publish_bulk(self, channel: str, messages: Sequence[bytes]) -> int:
        if not messages:
            return 0
        check_sizes(messages)
        try:
            texts = [m.decode("utf-8") for m in messages]
        except UnicodeDecodeError as exc:
            raise BrokerError("TCP broker messages must be UTF-8 text") from exc
        conn = self._publisher()
        total = 0
        try:
            for batch in _split_batches(texts):
                total += conn.call({"op": "pub", "channel": channel, "messages": batch})["count"]
        except Disconnected:
            with self._lock:
                if self._pub is conn:
                    self._pub = None
            conn.close()
            raise
        return total

    def subscribe(self, channel: str = DEFAULT_CHANNEL) -> TcpSubscription:
        return TcpSubscription(_Conn(self.host, self.port, self.connect_timeout), channel)

    def ping(self) -> None:
        try:
            self._publisher().call({"op": "pub", "channel": DEFAULT_CHANNEL, "messages": []})
        except Disconnected as exc:
            raise BrokerUnreachable(str(exc)) from exc

    def close(self) -> None:
        with self._lock:
            conn, self._pub = self._pub, None
        if conn is not None:
            conn.close()
