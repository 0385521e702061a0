from __future__ import annotations

import socket
import threading

import pytest

from provmesh.broker import (
    BrokerServer,
    BrokerUnreachable,
    Disconnected,
    InProcessBroker,
    OversizedMessage,
    TcpBrokerClient,
    connect,
    inproc,
)
from provmesh.broker.tcp import HEADER, recv_frame, send_frame


@pytest.fixture
def server():
    srv = BrokerServer().start()
    yield srv
    srv.stop()


def tcp_client(srv: BrokerServer) -> TcpBrokerClient:
    host, port = srv.server_address[:2]
    return TcpBrokerClient(host, port)


def drain(sub, expected: int, timeout: float = 5.0) -> list[bytes]:
    out: list[bytes] = []
    while len(out) < expected:
        batch = sub.pull_batch(10_000, timeout)
        if not batch:
            break
        out.extend(batch)
    return out


def test_inproc_conservation():
    b = InProcessBroker()
    sub = b.subscribe("ch")
    msgs = [f"m{i}".encode() for i in range(1000)]
    assert b.publish_bulk("ch", msgs) == 1000
    assert drain(sub, 1000) == msgs


def test_empty_publish_is_noop():
    b = InProcessBroker()
    sub = b.subscribe()
    assert b.publish_bulk("task_events", []) == 0
    assert sub.pull(0.01) is None


def test_pull_times_out_quietly():
    b = InProcessBroker()
    sub = b.subscribe()
    b.publish_bulk("task_events", [b"a", b"b", b"c"])
    assert [sub.pull(0.1) for _ in range(3)] == [b"a", b"b", b"c"]
    assert sub.pull(0.05) is None


def test_no_replay_after_resubscribe():
    b = InProcessBroker()
    sub = b.subscribe()
    sub.close()
    with pytest.raises(Disconnected):
        sub.pull(0.01)
    b.publish_bulk("task_events", [b"lost"])
    again = b.subscribe()
    b.publish_bulk("task_events", [b"kept"])
    assert drain(again, 1) == [b"kept"]


def test_fan_out_to_every_subscriber():
    b = InProcessBroker()
    s1, s2 = b.subscribe(), b.subscribe()
    b.publish_bulk("task_events", [b"x", b"y"])
    assert drain(s1, 2) == drain(s2, 2) == [b"x", b"y"]


def test_oversized_message_rejected():
    b = InProcessBroker()
    with pytest.raises(OversizedMessage):
        b.publish_bulk("task_events", [b"x" * ((1 << 20) + 1)])


def test_named_inproc_registry_shares_instances():
    assert inproc("reg-test") is inproc("reg-test")
    assert connect("inproc://reg-test") is inproc("reg-test")
    with pytest.raises(ValueError):
        connect("carrier-pigeon://x")


def test_frame_header_is_big_endian_length(server):
    host, port = server.server_address[:2]
    with socket.create_connection((host, port)) as s:
        send_frame(s, {"op": "pub", "channel": "c", "messages": ["hi"]})
        rfile = s.makefile("rb")
        reply = recv_frame(rfile)
    assert reply == {"op": "ack", "channel": "c", "count": 1}
    assert HEADER.pack(258) == b"\x00\x00\x01\x02"


def test_tcp_round_trip_and_ordering(server):
    client = tcp_client(server)
    sub = client.subscribe("ch")
    msgs = [f'{{"i":{i},"s":"é"}}'.encode() for i in range(5000)]
    assert client.publish_bulk("ch", msgs) == 5000
    assert drain(sub, 5000) == msgs
    sub.close()
    client.close()


def test_tcp_two_publishers_keep_per_publisher_order(server):
    reader = tcp_client(server)
    sub = reader.subscribe("ch")

    def publish(tag: str) -> None:
        c = tcp_client(server)
        for start in range(0, 500, 50):
            c.publish_bulk("ch", [f"{tag}:{i}".encode() for i in range(start, start + 50)])
        c.close()

    threads = [threading.Thread(target=publish, args=(t,)) for t in "AB"]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    got = [m.decode() for m in drain(sub, 1000)]
    assert len(got) == 1000
    for tag in "AB":
        seq = [int(m.split(":")[1]) for m in got if m.startswith(tag)]
        assert seq == list(range(500))
    reader.close()


def test_tcp_large_batches_are_split_below_frame_limit(server):
    client = tcp_client(server)
    sub = client.subscribe("big")
    msgs = [("x" * 900_000).encode()] * 30  # ~27 MB in total
    assert client.publish_bulk("big", msgs) == 30
    got = []
    while len(got) < 30:
        got.extend(sub.pull_batch(5, 5.0))
    assert got == msgs


def test_tcp_rejects_non_utf8(server):
    from provmesh.broker import BrokerError

    client = tcp_client(server)
    with pytest.raises(BrokerError):
        client.publish_bulk("ch", [b"\xff\xfe"])


def test_unreachable_broker():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    client = TcpBrokerClient("127.0.0.1", port, connect_timeout=0.5)
    with pytest.raises(BrokerUnreachable):
        client.ping()
