"""Message broker: in-process and TCP pub/sub with bulk publish."""

from __future__ import annotations

import os

from provmesh.broker.core import (
    DEFAULT_CHANNEL,
    MAX_MESSAGE_BYTES,
    Broker,
    BrokerError,
    BrokerUnreachable,
    Disconnected,
    InProcessBroker,
    OversizedMessage,
    Subscription,
    inproc,
)
from provmesh.broker.tcp import BrokerServer, TcpBrokerClient

BROKER_ENV = "PROVMESH_BROKER"

__all__ = [
    "BROKER_ENV",
    "DEFAULT_CHANNEL",
    "MAX_MESSAGE_BYTES",
    "Broker",
    "BrokerError",
    "BrokerServer",
    "BrokerUnreachable",
    "Disconnected",
    "InProcessBroker",
    "OversizedMessage",
    "Subscription",
    "TcpBrokerClient",
    "connect",
    "inproc",
]


def connect(address: str | None = None) -> Broker:
    """Open a broker from ``inproc://<name>`` or ``tcp://host:port``.

    The ``PROVMESH_BROKER`` environment variable overrides ``address``.
    """
    address = os.environ.get(BROKER_ENV) or address or "inproc://default"
    if address.startswith("inproc://"):
        return inproc(address[len("inproc://"):] or "default")
    if address.startswith("tcp://"):
        host, _, port = address[len("tcp://"):].rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad broker address {address!r}")
        return TcpBrokerClient(host, int(port))
    raise ValueError(f"unsupported broker address {address!r}")
