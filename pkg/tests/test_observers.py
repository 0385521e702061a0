from __future__ import annotations

import configparser
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_event
from provmesh.broker import BrokerError, InProcessBroker, TcpBrokerClient, BrokerUnreachable
from provmesh.model import Status, decode_event
from provmesh.observers import (
    AdapterKind,
    BadConfig,
    BufferPolicy,
    Controller,
    EventBuffer,
    ObserverConfig,
    UnknownAdapterKind,
    adjust_capacity,
    capture_telemetry,
    config_from_section,
    is_relevant,
)


class CountingBroker(InProcessBroker):
    def __init__(self) -> None:
        super().__init__()
        self.calls: list[int] = []

    def publish_bulk(self, channel, messages):
        self.calls.append(len(messages))
        return super().publish_bulk(channel, messages)


class FlakyBroker(CountingBroker):
    def __init__(self, failures: int) -> None:
        super().__init__()
        self.failures = failures

    def publish_bulk(self, channel, messages):
        if self.failures:
            self.failures -= 1
            raise BrokerError("transient")
        return super().publish_bulk(channel, messages)


# -- capacity --------------------------------------------------------------------


def test_adjust_capacity_examples():
    p = BufferPolicy(min_capacity=10, max_capacity=1000, flush_interval=1.0)
    assert adjust_capacity(0, p) == 10
    assert adjust_capacity(1e12, p) == 1000
    assert adjust_capacity(float("inf"), p) == 1000
    assert adjust_capacity(500, p) == 500


@given(st.floats(min_value=0, max_value=1e9), st.integers(1, 100), st.integers(0, 5000), st.floats(0.01, 10))
def test_adjust_capacity_is_a_clamped_product(rate, lo, span, interval):
    p = BufferPolicy(min_capacity=lo, max_capacity=lo + span, flush_interval=interval)
    cap = adjust_capacity(rate, p)
    assert p.min_capacity <= cap <= p.max_capacity
    assert cap == min(max(round(rate * interval), lo), lo + span)


@pytest.mark.parametrize("kw", [{"min_capacity": 0}, {"min_capacity": 5, "max_capacity": 4}, {"flush_interval": 0}])
def test_bad_policy(kw):
    with pytest.raises(ValueError):
        BufferPolicy(**kw)


# -- buffer ----------------------------------------------------------------------


def test_threshold_flush_publishes_one_batch():
    broker = CountingBroker()
    buf = EventBuffer(broker, BufferPolicy(min_capacity=10, max_capacity=10, flush_interval=5.0, dynamic=False))
    buf.start()
    for i in range(10):
        buf.emit(make_event(task_id=f"t{i}"))
    deadline = time.monotonic() + 2
    while not broker.calls and time.monotonic() < deadline:
        time.sleep(0.005)
    assert broker.calls == [10]
    buf.stop()
    assert broker.calls == [10]


def test_timer_flush_publishes_partial_batch():
    broker = CountingBroker()
    buf = EventBuffer(broker, BufferPolicy(min_capacity=10, max_capacity=10, flush_interval=0.1, dynamic=False))
    buf.start()
    for i in range(3):
        buf.emit(make_event(task_id=f"t{i}"))
    time.sleep(0.35)
    assert broker.calls == [3]
    assert buf.timer_flushes == 1
    buf.stop()


def test_hundred_thousand_events_use_few_publishes():
    broker = CountingBroker()
    sub = broker.subscribe()
    buf = EventBuffer(broker, BufferPolicy(min_capacity=1000, max_capacity=1000, dynamic=False))
    buf.start()
    ev = make_event()
    for _ in range(100_000):
        buf.emit(ev)
    buf.stop()
    assert sum(broker.calls) == 100_000
    assert len(broker.calls) <= 101
    assert sub.pending() == 100_000


def test_stop_flushes_everything_and_messages_decode():
    broker = CountingBroker()
    sub = broker.subscribe()
    buf = EventBuffer(broker)
    buf.start()
    for i in range(5):
        buf.emit(make_event(task_id=f"t{i}", payload={"used": {"i": i}}))
    buf.stop()
    got = [decode_event(m)["task_id"] for m in sub.pull_batch(100, 0.1)]
    assert got == [f"t{i}" for i in range(5)]


def test_publish_retries_then_succeeds():
    broker = FlakyBroker(failures=2)
    buf = EventBuffer(broker)
    buf.emit(make_event())
    buf.stop()
    assert buf.dropped == 0 and broker.calls == [1]


def test_publish_gives_up_after_three_attempts():
    broker = FlakyBroker(failures=3)
    buf = EventBuffer(broker)
    buf.emit(make_event())
    buf.emit(make_event())
    buf.stop()
    assert buf.dropped == 2 and broker.calls == []


def test_dynamic_capacity_tracks_rate():
    broker = CountingBroker()
    buf = EventBuffer(broker, BufferPolicy(min_capacity=10, max_capacity=1000, flush_interval=0.1))
    buf.start()
    ev = make_event()
    t_end = time.monotonic() + 1.0
    while time.monotonic() < t_end:
        for _ in range(20):
            buf.emit(ev)
        time.sleep(0.002)
    assert buf.rate > 100
    assert buf.capacity > 10
    buf.stop()


# -- relevance and telemetry -----------------------------------------------------


def test_relevance_filter():
    loss = make_event(payload={"generated": {"loss": 0.1}})
    acc = make_event(payload={"generated": {"accuracy": 0.9}})
    assert is_relevant(loss, ["generated.loss"])
    assert not is_relevant(acc, ["generated.loss"])
    assert is_relevant(acc, [])
    assert is_relevant(acc, ["generated.*"])
    assert is_relevant(make_event(payload={"used": {"lr": 1}}), ["used.l?"])


def test_telemetry_capture_orders_and_counts():
    first = capture_telemetry()
    x = 0
    t_end = time.process_time() + 0.2
    while time.process_time() < t_end:
        x += 1
    second = capture_telemetry()
    assert first is not None and second is not None
    assert second.captured_at > first.captured_at
    assert second.cpu_percent >= first.cpu_percent
    assert second.rss_bytes > 0


# -- controller ------------------------------------------------------------------


def test_register_validates_locators(tmp_path):
    ctl = Controller(InProcessBroker())
    with pytest.raises(BadConfig) as info:
        ctl.register(ObserverConfig(AdapterKind.LOG_FILE, locator=str(tmp_path / "missing.log")))
    assert info.value.field == "locator"
    with pytest.raises(BadConfig) as info:
        ctl.register(ObserverConfig(AdapterKind.RECORD_STORE, locator=str(tmp_path), poll_interval=0))
    assert info.value.field == "poll_interval"
    with pytest.raises(UnknownAdapterKind):
        ctl.register(ObserverConfig("QUANTUM"))  # type: ignore[arg-type]
    handle = ctl.register(ObserverConfig(AdapterKind.SCHEDULER_PLUGIN))
    assert callable(handle.callback)


def test_start_emit_stop_delivers_everything():
    broker = InProcessBroker()
    sub = broker.subscribe()
    ctl = Controller(broker)
    obs = ctl.register(ObserverConfig(AdapterKind.SCHEDULER_PLUGIN, campaign_id="c"))
    ctl.start_all()
    for i in range(5):
        obs.emit(obs.make_event(f"t{i}", Status.FINISHED, {"generated": {"i": i}}))
    ctl.stop_all()
    ctl.stop_all()
    assert len(sub.pull_batch(100, 0.1)) == 5
    assert not ctl.running


def test_terminal_events_carry_environment_and_user():
    ctl = Controller(InProcessBroker())
    obs = ctl.register(ObserverConfig(AdapterKind.SCHEDULER_PLUGIN, site="lab"))
    ev = obs.make_event("t", Status.FINISHED, {})
    assert ev.payload["environment"]["site"] == "lab"
    assert ev.payload["user"]
    assert "environment" not in obs.make_event("t", Status.RUNNING, {}).payload
    assert ev.telemetry is None  # telemetry off by default


def test_start_with_broker_down_is_atomic(tmp_path):
    log = tmp_path / "a.log"
    log.touch()
    client = TcpBrokerClient("127.0.0.1", 1, connect_timeout=0.2)
    ctl = Controller(client)
    obs = ctl.register(ObserverConfig(AdapterKind.LOG_FILE, locator=str(log)))
    with pytest.raises(BrokerUnreachable):
        ctl.start_all()
    assert not ctl.running and not obs.armed and obs._thread is None


def test_config_file(tmp_path):
    log = tmp_path / "tasks.log"
    log.touch()
    cfg = tmp_path / "observers.ini"
    cfg.write_text(
        f"""
[controller]
broker = inproc://cfg-test

[observer.microscope]
adapter_kind = log_file
locator = {log}
poll_interval = 0.2
relevance = used.*, generated.dataset
telemetry_enabled = yes
campaign_id = c1
max_capacity = 50
"""
    )
    ctl = Controller.from_config_file(cfg)
    (obs,) = ctl.observers
    c = obs.config
    assert c.adapter_kind is AdapterKind.LOG_FILE and c.poll_interval == 0.2
    assert c.relevance == ["used.*", "generated.dataset"]
    assert c.telemetry_enabled and c.campaign_id == "c1" and c.name == "microscope"
    assert c.buffer.max_capacity == 50


@pytest.mark.parametrize(
    "body, field",
    [
        ("poll_interval = soon", "poll_interval"),
        ("dynamic = maybe", "dynamic"),
        ("min_capacity = 0", "buffer"),
    ],
)
def test_config_errors_name_the_field(body, field):
    parser = configparser.ConfigParser()
    parser.read_string(f"[observer.x]\nadapter_kind = SCHEDULER_PLUGIN\n{body}\n")
    with pytest.raises(BadConfig) as info:
        config_from_section(parser["observer.x"])
    assert info.value.field == field
