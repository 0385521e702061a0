"""Overhead benchmark: a two-map sleep workflow with and without observability.

Each repetition runs both arms back to back, alternating which goes first.
The on-arm publishes through a TCP broker to an ingest node (broker +
integrator + store) running in a separate process, so the measured process
carries only the observer side of the cost. Repetitions continue past the
minimum until the bootstrap 95% CI of the median is within ``tolerance`` of
the median for both arms, or ``max_repetitions`` is reached.
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import statistics
import tempfile
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from provmesh.model import Status
from provmesh.observers import AdapterKind, Controller, ObserverConfig
from provmesh.scheduler import MiniScheduler
from provmesh.store import TaskStore

log = logging.getLogger(__name__)

ARMS = ("on", "off")
TERMINAL = [s.value for s in Status if s.terminal]


@dataclass
class Workload:
    total_tasks: int
    task_duration: float  # seconds
    workers: int = 8
    observability: str = "both"  # on | off | both
    repetitions: int = 5
    max_repetitions: int = 10
    tolerance: float = 0.10
    cooldown: float = 0.2

    def __post_init__(self) -> None:
        if self.total_tasks < 0 or self.total_tasks % 2:
            raise ValueError("total_tasks must be even and >= 0 (two equal maps)")
        if self.repetitions < 5:
            raise ValueError("repetitions must be >= 5")
        if self.max_repetitions < self.repetitions:
            raise ValueError("max_repetitions must be >= repetitions")
        if self.observability not in ("on", "off", "both"):
            raise ValueError("observability must be on, off or both")
        if self.workers < 1 or self.task_duration < 0:
            raise ValueError("workers >= 1 and task_duration >= 0 required")

    @property
    def arms(self) -> tuple[str, ...]:
        return ARMS if self.observability == "both" else (self.observability,)


@dataclass
class ArmResult:
    observability: str
    times: list[float] = field(default_factory=list)
    median: float = 0.0
    ci: tuple[float, float] = (0.0, 0.0)
    converged: bool = False
    events_persisted: list[int] = field(default_factory=list)
    records_ok: bool = True


@dataclass
class BenchResult:
    workload: Workload
    arms: dict[str, ArmResult]
    overhead_pct: float | None
    converged: bool
    repetitions: int
    wall_seconds: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "workload": asdict(self.workload),
            "arms": {k: asdict(v) for k, v in self.arms.items()},
            "overhead_pct": self.overhead_pct,
            "converged": self.converged,
            "repetitions": self.repetitions,
            "wall_seconds": self.wall_seconds,
        }


def bootstrap_median_ci(
    samples: Sequence[float], resamples: int = 10_000, level: float = 0.95, seed: int = 0
) -> tuple[float, float]:
    """Percentile bootstrap CI of the median."""
    data = np.asarray(samples, dtype=float)
    if data.size == 0:
        return (0.0, 0.0)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, data.size, size=(resamples, data.size))
    medians = np.median(data[idx], axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(medians, [alpha, 1.0 - alpha])
    return (float(lo), float(hi))


def ci_converged(median: float, ci: tuple[float, float], tolerance: float) -> bool:
    if median == 0.0:
        return ci == (0.0, 0.0)
    return ci[0] >= median * (1 - tolerance) and ci[1] <= median * (1 + tolerance)


def extreme_overhead(on_ci: tuple[float, float], off_ci: tuple[float, float]) -> float:
    """Worst relative slowdown when matching the CI bounds of the two arms, in percent."""
    ratios = [(on - off) / off for on, off in zip(on_ci, off_ci) if off > 0]
    return 100.0 * max(ratios) if ratios else 0.0


def _sleep_task(x: int, duration: float) -> int:
    time.sleep(duration)
    return x + 1


def run_workflow(total_tasks: int, duration: float, workers: int, plugin: Any = None, campaign_id: str = "") -> None:
    """Two maps of ``total_tasks / 2`` sleep tasks with a barrier between them."""
    half = total_tasks // 2
    sched = MiniScheduler(workers, workflow_id=f"bench-{uuid.uuid4().hex[:8]}", campaign_id=campaign_id)
    sched.register("sleep_task", _sleep_task)
    if plugin is not None:
        sched.register_plugin(plugin)
    with sched:
        first = sched.gather([sched.submit("sleep_task", x=i, duration=duration) for i in range(half)])
        sched.gather([sched.submit("sleep_task", x=v, duration=duration) for v in first])


class _RemoteNode:
    """An ingest node in a spawned child process."""

    def __init__(self, store_dir: Path, niceness: int = 19) -> None:
        from provmesh.service.node import run_node_process

        ctx = mp.get_context("spawn")
        self._conn, child = ctx.Pipe()
        self._proc = ctx.Process(target=run_node_process, args=(str(store_dir), child, "127.0.0.1", niceness), daemon=True)
        self._proc.start()
        self.address: str = self._conn.recv()
        self.store_dir = store_dir

    def stop(self) -> dict[str, Any]:
        self._conn.send("stop")
        stats = self._conn.recv() if self._conn.poll(60) else {}
        self._proc.join(30)
        return stats


def _wait_for_records(store_dir: Path, campaign_id: str, expected: int, timeout: float = 60.0) -> int:
    deadline = time.monotonic() + timeout
    with TaskStore(store_dir, readonly=True) as store:
        while True:
            n = store.count(campaign_id, statuses=TERMINAL)
            if n >= expected or time.monotonic() > deadline:
                return n
            time.sleep(0.1)


def _run_arm(arm: str, wl: Workload, node: _RemoteNode | None) -> tuple[float, int]:
    if arm == "off":
        t0 = time.perf_counter()
        run_workflow(wl.total_tasks, wl.task_duration, wl.workers)
        return time.perf_counter() - t0, 0
    assert node is not None
    campaign_id = f"bench-{uuid.uuid4().hex}"
    ctl = Controller(node.address)
    observer = ctl.register(ObserverConfig(AdapterKind.SCHEDULER_PLUGIN, campaign_id=campaign_id))
    t0 = time.perf_counter()
    ctl.start_all()
    run_workflow(wl.total_tasks, wl.task_duration, wl.workers, plugin=observer, campaign_id=campaign_id)
    ctl.stop_all()
    elapsed = time.perf_counter() - t0
    persisted = _wait_for_records(node.store_dir, campaign_id, wl.total_tasks) if wl.total_tasks else 0
    return elapsed, persisted


def _summarize(arm: ArmResult, wl: Workload, seed: int) -> None:
    arm.median = statistics.median(arm.times)
    arm.ci = bootstrap_median_ci(arm.times, seed=seed)
    arm.converged = ci_converged(arm.median, arm.ci, wl.tolerance)


def run_benchmark(workload: Workload, store_dir: str | Path | None = None, seed: int = 0) -> BenchResult:
    """Run paired repetitions of ``workload`` and report medians, CIs and overhead."""
    wl = workload
    started = time.perf_counter()
    arms = {a: ArmResult(a) for a in wl.arms}
    if wl.total_tasks == 0:
        for arm in arms.values():
            arm.times = [0.0] * wl.repetitions
            arm.converged = True
            arm.events_persisted = [0] * wl.repetitions if arm.observability == "on" else []
        overhead = 0.0 if wl.observability == "both" else None
        return BenchResult(wl, arms, overhead, True, wl.repetitions, time.perf_counter() - started)

    tmp = None
    if "on" in arms and store_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="provmesh-bench-")
        store_dir = tmp.name
    node = _RemoteNode(Path(store_dir)) if "on" in arms else None
    reps = 0
    try:
        while True:
            order = wl.arms if reps % 2 == 0 else tuple(reversed(wl.arms))
            for name in order:
                elapsed, persisted = _run_arm(name, wl, node)
                arm = arms[name]
                arm.times.append(elapsed)
                if name == "on":
                    arm.events_persisted.append(persisted)
                    arm.records_ok = arm.records_ok and persisted == wl.total_tasks
                time.sleep(wl.cooldown)
            reps += 1
            if reps < wl.repetitions:
                continue
            for arm in arms.values():
                _summarize(arm, wl, seed)
            if all(a.converged for a in arms.values()) or reps >= wl.max_repetitions:
                break
    finally:
        if node is not None:
            node.stop()
        if tmp is not None:
            tmp.cleanup()

    converged = all(a.converged for a in arms.values())
    overhead = None
    if converged and "on" in arms and "off" in arms:
        overhead = extreme_overhead(arms["on"].ci, arms["off"].ci)
    if not converged:
        log.warning("no CI convergence after %d repetitions", reps)
    return BenchResult(wl, arms, overhead, converged, reps, time.perf_counter() - started)


def sweep(workloads: Iterable[Workload], cooldown: float = 1.0) -> list[BenchResult]:
    results = []
    for i, wl in enumerate(workloads):
        if i:
            time.sleep(cooldown)
        results.append(run_benchmark(wl))
    return results


def results_table(results: Sequence[BenchResult]) -> list[dict[str, Any]]:
    """One row per (scenario, arm), the layout of a with/without bar chart."""
    rows = []
    for r in results:
        for name, arm in r.arms.items():
            rows.append(
                {
                    "tasks": r.workload.total_tasks,
                    "task_duration": r.workload.task_duration,
                    "workers": r.workload.workers,
                    "observability": name,
                    "median_s": arm.median,
                    "ci_low_s": arm.ci[0],
                    "ci_high_s": arm.ci[1],
                    "converged": arm.converged,
                    "repetitions": r.repetitions,
                    "overhead_pct": r.overhead_pct,
                    "non_convergence": not arm.converged,
                }
            )
    return rows


def write_results(results: Sequence[BenchResult], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps({"table": results_table(results), "runs": [r.to_dict() for r in results]}, indent=2)
    )


@dataclass
class FreshnessResult:
    rate: float
    duration: float
    emitted: int
    committed: int
    p50: float
    p95: float
    max: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def measure_freshness(
    rate: float = 1000.0,
    duration: float = 60.0,
    policy: Any = None,
    store_dir: str | Path | None = None,
) -> FreshnessResult:
    """Emit ``rate`` events/s for ``duration`` seconds and time each one until it is queryable.

    Latency runs from the event's ``observed_at`` (stamped when it is emitted)
    to the commit of the store transaction that made it visible to queries.
    Events come three per task (submitted, running, finished).
    """
    from provmesh.broker import InProcessBroker
    from provmesh.model import TaskStateEvent
    from provmesh.observers import BufferPolicy, EventBuffer
    from provmesh.store.integrator import Integrator
    from provmesh.timeutil import now_ns

    latencies: list[int] = []

    def on_commit(batch: list[Any], committed_ns: int) -> None:
        latencies.extend(committed_ns - e.observed_at for e in batch)

    tmp = None
    if store_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="provmesh-fresh-")
        store_dir = tmp.name
    store = TaskStore(store_dir)
    broker = InProcessBroker()
    integrator = Integrator.from_broker(store, broker, on_commit=on_commit).start()
    sink = EventBuffer(broker, policy or BufferPolicy())
    sink.start()
    statuses = (Status.SUBMITTED, Status.RUNNING, Status.FINISHED)
    emitted = 0
    tick = 0.01
    start = time.perf_counter()
    try:
        task = 0
        total = round(rate * duration)
        while emitted < total:
            now = time.perf_counter() - start
            due = min(rate * now, total)
            while emitted < due:
                status = statuses[emitted % 3]
                if status is Status.SUBMITTED:
                    task += 1
                payload: dict[str, Any] = {"used": {"i": task}}
                if status is Status.FINISHED:
                    payload["generated"] = {"o": task + 1}
                sink.emit(
                    TaskStateEvent(
                        task_id=f"fresh-{task}",
                        new_status=status,
                        observed_at=now_ns(),
                        workflow_id="freshness",
                        campaign_id="freshness",
                        payload=payload,
                        adapter_kind="SCHEDULER_PLUGIN",
                        sequence_no=emitted + 1,
                    )
                )
                emitted += 1
            time.sleep(max(0.0, tick - (time.perf_counter() - start - now)))
    finally:
        sink.stop()
        integrator.stop()
        store.close()
        if tmp is not None:
            tmp.cleanup()
    lat = np.asarray(latencies, dtype=float) / 1e9
    if lat.size == 0:
        return FreshnessResult(rate, duration, emitted, 0, float("nan"), float("nan"), float("nan"))
    p50, p95 = np.percentile(lat, [50, 95])
    return FreshnessResult(rate, duration, emitted, int(lat.size), float(p50), float(p95), float(lat.max()))
