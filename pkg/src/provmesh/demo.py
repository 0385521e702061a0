"""A synthetic three-workflow campaign, ingested end to end.

wf1 prepares datasets and reports through a task log file, wf2 trains models
on the MiniScheduler, and wf3 evaluates each model and writes run records.
Datasets flow from wf1 to wf2 and models from wf2 to wf3 as ``file://``
references, so the integrated store can link the three workflows.

All numbers are drawn from a seeded generator and returned as ground truth:
which evaluation runs have the smallest ``mse``, and which training and
preparation tasks lie upstream of each.
"""

from __future__ import annotations

import logging
import random
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from provmesh.adapters.logfile import TaskLogFormatter
from provmesh.adapters.recordstore import RunRecord, write_run
from provmesh.broker import InProcessBroker
from provmesh.model import Status
from provmesh.observers import AdapterKind, Controller, ObserverConfig
from provmesh.scheduler import MiniScheduler
from provmesh.service.analysis import LineageReport, lineage_report
from provmesh.store import CampaignConfig, TaskStore
from provmesh.store.integrator import Integrator
from provmesh.timeutil import format_ns, now_ns

log = logging.getLogger(__name__)

WF1, WF2, WF3 = "wf1-prepare", "wf2-train", "wf3-evaluate"


@dataclass
class DemoConfig:
    base_dir: Path
    campaign_id: str = "demo-campaign"
    datasets: int = 4
    models: int = 10
    k: int = 3
    seed: int = 7
    workers: int = 4
    poll_interval: float = 0.05


@dataclass
class DemoResult:
    config: DemoConfig
    store_dir: Path
    report: LineageReport
    # run_id -> mse, and the upstream task ids of every run
    mse: dict[str, float] = field(default_factory=dict)
    train_task_of_run: dict[str, str] = field(default_factory=dict)
    prepare_task_of_run: dict[str, str] = field(default_factory=dict)

    def expected_top(self) -> list[str]:
        ranked = sorted(self.mse.items(), key=lambda kv: (kv[1], kv[0]))
        return [run_id for run_id, _ in ranked[: self.config.k]]


def _train(dataset: str, lr: float, layers: int, batch_norm: bool, dropout: float, model_dir: str, index: int) -> dict[str, Any]:
    """Deterministic stand-in for training; metrics carry planted dependencies."""
    time.sleep(0.002)
    loss = 0.5 + 4.0 * lr - 0.03 * layers - (0.1 if batch_norm else 0.0) + 0.2 * dropout
    return {
        "model": f"file://{model_dir}/model-{index:03d}.pt",
        "loss": round(loss, 6),
        "accuracy": round(1.0 - loss / 2.0, 6),
    }


def _log_task(logger: logging.Logger, task_id: str, kind: Status, payload: dict[str, Any]) -> None:
    logger.info("task", extra={"task": task_id, "wf": WF1, "kind": kind, "payload": payload})


def run_demo(config: DemoConfig) -> DemoResult:
    base = Path(config.base_dir)
    store_dir = base / "store"
    log_path = base / "wf1" / "prepare.log"
    runs_dir = base / "wf3" / "runs"
    data_dir, model_dir, plot_dir = base / "datasets", base / "models", base / "plots"
    for d in (log_path.parent, runs_dir, data_dir, model_dir, plot_dir):
        d.mkdir(parents=True, exist_ok=True)
    log_path.touch()
    rng = random.Random(config.seed)
    cid = config.campaign_id

    store = TaskStore(store_dir)
    store.put_campaign(CampaignConfig(cid, [WF1, WF2, WF3], entity_keys=["dataset", "model"]))
    broker = InProcessBroker()
    integrator = Integrator.from_broker(store, broker).start()

    ctl = Controller(broker)
    common = dict(campaign_id=cid, poll_interval=config.poll_interval)
    ctl.register(ObserverConfig(AdapterKind.LOG_FILE, locator=str(log_path), workflow_id=WF1, activity_id="prepare", **common))
    sched_obs = ctl.register(ObserverConfig(AdapterKind.SCHEDULER_PLUGIN, workflow_id=WF2, **common))
    ctl.register(ObserverConfig(AdapterKind.RECORD_STORE, locator=str(runs_dir), workflow_id=WF3, activity_id="evaluate", **common))
    ctl.start_all()

    result = DemoResult(config, store_dir, LineageReport(cid, config.k, "generated.mse", True))
    try:
        # wf1: dataset preparation, visible only through its log file
        logger = logging.getLogger(f"provmesh.demo.wf1.{uuid.uuid4().hex[:8]}")
        logger.propagate = False
        logger.setLevel(logging.INFO)
        handler = logging.FileHandler(log_path)
        handler.setFormatter(TaskLogFormatter())
        logger.addHandler(handler)
        prepare_ids, dataset_uris = [], []
        for i in range(config.datasets):
            tid = f"prepare-{i:02d}"
            used = {"images": f"file:///instrument/raw/batch-{i:02d}", "threshold": round(rng.uniform(0.2, 0.8), 3)}
            _log_task(logger, tid, Status.RUNNING, {"used": used, "activity_id": "prepare"})
            uri = f"file://{data_dir}/dataset-{i:02d}"
            _log_task(logger, tid, Status.FINISHED, {"used": used, "generated": {"dataset": uri, "images": 100 + i}})
            prepare_ids.append(tid)
            dataset_uris.append(uri)
        handler.close()
        logger.removeHandler(handler)

        # wf2: model training on the scheduler
        sched = MiniScheduler(config.workers, workflow_id=WF2, campaign_id=cid)
        sched.register("train", _train)
        sched.register_plugin(sched_obs)
        with sched:
            futures = []
            for j in range(config.models):
                futures.append(
                    sched.submit(
                        "train",
                        dataset=dataset_uris[j % config.datasets],
                        lr=round(rng.uniform(0.001, 0.1), 5),
                        layers=rng.randint(2, 8),
                        batch_norm=rng.random() < 0.5,
                        dropout=round(rng.uniform(0.0, 0.5), 3),
                        model_dir=str(model_dir),
                        index=j,
                    )
                )
            outputs = sched.gather(futures)

        # wf3: evaluation runs written as run-record files
        mse_values = rng.sample(range(100, 1000), config.models)
        for j, (fut, out) in enumerate(zip(futures, outputs)):
            run_id = f"eval-{j:03d}"
            tags = {"workflow_id": WF3, "campaign_id": cid, "activity_id": "evaluate"}
            start = format_ns(now_ns())
            write_run(runs_dir, RunRecord(run_id, params={"model": out["model"]}, status="RUNNING", start_time=start, tags=tags))
            mse = mse_values[j] / 1000.0
            write_run(
                runs_dir,
                RunRecord(
                    run_id,
                    params={"model": out["model"]},
                    metrics={"mse": mse},
                    artifacts={"plot": f"file://{plot_dir}/eval-{j:03d}.png"},
                    status="FINISHED",
                    start_time=start,
                    end_time=format_ns(now_ns()),
                    tags=tags,
                ),
            )
            result.mse[run_id] = mse
            result.train_task_of_run[run_id] = fut.task_id
            result.prepare_task_of_run[run_id] = prepare_ids[j % config.datasets]
    finally:
        ctl.stop_all()
        integrator.stop()

    result.report = lineage_report(store, cid, config.k, "generated.mse", minimize=True)
    store.close()
    return result


def check_report(result: DemoResult) -> list[str]:
    """Differences between the report and the seeded ground truth; empty when they agree."""
    problems = []
    got = [e["task_id"] for e in result.report.entries]
    want = result.expected_top()
    if got != want:
        problems.append(f"top-{result.config.k} runs {got} != expected {want}")
    for entry in result.report.entries:
        rid = entry["task_id"]
        if rid not in result.mse:
            continue
        if entry["metric_value"] != result.mse[rid]:
            problems.append(f"{rid}: metric {entry['metric_value']} != {result.mse[rid]}")
        up = entry["upstream"]
        train = [t["task_id"] for t in up.get(WF2, [])]
        prep = [t["task_id"] for t in up.get(WF1, [])]
        if train != [result.train_task_of_run[rid]]:
            problems.append(f"{rid}: wf2 chain {train} != [{result.train_task_of_run[rid]}]")
        if prep != [result.prepare_task_of_run[rid]]:
            problems.append(f"{rid}: wf1 chain {prep} != [{result.prepare_task_of_run[rid]}]")
        extra = set(up) - {WF1, WF2}
        if extra:
            problems.append(f"{rid}: unexpected upstream workflows {sorted(extra)}")
    return problems
