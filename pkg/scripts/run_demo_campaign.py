"""Run the three-workflow synthetic campaign and print its lineage report.

    python scripts/run_demo_campaign.py --dir /tmp/demo
"""

from __future__ import annotations

import argparse
import json
import tempfile
from pathlib import Path

from provmesh.demo import DemoConfig, check_report, run_demo
from provmesh.service.analysis import correlation_matrix
from provmesh.store import TaskStore


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--dir", type=Path)
    ap.add_argument("--models", type=int, default=10)
    ap.add_argument("-k", type=int, default=3)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    base = args.dir or Path(tempfile.mkdtemp(prefix="provmesh-demo-"))

    result = run_demo(DemoConfig(base, models=args.models, k=args.k, seed=args.seed))
    problems = check_report(result)
    for entry in result.report.entries:
        chain = {wf: [t["task_id"] for t in tasks] for wf, tasks in entry["upstream"].items()}
        print(f"{entry['task_id']}  mse={entry['metric_value']}  upstream={chain}")
    with TaskStore(result.store_dir, readonly=True) as store:
        matrix = correlation_matrix(
            store,
            result.config.campaign_id,
            ["used.lr", "used.layers", "used.batch_norm", "used.dropout"],
            ["generated.loss", "generated.accuracy", "elapsed"],
        )
    print(json.dumps(matrix.to_dict(), indent=1))
    print("store:", result.store_dir)
    print("ground truth:", "OK" if not problems else problems)


if __name__ == "__main__":
    main()
