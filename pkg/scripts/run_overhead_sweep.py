"""Paired on/off overhead sweep at desk scale.

    python scripts/run_overhead_sweep.py --out results/overhead.json
    python scripts/run_overhead_sweep.py --tasks 1000 10000 --duration-ms 1 10 --reps 5
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
from pathlib import Path

from provmesh.bench import Workload, results_table, sweep, write_results


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--tasks", type=int, nargs="+", default=[10_000, 1_000])
    ap.add_argument("--duration-ms", type=float, nargs="+", default=[10.0, 300.0])
    ap.add_argument("--workers", type=int, default=8)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--max-reps", type=int, default=8)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)

    workloads = [
        Workload(n, ms / 1000.0, args.workers, repetitions=args.reps, max_repetitions=args.max_reps)
        for n, ms in itertools.product(args.tasks, args.duration_ms)
    ]
    results = sweep(workloads)
    for row in results_table(results):
        print(json.dumps(row))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_results(results, args.out)


if __name__ == "__main__":
    main()
