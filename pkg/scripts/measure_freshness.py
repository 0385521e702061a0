"""Emission-to-queryable latency at a sustained event rate.

    python scripts/measure_freshness.py --rate 1000 --duration 60
"""

from __future__ import annotations

import argparse
import json

from provmesh.bench import measure_freshness
from provmesh.observers import BufferPolicy


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rate", type=float, default=1000.0)
    ap.add_argument("--duration", type=float, default=60.0)
    ap.add_argument("--flush-interval", type=float, default=BufferPolicy().flush_interval)
    ap.add_argument("--static", action="store_true", help="fixed capacity instead of rate-adaptive")
    args = ap.parse_args()
    policy = BufferPolicy(flush_interval=args.flush_interval, dynamic=not args.static)
    print(json.dumps(measure_freshness(args.rate, args.duration, policy).to_dict(), indent=2))


if __name__ == "__main__":
    main()
