"""
Synthetic edge topology generator
---------------------------------
Builds user groups on a state/county/city/ISP grid, places edge clusters at
the busiest (city, ISP) sites, deploys servers until total bandwidth reaches
the target demand, and derives both sides' preference lists from the six
geographic preference levels.

If --trace is given, each group's demand is its mean demand over the trace and
the bandwidth target defaults to the total of those demands.

Usage:
  python3 scripts/make_topology.py --out topo.json --groups 60 --clusters 30 --trace traces/day.jsonl
  python3 scripts/make_topology.py --out topo.json --target-kbps 5000000
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.edge.config import settings  # noqa: E402
from src.edge.errors import EdgeSimError  # noqa: E402
from src.edge.model import (  # noqa: E402
    build_snapshot,
    load_trace,
    mean_demands,
    save_topology,
    synthesize_groups,
    synthesize_topology,
)
from src.models.schemas import TopologyParams  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=str, required=True, help="Output topology JSON")
    ap.add_argument("--groups", type=int, default=60)
    ap.add_argument("--clusters", type=int, default=30)
    ap.add_argument("--window-seconds", type=int, default=settings.WINDOW_SECONDS)
    ap.add_argument("--trace", type=str, help="JSONL trace to take group demands from")
    ap.add_argument("--target-kbps", type=int, help="Total server bandwidth to deploy")
    ap.add_argument("--max-preferences", type=int, help="Truncate preference lists")
    ap.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    args = ap.parse_args()

    if not args.trace and not args.target_kbps:
        print("[ERR] Give --trace or --target-kbps so servers can be sized")
        sys.exit(1)

    try:
        params = TopologyParams(
            n_groups=args.groups,
            n_clusters=args.clusters,
            window_seconds=args.window_seconds,
            target_demand_kbps=args.target_kbps,
            max_preferences=args.max_preferences,
        )
        demands = None
        if args.trace:
            windows = load_trace(args.trace, args.window_seconds)
            groups = synthesize_groups(params, args.seed)
            demands = mean_demands([build_snapshot(w, groups) for w in windows])
        topo = synthesize_topology(params, args.seed, demands)
        save_topology(args.out, topo)
    except (EdgeSimError, ValueError) as e:
        print(f"[ERR] {e}")
        sys.exit(1)

    n_servers = sum(len(c.servers) for c in topo.clusters)
    print(f"[INFO] groups={len(topo.groups)} clusters={len(topo.clusters)} servers={n_servers}")
    print(f"[INFO] Wrote {args.out}")


if __name__ == "__main__":
    main()
