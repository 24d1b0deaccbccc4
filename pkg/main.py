"""
edge-replication: stable allocation and proactive replication for live
streams on capacity-limited edge clusters.

  python main.py allocate --config experiment.json
  python main.py simulate --seed 7 --alpha 0.6 --strategy plver --strategy cort
  python main.py report --out out
"""
import argparse
import logging
import sys
from typing import List, Optional

from src.commands import allocate, report, simulate
from src.edge.config import settings
from src.edge.errors import EdgeSimError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edge-replication",
        description="Trace-driven simulator for live-stream replication on edge clusters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    # Commands
    allocate.register(sub)
    simulate.register(sub)
    report.register(sub)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL.upper(), format="[%(levelname)s] %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except EdgeSimError as e:
        print(f"[ERR] {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
