import argparse
from pathlib import Path
from typing import List, Optional

from src.edge.config import settings
from src.edge.report import render_report


def register(subparsers) -> None:
    p = subparsers.add_parser("report", help="Render SVG charts from a simulate output directory")
    p.add_argument("--out", default=settings.OUT_DIR, help="Directory holding metrics.csv / clusters.csv")
    p.add_argument("--charts", help="Where to write the SVGs (default: <out>/charts)")
    p.set_defaults(func=run)


def run(args: argparse.Namespace) -> None:
    cmd_report(args.out, args.charts)


def cmd_report(metrics_dir: str | Path, charts_dir: Optional[str | Path] = None) -> List[Path]:
    written = render_report(metrics_dir, charts_dir)
    print(f"[INFO] wrote {len(written)} charts")
    return written
