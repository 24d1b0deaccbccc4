"""
Synthetic live-stream trace generator
-------------------------------------
Writes a JSONL trace, one record per online channel per window:
  {"channel_id": "ch007", "t": 1500, "bitrate_kbps": 2500, "viewers": 312}

Channel popularity is Zipf(s) over a shuffled rank; broadcast bitrates are
drawn from the ladder with a high-bitrate skew; total viewers follow a daily
curve with lognormal per-window noise. Also writes a channels.csv manifest.

Usage:
  python3 scripts/make_trace.py --out traces/day.jsonl --channels 40 --windows 288 --seed 7
  python3 scripts/make_trace.py --out traces/short.jsonl --windows 12 --sessions random
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.edge import store  # noqa: E402
from src.edge.config import settings  # noqa: E402
from src.edge.errors import EdgeSimError  # noqa: E402
from src.edge.model import channels_from_trace, synthesize_trace, windows_from_records, write_trace  # noqa: E402
from src.models.schemas import TraceParams  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=str, required=True, help="Output JSONL path")
    ap.add_argument("--channels", type=int, default=40)
    ap.add_argument("--windows", type=int, default=12, help="Number of windows (288 = one day at 300 s)")
    ap.add_argument("--window-seconds", type=int, default=settings.WINDOW_SECONDS)
    ap.add_argument("--zipf", type=float, default=settings.ZIPF_EXPONENT)
    ap.add_argument("--peak-viewers", type=int, default=6000)
    ap.add_argument("--sessions", choices=["always", "random"], default="always")
    ap.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    args = ap.parse_args()

    try:
        params = TraceParams(
            n_channels=args.channels,
            n_windows=args.windows,
            window_seconds=args.window_seconds,
            zipf_exponent=args.zipf,
            peak_viewers=args.peak_viewers,
            always_on=args.sessions == "always",
        )
        records = synthesize_trace(params, args.seed)
        n = write_trace(args.out, records)
        channels = channels_from_trace(windows_from_records(records, args.window_seconds))
    except (EdgeSimError, ValueError) as e:
        print(f"[ERR] {e}")
        sys.exit(1)

    manifest = Path(args.out).with_name("channels.csv")
    store.write_csv(manifest, ["channel_id", "broadcast_bitrate", "sessions"],
                    ([c.id, c.broadcast_bitrate, ";".join(f"{a}-{b}" for a, b in c.sessions)] for c in channels))
    print(f"[INFO] Wrote {n} records for {len(channels)} channels -> {args.out}")
    print(f"[INFO] Manifest: {manifest}")


if __name__ == "__main__":
    main()
