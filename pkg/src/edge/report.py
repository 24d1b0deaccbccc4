# src/edge/report.py
"""
SVG charts from a simulate run's CSVs: offloading vs alpha, offloading over
the day, per-cluster heatmap, per-tier satisfaction and fluctuation.
"""
import logging
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from src.edge.errors import DataError  # noqa: E402
from src.models.schemas import STRATEGIES  # noqa: E402

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
CLUSTERS_FILE = "clusters.csv"

# stable ids and no timestamp, so reruns write identical files
plt.rcParams["svg.hashsalt"] = "edge-replication"
_SVG_META = {"Date": None, "Creator": None}

_LABELS = {"plver": "PLVER", "abr": "ABR", "cort": "CORT"}


def load_frame(directory: str | Path, name: str) -> pd.DataFrame:
    p = Path(directory) / name
    if not p.exists():
        raise DataError(f"{p} not found; run `simulate` first")
    df = pd.read_csv(p)
    if df.empty:
        raise DataError(f"{p} has no rows")
    return df


def _present_strategies(df: pd.DataFrame, chart: str) -> List[str]:
    seen = set(df["strategy"].unique())
    out = []
    for s in STRATEGIES:
        if s in seen:
            out.append(s)
        else:
            log.warning(f"[report] {chart}: no rows for strategy '{s}'; series omitted")
    return out


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    validate_svg(path)
    return path


def _baseline(df: pd.DataFrame) -> pd.DataFrame:
    # unperturbed runs only, when the grid includes them
    f0 = df["fluctuation"].min()
    return df[df["fluctuation"] == f0]


def offloading_by_alpha(df: pd.DataFrame, path: Path) -> Path:
    base = _baseline(df)
    strategies = _present_strategies(base, "offloading_vs_alpha")
    table = base.groupby(["alpha", "strategy"])["offloading_ratio"].mean().unstack("strategy")
    alphas = list(table.index)
    width = 0.8 / max(1, len(strategies))
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, s in enumerate(strategies):
        xs = [i + (k - (len(strategies) - 1) / 2) * width for i in range(len(alphas))]
        ax.bar(xs, table[s].values * 100, width=width, label=_LABELS.get(s, s))
    ax.set_xticks(range(len(alphas)))
    ax.set_xticklabels([f"{a:.0%}" for a in alphas])
    ax.set_xlabel("replication cost factor α")
    ax.set_ylabel("offloading ratio (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    return _save(fig, path)


def offloading_by_hour(df: pd.DataFrame, path: Path, alpha: Optional[float] = None) -> Path:
    base = _baseline(df)
    a = base["alpha"].max() if alpha is None else alpha
    base = base[base["alpha"] == a].copy()
    base["hour"] = (base["window_start"] // 3600).astype(int)
    strategies = _present_strategies(base, "offloading_by_hour")
    fig, ax = plt.subplots(figsize=(7, 4))
    for s in strategies:
        series = base[base["strategy"] == s].groupby("hour")["offloading_ratio"].mean()
        ax.plot(series.index, series.values * 100, marker="o", label=_LABELS.get(s, s))
    ax.set_xlabel("hour")
    ax.set_ylabel("offloading ratio (%)")
    ax.set_title(f"α = {a:.0%}")
    ax.set_ylim(0, 100)
    ax.legend()
    return _save(fig, path)


def cluster_heatmap(clusters: pd.DataFrame, path: Path, alpha: Optional[float] = None) -> Path:
    base = _baseline(clusters)
    a = base["alpha"].max() if alpha is None else alpha
    base = base[base["alpha"] == a]
    strategies = _present_strategies(base, "cluster_heatmap")
    grid = (base.groupby(["cluster_id", "strategy"])["offloading_ratio"].mean()
            .unstack("strategy").reindex(columns=strategies))
    fig, ax = plt.subplots(figsize=(2 + 1.2 * len(strategies), max(3, 0.22 * len(grid))))
    im = ax.imshow(grid.values * 100, aspect="auto", cmap="viridis", vmin=0, vmax=100)
    ax.set_xticks(range(len(strategies)))
    ax.set_xticklabels([_LABELS.get(s, s) for s in strategies])
    ax.set_yticks(range(len(grid)))
    ax.set_yticklabels(list(grid.index), fontsize=6)
    fig.colorbar(im, ax=ax, label="offloading ratio (%)")
    return _save(fig, path)


def satisfaction_by_tier(df: pd.DataFrame, path: Path, alpha: Optional[float] = None) -> Path:
    base = _baseline(df)
    a = base["alpha"].max() if alpha is None else alpha
    base = base[base["alpha"] == a]
    tiers = [c for c in df.columns if c.startswith("sat_")]
    strategies = _present_strategies(base, "satisfaction_by_tier")
    width = 0.8 / max(1, len(strategies))
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, s in enumerate(strategies):
        means = base[base["strategy"] == s][tiers].mean()
        xs = [i + (k - (len(strategies) - 1) / 2) * width for i in range(len(tiers))]
        ax.bar(xs, means.fillna(0).values * 100, width=width, label=_LABELS.get(s, s))
    ax.set_xticks(range(len(tiers)))
    ax.set_xticklabels([f"{c[4:]} Kbps" for c in tiers])
    ax.set_ylabel("satisfaction ratio (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    return _save(fig, path)


def offloading_by_fluctuation(df: pd.DataFrame, path: Path) -> Path:
    strategies = _present_strategies(df, "offloading_vs_fluctuation")
    a = df["alpha"].max()
    base = df[df["alpha"] == a]
    fig, ax = plt.subplots(figsize=(6, 4))
    for s in strategies:
        series = base[base["strategy"] == s].groupby("fluctuation")["offloading_ratio"].mean()
        ax.plot(series.index * 100, series.values * 100, marker="s", label=_LABELS.get(s, s))
    ax.set_xlabel("viewer fluctuation (%)")
    ax.set_ylabel("offloading ratio (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    return _save(fig, path)


def render_report(metrics_dir: str | Path, out_dir: Optional[str | Path] = None) -> List[Path]:
    src = Path(metrics_dir)
    dst = Path(out_dir) if out_dir else src / "charts"
    df = load_frame(src, METRICS_FILE)
    written = [
        offloading_by_alpha(df, dst / "offloading_vs_alpha.svg"),
        offloading_by_hour(df, dst / "offloading_by_hour.svg"),
        satisfaction_by_tier(df, dst / "satisfaction_by_tier.svg"),
    ]
    if (src / CLUSTERS_FILE).exists():
        written.append(cluster_heatmap(load_frame(src, CLUSTERS_FILE), dst / "cluster_heatmap.svg"))
    else:
        log.warning(f"[report] {src / CLUSTERS_FILE} missing; heatmap skipped")
    if df["fluctuation"].nunique() > 1:
        written.append(offloading_by_fluctuation(df, dst / "offloading_vs_fluctuation.svg"))
    for p in written:
        log.info(f"[report] wrote {p}")
    return written


def validate_svg(path: str | Path) -> None:
    """Well-formed XML with an <svg> root carrying width, height and viewBox."""
    try:
        root = ET.parse(str(path)).getroot()
    except ET.ParseError as e:
        raise DataError(f"{path}: not well-formed SVG ({e})") from e
    if not root.tag.endswith("svg"):
        raise DataError(f"{path}: root element is <{root.tag}>, expected <svg>")
    missing = [a for a in ("width", "height", "viewBox") if a not in root.attrib]
    if missing:
        raise DataError(f"{path}: <svg> lacks {', '.join(missing)}")
