import argparse
import json
import logging
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import ValidationError

from src.edge import store
from src.edge.config import settings
from src.edge.errors import ConfigError, DataError, WindowMismatchError
from src.edge.model import (
    TraceWindow,
    build_snapshot,
    load_topology,
    load_trace,
    mean_demands,
    synthesize_groups,
    synthesize_topology,
    synthesize_trace,
    windows_from_records,
)
from src.models.schemas import STRATEGIES, ExperimentConfig, Topology

log = logging.getLogger(__name__)


def add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="Experiment config JSON (fields override env defaults)")
    p.add_argument("--seed", type=int, help="Seed for every random draw")
    p.add_argument("--alpha", type=float, action="append", help="Replication cost factor; repeatable")
    p.add_argument("--strategy", action="append", choices=STRATEGIES, help="Strategy to run; repeatable")
    p.add_argument("--fluctuation", type=float, action="append", help="Viewer fluctuation magnitude; repeatable")
    p.add_argument("--out", help="Output directory")


def format_validation_error(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        where = ".".join(str(x) for x in err.get("loc", ())) or "config"
        parts.append(f"{where}: {err.get('msg')}")
    return "; ".join(parts)


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """settings defaults < --config file < flags."""
    data: dict = {"seed": settings.DEFAULT_SEED}
    if getattr(args, "config", None):
        raw = Path(args.config).expanduser()
        if not raw.exists():
            raise ConfigError(f"config file not found: {raw}")
        try:
            from_file = json.loads(raw.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{raw}: line {e.lineno}, column {e.colno}: {e.msg}") from e
        if not isinstance(from_file, dict):
            raise ConfigError(f"{raw}: expected a JSON object")
        data.update(from_file)

    flags = {
        "seed": getattr(args, "seed", None),
        "alphas": getattr(args, "alpha", None),
        "strategies": getattr(args, "strategy", None),
        "fluctuations": getattr(args, "fluctuation", None),
        "out_dir": getattr(args, "out", None),
    }
    data.update({k: v for k, v in flags.items() if v is not None})

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from e


def resolve_trace(config: ExperimentConfig) -> List[TraceWindow]:
    src = config.trace
    if src.path:
        windows = load_trace(src.path, config.window_seconds)
    else:
        params = src.synth.model_copy(update={"window_seconds": config.window_seconds})
        windows = windows_from_records(synthesize_trace(params, config.seed), config.window_seconds)
    if not windows:
        raise DataError("trace has no windows")
    return windows[: config.max_windows] if config.max_windows else windows


def resolve_topology(config: ExperimentConfig, trace: Optional[List[TraceWindow]] = None) -> Topology:
    """
    Load the topology file, or synthesize one whose groups carry the trace's
    mean demand and whose servers are sized to match it.
    """
    src = config.topology
    if src.path:
        topo = load_topology(src.path)
        if topo.window_seconds != config.window_seconds:
            raise WindowMismatchError(f"{src.path}: topology window {topo.window_seconds}s, "
                                      f"config window {config.window_seconds}s")
        return topo

    params = src.synth.model_copy(update={"window_seconds": config.window_seconds})
    demands = None
    if trace is not None:
        groups = synthesize_groups(params, config.seed)
        demands = mean_demands([build_snapshot(w, groups, config.tier_mix) for w in trace])
    return synthesize_topology(params, config.seed, demands)


def resolve_inputs(config: ExperimentConfig) -> Tuple[Topology, List[TraceWindow]]:
    trace = resolve_trace(config)
    return resolve_topology(config, trace), trace


def out_dir(config: ExperimentConfig) -> Path:
    p = Path(config.out_dir).expanduser()
    p.mkdir(parents=True, exist_ok=True)
    return p


def save_config(config: ExperimentConfig, directory: Path) -> Path:
    return store.write_model(directory / "config.json", config)
