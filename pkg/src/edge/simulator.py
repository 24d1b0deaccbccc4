# src/edge/simulator.py
"""
Windowed replay: schedule each window from observed viewership, dispatch the
window's requests against the schedule, and score the result.
"""
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.edge.allocation import check_feasible, isoa_allocate
from src.edge.config import settings
from src.edge.errors import DataError, InvariantViolation, UnknownStrategyError, WindowMismatchError
from src.edge.model import (
    StreamKey,
    TimeWindow,
    TraceWindow,
    ViewershipSnapshot,
    apply_fluctuation,
    build_snapshot,
    mean_demands,
    segment_size,
    with_demand,
)
from src.edge.replication import (
    ReplicationSchedule,
    abr_schedule,
    check_schedule,
    demand_items,
    plver_schedule,
    usable_cache,
)
from src.models.schemas import STRATEGIES, Allocation, EdgeCluster, Topology, WindowMetrics

log = logging.getLogger(__name__)

DemandKey = Tuple[str, StreamKey]
WindowHook = Callable[[TimeWindow, Mapping[str, ReplicationSchedule]], None]

# rng stream ids, combined with (seed, window index)
_RNG_FLUCTUATION = 1
_RNG_CORT_ORDER = 2

_SCHEDULERS = {
    "plver": plver_schedule,
    "abr": abr_schedule,
}


@dataclass
class DispatchOutcome:
    window: TimeWindow
    demanded: Dict[DemandKey, int] = field(default_factory=dict)
    edge: Dict[DemandKey, int] = field(default_factory=dict)
    origin: Dict[DemandKey, int] = field(default_factory=dict)
    edge_kb: Dict[DemandKey, int] = field(default_factory=dict)
    origin_kb: Dict[DemandKey, int] = field(default_factory=dict)
    servers: Dict[DemandKey, List[str]] = field(default_factory=dict)
    consumed: Dict[str, int] = field(default_factory=dict)
    cached_kb: Dict[str, int] = field(default_factory=dict)
    cluster_of: Dict[str, Optional[str]] = field(default_factory=dict)

    def record(self, key: DemandKey, *, edge_units: int = 0, origin_units: int = 0,
               edge_kb: int = 0, origin_kb: int = 0, server: Optional[str] = None) -> None:
        self.edge[key] = self.edge.get(key, 0) + edge_units
        self.origin[key] = self.origin.get(key, 0) + origin_units
        self.edge_kb[key] = self.edge_kb.get(key, 0) + edge_kb
        self.origin_kb[key] = self.origin_kb.get(key, 0) + origin_kb
        if server is not None and server not in self.servers.setdefault(key, []):
            self.servers[key].append(server)

    @property
    def total_edge_kb(self) -> int:
        return sum(self.edge_kb.values())

    @property
    def total_origin_kb(self) -> int:
        return sum(self.origin_kb.values())


# ---------------------- dispatch ----------------------

def _cluster_demand(snapshot: ViewershipSnapshot, allocation: Allocation) -> Dict[Optional[str], Dict[DemandKey, int]]:
    out: Dict[Optional[str], Dict[DemandKey, int]] = defaultdict(dict)
    for key, n in sorted(snapshot.counts.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        if n > 0:
            out[allocation.cluster_of(key[0])][key] = n
    return out


def _dispatch_scheduled(cluster: EdgeCluster, demand: Dict[DemandKey, int], sched: ReplicationSchedule,
                        outcome: DispatchOutcome) -> None:
    residual = {s.id: s.bandwidth for s in cluster.servers}
    left = dict(demand)
    T = outcome.window.length

    # honour the schedule's assignment first, then any caching server with room
    for (srv, g, s), planned in sorted(sched.assignments.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        key = (g, s)
        n = min(left.get(key, 0), planned, residual[srv] // s.bitrate)
        if n:
            residual[srv] -= n * s.bitrate
            left[key] -= n
            outcome.record(key, edge_units=n, edge_kb=n * s.bitrate * T, server=srv)

    for key, n in left.items():
        s = key[1]
        for srv in sorted(sched.cached):
            if n == 0:
                break
            if s in sched.cached[srv]:
                take = min(n, residual[srv] // s.bitrate)
                if take:
                    residual[srv] -= take * s.bitrate
                    n -= take
                    outcome.record(key, edge_units=take, edge_kb=take * s.bitrate * T, server=srv)
        if n:
            outcome.record(key, origin_units=n, origin_kb=n * s.bitrate * T)

    for s in cluster.servers:
        outcome.consumed[s.id] = s.bandwidth - residual[s.id]
        outcome.cached_kb[s.id] = sum(segment_size(x, T) for x in sched.cached.get(s.id, ()))


def _dispatch_reactive(cluster: EdgeCluster, demand: Dict[DemandKey, int], alpha: float,
                       rng: np.random.Generator, outcome: DispatchOutcome,
                       segment_seconds: int, segment_misses: bool) -> None:
    """
    Caching on request: nothing is pre-fetched. A miss installs the stream on
    the server with the most spare bandwidth if its usable cache can hold it.
    """
    T = outcome.window.length
    servers = sorted(cluster.servers, key=lambda s: s.id)
    residual = {s.id: s.bandwidth for s in servers}
    room = {s.id: usable_cache(s.cache, alpha) for s in servers}
    cached: Dict[str, set] = {s.id: set() for s in servers}

    keys = list(demand)
    units = np.repeat(np.arange(len(keys)), np.array([demand[k] for k in keys], dtype=np.int64))
    for idx in rng.permutation(units):
        key = keys[int(idx)]
        s = key[1]
        b = s.bitrate
        hit = next((srv.id for srv in servers if s in cached[srv.id] and residual[srv.id] >= b), None)
        if hit is not None:
            residual[hit] -= b
            if segment_misses:
                # viewers of a stream installed this window still miss its first segment
                miss = b * min(segment_seconds, T)
                outcome.record(key, edge_units=1, edge_kb=b * T - miss, origin_kb=miss, server=hit)
            else:
                outcome.record(key, edge_units=1, edge_kb=b * T, server=hit)
            continue

        size = segment_size(s, T)
        candidates = [srv for srv in servers if s not in cached[srv.id]
                      and residual[srv.id] >= b and room[srv.id] >= size]
        if candidates:
            installer = min(candidates, key=lambda srv: (-residual[srv.id], srv.id)).id
            cached[installer].add(s)
            room[installer] -= size
            if segment_misses:
                residual[installer] -= b
                miss = b * min(segment_seconds, T)
                outcome.record(key, edge_units=1, edge_kb=b * T - miss, origin_kb=miss, server=installer)
                continue
        outcome.record(key, origin_units=1, origin_kb=b * T)

    for srv in servers:
        outcome.consumed[srv.id] = srv.bandwidth - residual[srv.id]
        outcome.cached_kb[srv.id] = sum(segment_size(x, T) for x in cached[srv.id])


def dispatch_window(allocation: Allocation,
                    clusters: Sequence[EdgeCluster],
                    schedules: Mapping[str, ReplicationSchedule],
                    snapshot: ViewershipSnapshot,
                    strategy: str,
                    *,
                    alpha: float = 1.0,
                    seed=0,
                    segment_seconds: int = settings.SEGMENT_SECONDS,
                    segment_misses: bool = False) -> DispatchOutcome:
    """
    Serve every demand unit of `snapshot` from the edge when its group's
    cluster can, otherwise from the origin.
    """
    if strategy not in STRATEGIES:
        raise UnknownStrategyError(f"unknown strategy '{strategy}' (expected one of {', '.join(STRATEGIES)})")
    for cid, sched in schedules.items():
        if sched.window != snapshot.window:
            raise WindowMismatchError(f"schedule for {cid} targets window {sched.window.start}, "
                                      f"snapshot is window {snapshot.window.start}")

    outcome = DispatchOutcome(window=snapshot.window)
    outcome.demanded = {k: n for k, n in snapshot.counts.items() if n > 0}
    for gid in set(g for g, _ in outcome.demanded):
        outcome.cluster_of[gid] = allocation.cluster_of(gid)

    by_cluster = _cluster_demand(snapshot, allocation)
    rng = np.random.default_rng(seed)
    for cluster in clusters:
        demand = by_cluster.get(cluster.id, {})
        if strategy == "cort":
            _dispatch_reactive(cluster, demand, alpha, rng, outcome, segment_seconds, segment_misses)
        else:
            sched = schedules.get(cluster.id) or ReplicationSchedule.empty(cluster, alpha, snapshot.window)
            _dispatch_scheduled(cluster, demand, sched, outcome)

    known = {c.id for c in clusters}
    for cid, demand in by_cluster.items():
        if cid in known:
            continue
        for key, n in demand.items():
            outcome.record(key, origin_units=n, origin_kb=n * key[1].bitrate * snapshot.window.length)
    return outcome


# ---------------------- metrics ----------------------

def offloading_ratio(outcome: DispatchOutcome) -> float:
    """Edge Kb over total Kb; 1.0 when there was no traffic at all."""
    edge, origin = outcome.total_edge_kb, outcome.total_origin_kb
    if edge + origin == 0:
        return 1.0
    return edge / (edge + origin)


def is_degenerate(outcome: DispatchOutcome) -> bool:
    return outcome.total_edge_kb + outcome.total_origin_kb == 0


def satisfaction_by_bitrate(outcome: DispatchOutcome) -> Dict[int, float]:
    edge: Dict[int, int] = defaultdict(int)
    total: Dict[int, int] = defaultdict(int)
    for key, n in outcome.demanded.items():
        total[key[1].bitrate] += n
        edge[key[1].bitrate] += outcome.edge.get(key, 0)
    return {tier: edge[tier] / total[tier] for tier in sorted(total) if total[tier] > 0}


def cluster_offloading(outcome: DispatchOutcome, clusters: Sequence[EdgeCluster]) -> Dict[str, float]:
    edge: Dict[str, int] = defaultdict(int)
    total: Dict[str, int] = defaultdict(int)
    for key in outcome.demanded:
        cid = outcome.cluster_of.get(key[0])
        if cid is None:
            continue
        edge[cid] += outcome.edge_kb.get(key, 0)
        total[cid] += outcome.edge_kb.get(key, 0) + outcome.origin_kb.get(key, 0)
    return {c.id: (edge[c.id] / total[c.id] if total[c.id] else 1.0) for c in clusters}


def window_metrics(outcome: DispatchOutcome, clusters: Sequence[EdgeCluster],
                   strategy: str, alpha: float, fluctuation: float = 0.0) -> WindowMetrics:
    return WindowMetrics(
        window_start=outcome.window.start,
        strategy=strategy,
        alpha=alpha,
        fluctuation=fluctuation,
        offloading_ratio=offloading_ratio(outcome),
        degenerate=is_degenerate(outcome),
        per_bitrate_satisfaction=satisfaction_by_bitrate(outcome),
        per_cluster_offloading=cluster_offloading(outcome, clusters),
        edge_kb=outcome.total_edge_kb,
        origin_kb=outcome.total_origin_kb,
    )


def check_window_invariants(outcome: DispatchOutcome, clusters: Sequence[EdgeCluster], alpha: float) -> None:
    """Conservation of units and Kb per demand key, bandwidth and cache per server."""
    T = outcome.window.length
    for key, n in outcome.demanded.items():
        e, o = outcome.edge.get(key, 0), outcome.origin.get(key, 0)
        if e + o != n:
            raise InvariantViolation(f"{key}: edge {e} + origin {o} != demanded {n}")
        kb = outcome.edge_kb.get(key, 0) + outcome.origin_kb.get(key, 0)
        if kb != n * key[1].bitrate * T:
            raise InvariantViolation(f"{key}: {kb} Kb accounted, {n * key[1].bitrate * T} Kb demanded")
    stray = set(outcome.edge) - set(outcome.demanded)
    if any(outcome.edge[k] or outcome.origin.get(k, 0) for k in stray):
        raise InvariantViolation(f"traffic recorded for undemanded keys {sorted(stray)[:3]}")
    for c in clusters:
        for s in c.servers:
            if outcome.consumed.get(s.id, 0) > s.bandwidth:
                raise InvariantViolation(f"{s.id}: consumed {outcome.consumed[s.id]} Kbps > {s.bandwidth}")
            if outcome.cached_kb.get(s.id, 0) > usable_cache(s.cache, alpha):
                raise InvariantViolation(f"{s.id}: cached {outcome.cached_kb[s.id]} Kb > usable "
                                         f"{usable_cache(s.cache, alpha)}")


# ---------------------- experiment ----------------------

@dataclass
class PreparedRun:
    """Snapshots and allocation shared by every cell of an experiment grid."""
    topology: Topology
    snapshots: List[ViewershipSnapshot]
    allocation: Allocation
    tier_mix: Optional[Dict[int, float]] = None


def prepare_run(topology: Topology,
                trace: Sequence[TraceWindow],
                *,
                tier_mix: Optional[Mapping[int, float]] = None,
                max_windows: Optional[int] = None,
                allocation: Optional[Allocation] = None) -> PreparedRun:
    """
    Build per-window snapshots and allocate groups once on their mean demand.
    """
    if not trace:
        raise DataError("trace has no windows")
    for w in trace:
        if w.window.length != topology.window_seconds:
            raise WindowMismatchError(f"trace window {w.window.length}s does not match topology window "
                                      f"{topology.window_seconds}s")
    windows = list(trace)[:max_windows] if max_windows else list(trace)
    snapshots = [build_snapshot(w, topology.groups, tier_mix) for w in windows]
    groups = with_demand(topology.groups, mean_demands(snapshots))
    topo = topology.model_copy(update={"groups": groups})
    if allocation is None:
        allocation = isoa_allocate(groups, topo.clusters, topo.preferences)
    check_feasible(allocation, groups, topo.clusters)
    log.info(f"[run] windows={len(snapshots)} groups={len(groups)} "
             f"allocated={len(allocation.assigned)} unallocated={len(allocation.unallocated)}")
    return PreparedRun(topo, snapshots, allocation, dict(tier_mix) if tier_mix else None)


def _retarget(snapshot: ViewershipSnapshot, window: TimeWindow) -> ViewershipSnapshot:
    return ViewershipSnapshot(window, snapshot.counts, snapshot.channel_bitrates)


def schedule_clusters(prep: PreparedRun, strategy: str, alpha: float, demand_snapshot: ViewershipSnapshot,
                      window: TimeWindow, workers: int = 1,
                      alpha_grid: Sequence[float] = settings.ALPHA_GRID) -> Dict[str, ReplicationSchedule]:
    scheduler = _SCHEDULERS.get(strategy)
    if scheduler is None:
        return {}
    clusters = prep.topology.clusters

    def _one(cluster: EdgeCluster) -> ReplicationSchedule:
        items = demand_items(demand_snapshot, prep.allocation, cluster.id)
        return scheduler(cluster, items, alpha, window, prep.allocation.rosters.get(cluster.id, []), alpha_grid)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_one, clusters))
    else:
        results = [_one(c) for c in clusters]
    return {c.id: s for c, s in zip(clusters, results)}


def served_snapshot(prep: PreparedRun, t: int, observed: ViewershipSnapshot, fluctuation: Optional[float],
                    seed: int) -> ViewershipSnapshot:
    """
    Demand dispatched in window t. Without a fluctuation level the window's own
    trace counts are served. With one (0 included) the counts the schedule was
    planned on are served, perturbed by that level.
    """
    if fluctuation is None:
        return prep.snapshots[t]
    return apply_fluctuation(observed, fluctuation, [seed, t, _RNG_FLUCTUATION],
                             prep.topology.groups, prep.tier_mix)


def run_prepared(prep: PreparedRun,
                 strategy: str,
                 alpha: float,
                 *,
                 seed: int,
                 fluctuation: Optional[float] = None,
                 dispatch_lag: int = settings.DISPATCH_LAG,
                 segment_seconds: int = settings.SEGMENT_SECONDS,
                 segment_misses: bool = False,
                 workers: int = 1,
                 alpha_grid: Sequence[float] = settings.ALPHA_GRID,
                 on_window: Optional[WindowHook] = None,
                 strict: bool = settings.STRICT_INVARIANTS) -> List[WindowMetrics]:
    """
    One strategy at one alpha over every prepared window. Schedules for window
    t are planned on window t - dispatch_lag; `on_window` sees them before
    dispatch.
    """
    if strategy not in STRATEGIES:
        raise UnknownStrategyError(f"unknown strategy '{strategy}' (expected one of {', '.join(STRATEGIES)})")
    if not 0.0 < alpha <= 1.0:
        raise DataError(f"alpha {alpha} outside (0, 1]")
    if fluctuation is not None and not 0.0 <= fluctuation <= 1.0:
        raise DataError(f"fluctuation {fluctuation} outside [0, 1]")
    clusters = prep.topology.clusters
    out: List[WindowMetrics] = []
    for t, actual in enumerate(prep.snapshots):
        window = actual.window
        observed = _retarget(prep.snapshots[max(t - dispatch_lag, 0)], window)
        schedules = schedule_clusters(prep, strategy, alpha, observed, window, workers, alpha_grid)
        if on_window is not None:
            on_window(window, schedules)

        served = served_snapshot(prep, t, observed, fluctuation, seed)
        outcome = dispatch_window(prep.allocation, clusters, schedules, served, strategy,
                                  alpha=alpha, seed=[seed, t, _RNG_CORT_ORDER],
                                  segment_seconds=segment_seconds, segment_misses=segment_misses)
        if strict:
            for c in clusters:
                if c.id in schedules:
                    check_schedule(schedules[c.id], c, demand_items(observed, prep.allocation, c.id))
            check_window_invariants(outcome, clusters, alpha)
        out.append(window_metrics(outcome, clusters, strategy, alpha, fluctuation or 0.0))
    return out


def run_experiment(topology: Topology,
                   trace: Sequence[TraceWindow],
                   strategy: str,
                   alpha: float,
                   *,
                   seed: int,
                   fluctuation: Optional[float] = None,
                   max_windows: Optional[int] = None,
                   tier_mix: Optional[Mapping[int, float]] = None,
                   **kwargs) -> List[WindowMetrics]:
    """One strategy at one alpha over every trace window; deterministic under `seed`."""
    if strategy not in STRATEGIES:
        raise UnknownStrategyError(f"unknown strategy '{strategy}' (expected one of {', '.join(STRATEGIES)})")
    prep = prepare_run(topology, trace, tier_mix=tier_mix, max_windows=max_windows)
    return run_prepared(prep, strategy, alpha, seed=seed, fluctuation=fluctuation, **kwargs)
