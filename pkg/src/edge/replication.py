# src/edge/replication.py
"""
Per-cluster, per-window replication scheduling.

A schedule decides which stream segment sets each edge server pre-fetches for
the coming window (bounded by alpha * cache) and how many viewers of each
(group, stream) it is expected to serve (bounded by bandwidth).
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from ortools.sat.python import cp_model

from src.edge.errors import DataError, InvariantViolation, OracleBoundError
from src.edge.model import StreamKey, TimeWindow, ViewershipSnapshot, segment_size
from src.models.schemas import Allocation, EdgeCluster

log = logging.getLogger(__name__)

EXACT_MAX_ITEMS = 16
EXACT_MAX_BINS = 4


@dataclass(frozen=True)
class DemandItem:
    group_id: str
    stream: StreamKey
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise DataError(f"demand item {self.group_id}/{self.stream} needs count >= 1, got {self.count}")

    @property
    def per_viewer_bandwidth(self) -> int:
        return self.stream.bitrate


AssignmentKey = Tuple[str, str, StreamKey]   # (server_id, group_id, stream)


@dataclass
class ReplicationSchedule:
    cluster_id: str
    window: TimeWindow
    alpha: float
    cached: Dict[str, Set[StreamKey]] = field(default_factory=dict)
    residual_bandwidth: Dict[str, int] = field(default_factory=dict)
    usable_cache: Dict[str, int] = field(default_factory=dict)
    residual_cache: Dict[str, int] = field(default_factory=dict)
    assignments: Dict[AssignmentKey, int] = field(default_factory=dict)

    @classmethod
    def empty(cls, cluster: EdgeCluster, alpha: float, window: TimeWindow) -> "ReplicationSchedule":
        if not 0.0 < alpha <= 1.0:
            raise DataError(f"alpha {alpha} outside (0, 1]")
        servers = sorted(cluster.servers, key=lambda s: s.id)
        usable = {s.id: usable_cache(s.cache, alpha) for s in servers}
        return cls(
            cluster_id=cluster.id,
            window=window,
            alpha=alpha,
            cached={s.id: set() for s in servers},
            residual_bandwidth={s.id: s.bandwidth for s in servers},
            usable_cache=dict(usable),
            residual_cache=dict(usable),
        )

    def widen(self, cluster: EdgeCluster, alpha: float) -> None:
        """Relabel for a larger alpha; cached sets and assignments stay as planned."""
        if alpha < self.alpha:
            raise DataError(f"cannot narrow a schedule from alpha {self.alpha} to {alpha}")
        for s in cluster.servers:
            used = self.usable_cache[s.id] - self.residual_cache[s.id]
            self.usable_cache[s.id] = usable_cache(s.cache, alpha)
            self.residual_cache[s.id] = self.usable_cache[s.id] - used
        self.alpha = alpha

    @property
    def server_ids(self) -> List[str]:
        return sorted(self.cached)

    def admit(self, server_id: str, stream: StreamKey) -> None:
        size = segment_size(stream, self.window.length)
        if size > self.residual_cache[server_id]:
            raise InvariantViolation(f"{server_id}: segment set of {stream} ({size} Kb) does not fit "
                                     f"residual cache {self.residual_cache[server_id]} Kb")
        self.cached[server_id].add(stream)
        self.residual_cache[server_id] -= size

    def assign(self, server_id: str, group_id: str, stream: StreamKey, count: int) -> None:
        if count <= 0:
            return
        if stream not in self.cached[server_id]:
            raise InvariantViolation(f"{server_id} serves {stream} without caching it")
        need = count * stream.bitrate
        if need > self.residual_bandwidth[server_id]:
            raise InvariantViolation(f"{server_id}: {count} viewers of {stream} exceed residual bandwidth")
        key = (server_id, group_id, stream)
        self.assignments[key] = self.assignments.get(key, 0) + count
        self.residual_bandwidth[server_id] -= need

    def stream_assignments(self) -> Dict[Tuple[str, StreamKey], int]:
        out: Dict[Tuple[str, StreamKey], int] = defaultdict(int)
        for (srv, _, stream), n in self.assignments.items():
            out[(srv, stream)] += n
        return dict(out)

    def assigned_count(self, group_id: str, stream: StreamKey) -> int:
        return sum(n for (_, g, s), n in self.assignments.items() if g == group_id and s == stream)

    def served_kbps(self) -> int:
        return sum(n * s.bitrate for (_, _, s), n in self.assignments.items())

    def to_record(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "window_start": self.window.start,
            "alpha": self.alpha,
            "servers": {
                srv: {
                    "cached": [[s.channel_id, s.bitrate] for s in sorted(self.cached[srv])],
                    "residual_bandwidth": self.residual_bandwidth[srv],
                    "residual_cache": self.residual_cache[srv],
                }
                for srv in self.server_ids
            },
            "assignments": [
                [srv, g, s.channel_id, s.bitrate, n]
                for (srv, g, s), n in sorted(self.assignments.items())
            ],
        }


def usable_cache(cache: int, alpha: float) -> int:
    return int(math.floor(alpha * cache + 1e-9))


def reward(bitrate: int, available_bandwidth: int, unassigned_viewers: int) -> int:
    """Traffic (Kbps) a server could take over by caching the stream now."""
    if bitrate <= 0:
        raise DataError(f"bitrate must be positive, got {bitrate}")
    return bitrate * min(max(available_bandwidth, 0) // bitrate, max(unassigned_viewers, 0))


# ---------------------- multiple knapsack ----------------------

def pack_first_fit_decreasing(runs: Sequence[Tuple[Hashable, int, int]],
                              capacities: Sequence[int]) -> Dict[Tuple[Hashable, int], int]:
    """
    First-fit decreasing over run-length encoded items (key, weight, count)
    already in packing order: each run fills bins in index order. Returns
    (key, bin) -> packed count.
    """
    residual = list(capacities)
    packed: Dict[Tuple[Hashable, int], int] = {}
    for key, w, count in runs:
        left = count
        for b in range(len(residual)):
            if left == 0:
                break
            if w <= 0:
                take = left
            else:
                take = min(left, residual[b] // w)
            if take:
                packed[(key, b)] = take
                residual[b] -= take * w
                left -= take
    return packed


def solve_mkp_greedy(weights: Sequence[int],
                     capacities: Sequence[int],
                     tie_keys: Optional[Sequence] = None) -> List[Optional[int]]:
    """
    First-fit decreasing with unit runs, items sorted by weight desc then tie
    key. Returns the bin index per item (None = unplaced).
    """
    keys = list(tie_keys) if tie_keys is not None else list(range(len(weights)))
    order = sorted(range(len(weights)), key=lambda i: (-weights[i], keys[i], i))
    packed = pack_first_fit_decreasing([(i, weights[i], 1) for i in order], capacities)
    result: List[Optional[int]] = [None] * len(weights)
    for (i, b), _ in packed.items():
        result[i] = b
    return result


def solve_mkp_exact(weights: Sequence[int], capacities: Sequence[int]) -> List[Optional[int]]:
    """
    Exact MKP (profit = weight) on CP-SAT for small instances.

    A second solve pins the optimum and picks, among optimal packings, the
    lexicographically smallest bin vector over items in (weight desc, index)
    order, with "unplaced" after every bin. Results are therefore stable
    across solver versions and thread counts.
    """
    n, n_bins = len(weights), len(capacities)
    if n > EXACT_MAX_ITEMS or n_bins > EXACT_MAX_BINS:
        raise OracleBoundError(f"exact MKP limited to {EXACT_MAX_ITEMS} items / {EXACT_MAX_BINS} bins, "
                               f"got {n} / {n_bins}")
    if n == 0:
        return []
    order = sorted(range(n), key=lambda i: (-weights[i], i))

    model = cp_model.CpModel()
    x = {(i, b): model.new_bool_var(f"x_{i}_{b}") for i in range(n) for b in range(n_bins)}
    for i in range(n):
        model.add_at_most_one(x[i, b] for b in range(n_bins))
    for b, cap in enumerate(capacities):
        model.add(sum(x[i, b] * weights[i] for i in range(n)) <= cap)
    packed = sum(x[i, b] * weights[i] for i in range(n) for b in range(n_bins))

    solver = cp_model.CpSolver()
    solver.parameters.num_workers = 1
    model.maximize(packed)
    if solver.solve(model) != cp_model.OPTIMAL:
        raise InvariantViolation(f"CP-SAT found no optimal packing for {n} items / {n_bins} bins")
    best = int(round(solver.objective_value))

    # base-(n_bins + 1) digits, heaviest item most significant; unplaced is digit n_bins
    model.add(packed == best)
    base = n_bins + 1
    digits = []
    for pos, i in enumerate(order):
        code = sum(x[i, b] * b for b in range(n_bins)) + n_bins * (1 - sum(x[i, b] for b in range(n_bins)))
        digits.append(code * base ** (n - 1 - pos))
    model.minimize(sum(digits))
    if solver.solve(model) != cp_model.OPTIMAL:
        raise InvariantViolation(f"CP-SAT lost the optimum {best} while breaking ties")

    result: List[Optional[int]] = [None] * n
    for (i, b), var in x.items():
        if solver.value(var):
            result[i] = b
    return result


def packed_weight(weights: Sequence[int], assignment: Sequence[Optional[int]]) -> int:
    return sum(w for w, b in zip(weights, assignment) if b is not None)


# ---------------------- schedules ----------------------

def _check_roster(demand: Sequence[DemandItem], cluster: EdgeCluster, roster: Optional[Iterable[str]]) -> None:
    if roster is None:
        return
    members = set(roster)
    for item in demand:
        if item.group_id not in members:
            raise DataError(f"demand for group {item.group_id} routed to {cluster.id}, which does not serve it")


def _unassigned(demand: Sequence[DemandItem]) -> Dict[Tuple[str, StreamKey], int]:
    out: Dict[Tuple[str, StreamKey], int] = defaultdict(int)
    for item in demand:
        out[(item.group_id, item.stream)] += item.count
    return dict(sorted(out.items(), key=lambda kv: (kv[0][1], kv[0][0])))


def _stream_backlog(unassigned: Mapping[Tuple[str, StreamKey], int]) -> Dict[StreamKey, int]:
    out: Dict[StreamKey, int] = defaultdict(int)
    for (_, s), n in unassigned.items():
        out[s] += n
    return {s: n for s, n in sorted(out.items()) if n > 0}


def _assign_stream(schedule: ReplicationSchedule, server_id: str, stream: StreamKey, count: int,
                   unassigned: Dict[Tuple[str, StreamKey], int]) -> int:
    """Assign up to `count` unassigned viewers of `stream`, groups in id order."""
    left = count
    for key in sorted(k for k in unassigned if k[1] == stream):
        if left == 0:
            break
        take = min(left, unassigned[key])
        if take:
            schedule.assign(server_id, key[0], stream, take)
            unassigned[key] -= take
            left -= take
    return count - left


Scheduler = Callable[[EdgeCluster, Sequence[DemandItem], float, TimeWindow], ReplicationSchedule]


def _best_over_alphas(scheduler: Scheduler, cluster: EdgeCluster, demand: Sequence[DemandItem], alpha: float,
                      window: TimeWindow, alpha_grid: Sequence[float]) -> ReplicationSchedule:
    """
    Schedule at `alpha` and at every grid value below it; keep the plan serving
    the most traffic (smallest alpha on ties), relabelled for `alpha`.
    """
    if not 0.0 < alpha <= 1.0:
        raise DataError(f"alpha {alpha} outside (0, 1]")
    best: Optional[ReplicationSchedule] = None
    for a in sorted({a for a in alpha_grid if 0.0 < a < alpha} | {alpha}):
        sched = scheduler(cluster, demand, a, window)
        if best is None or sched.served_kbps() > best.served_kbps():
            best = sched
    if best.alpha != alpha:
        log.debug(f"[schedule] {cluster.id}@{window.start} alpha={alpha} keeps the alpha={best.alpha} plan")
        best.widen(cluster, alpha)
    return best


def plver_schedule(cluster: EdgeCluster,
                   demand: Sequence[DemandItem],
                   alpha: float,
                   window: TimeWindow,
                   roster: Optional[Iterable[str]] = None,
                   alpha_grid: Sequence[float] = ()) -> ReplicationSchedule:
    """
    Three-phase proactive replication for one cluster and window:
      1. pack viewers onto server bandwidth (FFD) and cache each server's
         packed streams in reward order while usable cache lasts;
      2. move leftover viewers onto servers already caching their stream;
      3. repeatedly cache the (stream, server) pair with the highest reward.

    The heuristic alone can serve less with more cache. Passing `alpha_grid`
    also plans at every grid value below `alpha` and keeps the best plan, so
    served traffic never drops as alpha rises along the grid.
    """
    _check_roster(demand, cluster, roster)
    return _best_over_alphas(_plver_at, cluster, demand, alpha, window, alpha_grid)


def _plver_at(cluster: EdgeCluster, demand: Sequence[DemandItem], alpha: float,
              window: TimeWindow) -> ReplicationSchedule:
    sched = ReplicationSchedule.empty(cluster, alpha, window)
    servers = sched.server_ids
    unassigned = _unassigned(demand)

    # phase 1
    runs = sorted(((key, key[1].bitrate, n) for key, n in unassigned.items() if n),
                  key=lambda r: (-r[1], r[0][1], r[0][0]))
    packed = pack_first_fit_decreasing(runs, [sched.residual_bandwidth[s] for s in servers])
    per_server: Dict[str, Dict[StreamKey, Dict[str, int]]] = {s: defaultdict(dict) for s in servers}
    for ((group_id, stream), b), n in packed.items():
        per_server[servers[b]][stream][group_id] = n

    for srv in servers:
        candidates = dict(per_server[srv])
        while candidates:
            stream = _top_reward(candidates, sched.residual_bandwidth[srv])
            groups = candidates.pop(stream)
            if segment_size(stream, window.length) > sched.residual_cache[srv]:
                continue
            sched.admit(srv, stream)
            for group_id, n in sorted(groups.items()):
                sched.assign(srv, group_id, stream, n)
                unassigned[(group_id, stream)] -= n

    # phase 2
    for (group_id, stream), n in list(unassigned.items()):
        for srv in servers:
            if n == 0:
                break
            if stream in sched.cached[srv]:
                take = min(n, sched.residual_bandwidth[srv] // stream.bitrate)
                if take:
                    sched.assign(srv, group_id, stream, take)
                    n -= take
        unassigned[(group_id, stream)] = n

    # phase 3
    while True:
        backlog = _stream_backlog(unassigned)
        best: Optional[Tuple[int, StreamKey, str]] = None
        for stream, n in backlog.items():
            size = segment_size(stream, window.length)
            for srv in servers:
                if stream in sched.cached[srv] or size > sched.residual_cache[srv]:
                    continue
                r = reward(stream.bitrate, sched.residual_bandwidth[srv], n)
                # strict > keeps the first (stream id, server id) on ties
                if r > 0 and (best is None or r > best[0]):
                    best = (r, stream, srv)
        if best is None:
            break
        r, stream, srv = best
        sched.admit(srv, stream)
        placed = _assign_stream(sched, srv, stream, r // stream.bitrate, unassigned)
        if placed * stream.bitrate != r:
            raise InvariantViolation(f"phase 3 admitted {stream} on {srv} for reward {r} but placed {placed}")

    log.debug(f"[plver] {cluster.id}@{window.start} alpha={alpha} served={sched.served_kbps()}Kbps "
              f"left={sum(unassigned.values())} viewers")
    return sched


def _top_reward(candidates: Mapping[StreamKey, Mapping[str, int]], bandwidth: int) -> StreamKey:
    best, best_r = None, -1
    for s in sorted(candidates):
        r = reward(s.bitrate, bandwidth, sum(candidates[s].values()))
        if r > best_r:
            best, best_r = s, r
    return best


def abr_schedule(cluster: EdgeCluster,
                 demand: Sequence[DemandItem],
                 alpha: float,
                 window: TimeWindow,
                 roster: Optional[Iterable[str]] = None,
                 alpha_grid: Sequence[float] = ()) -> ReplicationSchedule:
    """
    Auction-style baseline: each server, in id order, caches the streams with
    the most still-unserved viewers in the cluster until its usable cache is
    full, then serves as many of those viewers as its bandwidth allows.
    `alpha_grid` works as in plver_schedule.
    """
    _check_roster(demand, cluster, roster)
    return _best_over_alphas(_abr_at, cluster, demand, alpha, window, alpha_grid)


def _abr_at(cluster: EdgeCluster, demand: Sequence[DemandItem], alpha: float,
            window: TimeWindow) -> ReplicationSchedule:
    sched = ReplicationSchedule.empty(cluster, alpha, window)
    unassigned = _unassigned(demand)

    for srv in sched.server_ids:
        backlog = _stream_backlog(unassigned)
        ranked = sorted(backlog, key=lambda s: (-backlog[s], s))
        admitted = []
        for stream in ranked:
            if segment_size(stream, window.length) <= sched.residual_cache[srv]:
                sched.admit(srv, stream)
                admitted.append(stream)
        for stream in admitted:
            room = sched.residual_bandwidth[srv] // stream.bitrate
            if room:
                _assign_stream(sched, srv, stream, min(room, backlog[stream]), unassigned)
    return sched


# ---------------------- replication table ----------------------

@dataclass(frozen=True)
class ReplicationTable:
    window_start: int
    entries: Mapping[Tuple[StreamKey, int], Tuple[str, ...]]

    def lookup(self, channel_id: str, bitrate: int, window_start: Optional[int] = None) -> Tuple[str, ...]:
        ws = self.window_start if window_start is None else window_start
        return self.entries.get((StreamKey(channel_id, bitrate), ws), ())

    def to_record(self) -> List[list]:
        return [[s.channel_id, s.bitrate, ws, list(srvs)] for (s, ws), srvs in sorted(self.entries.items())]


def build_replication_table(schedules: Mapping[str, ReplicationSchedule], window: TimeWindow) -> ReplicationTable:
    """Invert the cached sets: (stream, window) -> servers holding it."""
    table: Dict[Tuple[StreamKey, int], List[str]] = defaultdict(list)
    for sched in schedules.values():
        if sched.window.start != window.start:
            raise DataError(f"schedule for {sched.cluster_id} is for window {sched.window.start}, not {window.start}")
        for srv, streams in sched.cached.items():
            for s in streams:
                table[(s, window.start)].append(srv)
    return ReplicationTable(window.start, {k: tuple(sorted(v)) for k, v in sorted(table.items())})


def invert_table(table: ReplicationTable) -> Dict[str, Set[StreamKey]]:
    out: Dict[str, Set[StreamKey]] = defaultdict(set)
    for (s, _), servers in table.entries.items():
        for srv in servers:
            out[srv].add(s)
    return dict(out)


# ---------------------- demand + checks ----------------------

def demand_items(snapshot: ViewershipSnapshot, allocation: Allocation, cluster_id: str) -> List[DemandItem]:
    members = set(allocation.rosters.get(cluster_id, []))
    return [
        DemandItem(g, s, n)
        for (g, s), n in sorted(snapshot.counts.items(), key=lambda kv: (kv[0][0], kv[0][1]))
        if g in members and n > 0
    ]


def check_schedule(schedule: ReplicationSchedule, cluster: EdgeCluster, demand: Sequence[DemandItem]) -> None:
    """Raise InvariantViolation on any bandwidth, cache, coupling or over-assignment breach."""
    by_id = {s.id: s for s in cluster.servers}
    used_bw: Dict[str, int] = defaultdict(int)
    for (srv, g, s), n in schedule.assignments.items():
        if s not in schedule.cached.get(srv, set()):
            raise InvariantViolation(f"{cluster.id}/{srv}: assigned viewers of {s} it does not cache")
        used_bw[srv] += n * s.bitrate
    for srv, streams in schedule.cached.items():
        server = by_id[srv]
        if used_bw[srv] > server.bandwidth:
            raise InvariantViolation(f"{cluster.id}/{srv}: assigned {used_bw[srv]} Kbps > bandwidth {server.bandwidth}")
        cached_kb = sum(segment_size(s, schedule.window.length) for s in streams)
        if cached_kb > usable_cache(server.cache, schedule.alpha):
            raise InvariantViolation(f"{cluster.id}/{srv}: cached {cached_kb} Kb > usable cache "
                                     f"{usable_cache(server.cache, schedule.alpha)}")
    wanted = _unassigned(demand)
    got: Dict[Tuple[str, StreamKey], int] = defaultdict(int)
    for (_, g, s), n in schedule.assignments.items():
        got[(g, s)] += n
    for key, n in got.items():
        if n > wanted.get(key, 0):
            raise InvariantViolation(f"{cluster.id}: {n} viewers of {key} assigned, only {wanted.get(key, 0)} demanded")
