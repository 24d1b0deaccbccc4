# src/edge/allocation.py
"""
Stable one-to-multiple allocation of user groups to capacity-limited edge
clusters, the greedy baseline it is compared against, and the checks used to
verify and summarize an allocation.
"""
import bisect
import logging
from collections import deque
from itertools import accumulate
from typing import Callable, Deque, Dict, List, Optional, Sequence, Set, Tuple

from src.edge.errors import InfeasibleAllocationError, InvariantViolation, RosterFeasibleError
from src.edge.model import level_of as geo_level_of
from src.models.schemas import Allocation, EdgeCluster, PreferenceTables, RankHistogram, Topology, UserGroup

log = logging.getLogger(__name__)

LevelFn = Callable[[str, str], Optional[int]]
MAX_LEVEL = 6


def bsearch_violation_start(demands: Sequence[int], capacity: int, proposer_index: int) -> int:
    """
    Largest index m with prefix(0..m) <= capacity, found by binary search on
    the side of `proposer_index` where it must lie. Returns proposer_index - 1
    when the proposer itself does not fit (may be -1).
    """
    if not 0 <= proposer_index < len(demands):
        raise IndexError(f"proposer index {proposer_index} outside roster of {len(demands)}")
    prefix = list(accumulate(demands))
    if prefix[-1] <= capacity:
        raise RosterFeasibleError(f"roster demand {prefix[-1]} fits capacity {capacity}")
    if prefix[proposer_index] <= capacity:
        return bisect.bisect_right(prefix, capacity, lo=proposer_index) - 1
    return bisect.bisect_right(prefix, capacity, hi=proposer_index) - 1


class _Matcher:
    """
    Mutable proposal state for one ISOA run.

    `remaining[g]` is the suffix of uP_g that g still has to try; while g is
    assigned its head is the assigned cluster. `rejected[j]` holds the groups
    j turned away or evicted, re-checked whenever j loses a member.
    """

    def __init__(self, groups: Sequence[UserGroup], clusters: Sequence[EdgeCluster], prefs: PreferenceTables):
        self.order = [g.id for g in groups]
        self.demand = {g.id: g.demand for g in groups}
        self.capacity = {c.id: c.capacity for c in clusters}
        self.user_prefs = {g: list(prefs.up(g)) for g in self.order}
        self.position = {g: {j: k for k, j in enumerate(up)} for g, up in self.user_prefs.items()}
        self.rank = {c.id: {g: r for r, g in enumerate(prefs.cp(c.id))} for c in clusters}
        self.remaining = {g: list(self.user_prefs[g]) for g in self.order}
        self.rosters: Dict[str, List[str]] = {c.id: [] for c in clusters}
        self.ranks: Dict[str, List[int]] = {c.id: [] for c in clusters}
        self.load: Dict[str, int] = {c.id: 0 for c in clusters}
        self.rejected: Dict[str, Set[str]] = {c.id: set() for c in clusters}
        self.assigned: Dict[str, str] = {}
        self.queued: Set[str] = set()
        self.proposals = 0
        self.reoffers = 0

    def propose(self, g: str, j: str) -> Tuple[bool, List[str]]:
        """Insert g into G_j; returns (accepted, evicted others)."""
        self.proposals += 1
        roster, ranks = self.rosters[j], self.ranks[j]
        r = self.rank[j][g]
        pos = bisect.bisect_left(ranks, r)
        cap = self.capacity[j]
        if self.load[j] + self.demand[g] <= cap:
            roster.insert(pos, g)
            ranks.insert(pos, r)
            self.load[j] += self.demand[g]
            self.assigned[g] = j
            return True, []

        candidate = roster[:pos] + [g] + roster[pos:]
        demands = [self.demand[x] for x in candidate]
        m = bsearch_violation_start(demands, cap, pos)
        if m < pos:
            # everything above g was already feasible, so g is the first casualty
            return False, []

        kept = sum(demands[: m + 1])
        survivors, evicted = candidate[: m + 1], []
        for x, d in zip(candidate[m + 1:], demands[m + 1:]):
            if kept + d <= cap:
                survivors.append(x)
                kept += d
            else:
                evicted.append(x)
        self.rosters[j] = survivors
        self.ranks[j] = [self.rank[j][x] for x in survivors]
        self.load[j] = kept
        self.assigned[g] = j
        for x in evicted:
            del self.assigned[x]
        return True, evicted

    def leave(self, g: str, j: str) -> None:
        k = self.rosters[j].index(g)
        del self.rosters[j][k]
        del self.ranks[j][k]
        self.load[j] -= self.demand[g]

    def _offer(self, g: str, start: int, free: Deque[str]) -> None:
        """Queue g to propose again from uP_g[start:] (or from further up if already queued)."""
        if g in self.queued and self.remaining[g]:
            start = min(start, self.position[g][self.remaining[g][0]])
        self.remaining[g] = self.user_prefs[g][start:]
        if g not in self.queued:
            self.queued.add(g)
            free.append(g)

    def _reoffer(self, j: str, free: Deque[str]) -> None:
        """Re-queue groups j turned away that now fit beside j's better-ranked members."""
        waiting = self.rejected[j]
        if not waiting:
            return
        rank = self.rank[j]
        roster = self.rosters[j]
        ranks = self.ranks[j]
        above = [0, *accumulate(self.demand[x] for x in roster)]
        cap = self.capacity[j]
        fits = []
        for r in waiting:
            if self.demand[r] > cap - above[bisect.bisect_left(ranks, rank[r])]:
                continue
            current = self.assigned.get(r)
            if current is not None and self.position[r][current] <= self.position[r][j]:
                continue
            fits.append(r)
        for r in sorted(fits, key=rank.__getitem__):
            waiting.discard(r)
            self.reoffers += 1
            self._offer(r, self.position[r][j], free)

    def run(self, free: Deque[str], limit: int) -> bool:
        """Process proposals until no group is queued; False if `limit` proposals ran out first."""
        self.queued.update(free)
        while free:
            if self.proposals >= limit:
                return False
            g = free.popleft()
            self.queued.discard(g)
            current = self.assigned.get(g)
            todo = self.remaining[g]
            while todo and todo[0] != current:
                j = todo[0]
                if g not in self.rank.get(j, {}):
                    todo.pop(0)
                    continue
                accepted, evicted = self.propose(g, j)
                if not accepted:
                    self.rejected[j].add(g)
                    todo.pop(0)
                    continue
                self.rejected[j].discard(g)
                if current is not None:
                    self.leave(g, current)
                    self._reoffer(current, free)
                for x in evicted:
                    self.rejected[j].add(x)
                    self._offer(x, self.position[x][j] + 1, free)
                if evicted:
                    self._reoffer(j, free)
                break
        return True

    def allocation(self, blocking_pair: Optional[Tuple[str, str]] = None) -> Allocation:
        return Allocation(
            assigned=dict(sorted(self.assigned.items())),
            rosters={j: list(r) for j, r in self.rosters.items()},
            unallocated=[g for g in self.order if g not in self.assigned],
            blocking_pair=blocking_pair,
        )


def isoa_allocate(groups: Sequence[UserGroup],
                  clusters: Sequence[EdgeCluster],
                  prefs: PreferenceTables,
                  max_proposals: Optional[int] = None) -> Allocation:
    """
    Integral stable one-to-multiple allocation.

    Free groups propose from a FIFO queue down their uP lists; a cluster keeps
    its best-ranked prefix that fits C_j and evicts the rest. Whenever a
    cluster loses a member, groups it turned away that now fit beside its
    better-ranked members are offered the cluster again.

    With sized groups a stable allocation need not exist, and then proposals
    cycle. After `max_proposals` (default 32 * (Σ|uP| + |groups|)) the last
    feasible allocation is returned with `blocking_pair` set.
    """
    m = _Matcher(groups, clusters, prefs)
    limit = max_proposals if max_proposals is not None else \
        32 * (sum(len(v) for v in m.user_prefs.values()) + len(m.order))
    settled = m.run(deque(m.order), limit)

    stable, pair = _blocking_pair(m.assigned, m.rosters, m.order, m.demand, m.capacity, m.user_prefs, m.rank)
    if settled and not stable:
        raise InvariantViolation(f"proposals settled with blocking pair {pair}")
    if not settled and not stable:
        log.warning(f"[isoa] no stable allocation after {m.proposals} proposals; "
                    f"returning a feasible one (blocking pair {pair})")

    alloc = m.allocation(pair)
    log.debug(f"[isoa] proposals={m.proposals} reoffers={m.reoffers} "
              f"assigned={len(alloc.assigned)} unallocated={len(alloc.unallocated)}")
    return alloc


def greedy_allocate(groups: Sequence[UserGroup],
                    clusters: Sequence[EdgeCluster],
                    prefs: PreferenceTables) -> Allocation:
    """Each group, in input order, takes its best listed cluster that still has room."""
    residual = {c.id: c.capacity for c in clusters}
    rank = {c.id: {g: r for r, g in enumerate(prefs.cp(c.id))} for c in clusters}
    assigned: Dict[str, str] = {}
    for g in groups:
        for j in prefs.up(g.id):
            if g.id in rank.get(j, {}) and residual[j] >= g.demand:
                assigned[g.id] = j
                residual[j] -= g.demand
                break
    rosters = {c.id: sorted((g for g, j in assigned.items() if j == c.id), key=rank[c.id].__getitem__)
               for c in clusters}
    return Allocation(
        assigned=dict(sorted(assigned.items())),
        rosters=rosters,
        unallocated=[g.id for g in groups if g.id not in assigned],
    )


def check_feasible(allocation: Allocation, groups: Sequence[UserGroup], clusters: Sequence[EdgeCluster]) -> None:
    demand = {g.id: g.demand for g in groups}
    seen: Dict[str, str] = {}
    for c in clusters:
        roster = allocation.rosters.get(c.id, [])
        for g in roster:
            if g in seen:
                raise InfeasibleAllocationError(f"group {g} sits in both {seen[g]} and {c.id}")
            if allocation.assigned.get(g) != c.id:
                raise InfeasibleAllocationError(f"roster of {c.id} lists {g}, assigned to {allocation.assigned.get(g)}")
            seen[g] = c.id
        load = sum(demand.get(g, 0) for g in roster)
        if load > c.capacity:
            raise InfeasibleAllocationError(f"cluster {c.id}: demand {load} exceeds capacity {c.capacity}")
    stray = set(allocation.assigned) - set(seen)
    if stray:
        raise InfeasibleAllocationError(f"assigned groups missing from rosters: {sorted(stray)}")


def _blocking_pair(assigned: Dict[str, str],
                   rosters: Dict[str, List[str]],
                   order: Sequence[str],
                   demand: Dict[str, int],
                   capacity: Dict[str, int],
                   user_prefs: Dict[str, List[str]],
                   rank: Dict[str, Dict[str, int]]) -> Tuple[bool, Optional[Tuple[str, str]]]:
    above_cache: Dict[str, List[Tuple[int, int]]] = {}
    for g in order:
        current = assigned.get(g)
        for j in user_prefs.get(g, []):
            if j == current:
                break
            r = rank.get(j, {}).get(g)
            if r is None:
                continue
            if j not in above_cache:
                members = sorted((rank[j].get(x, len(rank[j])), demand.get(x, 0)) for x in rosters.get(j, []))
                above_cache[j] = members
            above = sum(d for rx, d in above_cache[j] if rx < r)
            if demand[g] <= capacity[j] - above:
                return False, (g, j)
    return True, None


def is_stable(allocation: Allocation,
              groups: Sequence[UserGroup],
              clusters: Sequence[EdgeCluster],
              prefs: PreferenceTables) -> Tuple[bool, Optional[Tuple[str, str]]]:
    """
    (True, None), or (False, (group, cluster)) for the first blocking pair: the
    group prefers the cluster, is listed by it, and fits beside the groups the
    cluster ranks above it.
    """
    check_feasible(allocation, groups, clusters)
    order = [g.id for g in groups]
    return _blocking_pair(
        assigned=dict(allocation.assigned),
        rosters=allocation.rosters,
        order=order,
        demand={g.id: g.demand for g in groups},
        capacity={c.id: c.capacity for c in clusters},
        user_prefs={g: prefs.up(g) for g in order},
        rank={c.id: {g: r for r, g in enumerate(prefs.cp(c.id))} for c in clusters},
    )


def topology_level(topology: Topology) -> LevelFn:
    """Geographic preference level for (group_id, cluster_id) pairs of a topology."""
    groups, clusters = topology.group_map(), topology.cluster_map()

    def _level(group_id: str, cluster_id: str) -> Optional[int]:
        return geo_level_of(groups[group_id], clusters[cluster_id])
    return _level


def preference_rank_histogram(allocation: Allocation, prefs: PreferenceTables, level_of: LevelFn) -> RankHistogram:
    levels = [0] * MAX_LEVEL
    for g, j in allocation.assigned.items():
        if j not in prefs.up(g):
            raise InvariantViolation(f"group {g} is assigned {j}, which is not on its preference list")
        lvl = level_of(g, j)
        if lvl is None or not 1 <= lvl <= MAX_LEVEL:
            raise InvariantViolation(f"pair ({g}, {j}) matches no preference level")
        levels[lvl - 1] += 1
    return RankHistogram(levels=levels, unallocated=len(allocation.unallocated))


def rank_comparison(greedy: RankHistogram, isoa: RankHistogram) -> List[Tuple[str, int, int, int]]:
    """(level, greedy, isoa, change) rows."""
    return [(lvl, g, i, i - g) for (lvl, g), (_, i) in zip(greedy.rows(), isoa.rows())]
