import logging
import random

import pytest

from src.edge.allocation import (
    bsearch_violation_start,
    check_feasible,
    greedy_allocate,
    is_stable,
    isoa_allocate,
    preference_rank_histogram,
    rank_comparison,
    topology_level,
)
from src.edge.errors import InfeasibleAllocationError, InvariantViolation, RosterFeasibleError
from src.edge.model import list_position_level
from src.models.schemas import Allocation, EdgeCluster, EdgeServer, PreferenceTables, UserGroup
from tests.oracles import (
    first_blocking_pair,
    linear_violation_start,
    random_instance,
    roster_demands,
    stable_allocations,
)


def _g(gid, demand):
    return UserGroup(id=gid, isp="i", city="x", county="y", state="z", population_weight=1.0, demand=demand)


def _c(cid, capacity):
    return EdgeCluster(id=cid, isp="i", city="x", county="y", state="z",
                       servers=[EdgeServer(id=f"{cid}-s0", bandwidth=capacity, cache=1)])


# ---------------- bSearch ----------------

def test_bsearch_examples():
    assert bsearch_violation_start([3, 5, 6, 6], 15, 0) == 2
    assert bsearch_violation_start([3, 5, 6], 7, 0) == 0


def test_bsearch_proposer_that_does_not_fit():
    # prefix through the proposer (index 2) is 14 > 10
    assert bsearch_violation_start([3, 5, 6, 1], 10, 2) == 1


def test_bsearch_rejects_feasible_roster():
    with pytest.raises(RosterFeasibleError):
        bsearch_violation_start([1, 2, 3], 6, 0)


def test_bsearch_matches_linear_scan():
    rng = random.Random(2024)
    for _ in range(1000):
        demands = [rng.randint(1, 9) for _ in range(rng.randint(1, 12))]
        cap = rng.randint(0, sum(demands) - 1)
        pos = rng.randrange(len(demands))
        expected = linear_violation_start(demands, cap)
        got = bsearch_violation_start(demands, cap, pos)
        # the search is anchored at the proposer, so both sides agree on the global answer
        assert got == expected


# ---------------- ISOA on the worked example ----------------

def test_isoa_worked_example(fig4_topology):
    t = fig4_topology
    alloc = isoa_allocate(t.groups, t.clusters, t.preferences)
    assert alloc.rosters == {"c1": ["g1", "g2", "g4"], "c2": ["g3"]}
    assert alloc.unallocated == []
    assert alloc.cluster_of("g2") == "c1"
    assert is_stable(alloc, t.groups, t.clusters, t.preferences) == (True, None)


def test_isoa_worked_example_histogram(fig4_topology):
    t = fig4_topology
    alloc = isoa_allocate(t.groups, t.clusters, t.preferences)
    hist = preference_rank_histogram(alloc, t.preferences, list_position_level(t.preferences))
    assert hist.levels == [3, 1, 0, 0, 0, 0]
    assert hist.unallocated == 0


def test_greedy_worked_example(fig4_topology):
    t = fig4_topology
    alloc = greedy_allocate(t.groups, t.clusters, t.preferences)
    assert alloc.rosters == {"c1": ["g1", "g3", "g4"], "c2": ["g2"]}
    check_feasible(alloc, t.groups, t.clusters)


def test_greedy_is_not_stable_on_worked_example(fig4_topology):
    t = fig4_topology
    alloc = greedy_allocate(t.groups, t.clusters, t.preferences)
    stable, pair = is_stable(alloc, t.groups, t.clusters, t.preferences)
    assert not stable
    assert pair == ("g3", "c2")


# ---------------- trivial instances ----------------

def test_single_group_single_cluster():
    prefs = PreferenceTables(user_prefs={"g": ["c"]}, cluster_prefs={"c": ["g"]})
    alloc = isoa_allocate([_g("g", 4)], [_c("c", 5)], prefs)
    assert alloc.assigned == {"g": "c"}
    hist = preference_rank_histogram(alloc, prefs, list_position_level(prefs))
    assert hist.levels[0] == 1


def test_group_larger_than_every_cluster_is_unallocated():
    prefs = PreferenceTables(user_prefs={"g": ["a", "b"]}, cluster_prefs={"a": ["g"], "b": ["g"]})
    alloc = isoa_allocate([_g("g", 50)], [_c("a", 10), _c("b", 20)], prefs)
    assert alloc.unallocated == ["g"]
    assert alloc.rosters == {"a": [], "b": []}


def test_greedy_empty_preference_list_is_unallocated():
    prefs = PreferenceTables(user_prefs={"g": []}, cluster_prefs={"c": ["g"]})
    alloc = greedy_allocate([_g("g", 1)], [_c("c", 5)], prefs)
    assert alloc.unallocated == ["g"]


def test_no_contention_everyone_at_first_choice():
    groups = [_g(f"g{i}", i + 1) for i in range(5)]
    prefs = PreferenceTables(user_prefs={g.id: ["c"] for g in groups}, cluster_prefs={"c": [g.id for g in groups]})
    clusters = [_c("c", 100)]
    for alloc in (isoa_allocate(groups, clusters, prefs), greedy_allocate(groups, clusters, prefs)):
        assert len(alloc.assigned) == 5
        assert preference_rank_histogram(alloc, prefs, list_position_level(prefs)).levels[0] == 5


def test_group_not_listed_by_cluster_is_rejected():
    prefs = PreferenceTables(user_prefs={"g": ["c"]}, cluster_prefs={"c": []})
    assert isoa_allocate([_g("g", 1)], [_c("c", 5)], prefs).unallocated == ["g"]


# ---------------- stability oracle ----------------

def test_is_stable_finds_definitional_blocking_pair():
    groups = [_g("g", 3)]
    clusters = [_c("best", 10), _c("second", 10)]
    prefs = PreferenceTables(user_prefs={"g": ["best", "second"]},
                             cluster_prefs={"best": ["g"], "second": ["g"]})
    alloc = Allocation(assigned={"g": "second"}, rosters={"best": [], "second": ["g"]})
    assert is_stable(alloc, groups, clusters, prefs) == (False, ("g", "best"))


def test_is_stable_vacuous_when_nobody_wants_anything():
    groups = [_g("a", 1), _g("b", 2)]
    prefs = PreferenceTables(user_prefs={"a": [], "b": []}, cluster_prefs={"c": ["a", "b"]})
    alloc = Allocation(rosters={"c": []}, unallocated=["a", "b"])
    assert is_stable(alloc, groups, [_c("c", 5)], prefs) == (True, None)


def test_is_stable_rejects_infeasible_input():
    groups = [_g("a", 4), _g("b", 4)]
    prefs = PreferenceTables(user_prefs={"a": ["c"], "b": ["c"]}, cluster_prefs={"c": ["a", "b"]})
    alloc = Allocation(assigned={"a": "c", "b": "c"}, rosters={"c": ["a", "b"]})
    with pytest.raises(InfeasibleAllocationError):
        is_stable(alloc, groups, [_c("c", 5)], prefs)


@pytest.mark.parametrize("seed", range(200))
def test_isoa_master_list_instances_are_feasible_and_stable(seed):
    groups, clusters, prefs = random_instance(seed, master_list=True)
    alloc = isoa_allocate(groups, clusters, prefs)
    check_feasible(alloc, groups, clusters)
    loads = roster_demands(alloc.rosters, {g.id: g.demand for g in groups})
    assert all(loads[c.id] <= c.capacity for c in clusters)
    assert first_blocking_pair(alloc, groups, clusters, prefs) is None
    assert is_stable(alloc, groups, clusters, prefs)[0]
    assert alloc.blocking_pair is None
    # rosters keep cluster-preference order
    for cid, roster in alloc.rosters.items():
        cp = prefs.cp(cid)
        assert roster == sorted(roster, key=cp.index)
    assert sorted(alloc.unallocated + list(alloc.assigned)) == sorted(g.id for g in groups)


@pytest.mark.parametrize("seed", range(60))
def test_master_list_instances_have_a_stable_allocation(seed):
    groups, clusters, prefs = random_instance(500 + seed, max_groups=6, max_clusters=3, master_list=True)
    assert stable_allocations(groups, clusters, prefs)
    alloc = isoa_allocate(groups, clusters, prefs)
    found = {g.id: alloc.assigned.get(g.id) for g in groups}
    assert found in stable_allocations(groups, clusters, prefs)


@pytest.mark.parametrize("seed", range(200))
def test_isoa_random_instances_flag_what_is_left_unstable(seed):
    groups, clusters, prefs = random_instance(seed)
    alloc = isoa_allocate(groups, clusters, prefs)
    check_feasible(alloc, groups, clusters)
    assert is_stable(alloc, groups, clusters, prefs) == (alloc.blocking_pair is None, alloc.blocking_pair)
    assert (alloc.blocking_pair is None) == (first_blocking_pair(alloc, groups, clusters, prefs) is None)


def _no_stable_instance():
    groups = [_g("a", 2), _g("b", 9), _g("x", 3)]
    clusters = [_c("c1", 10), _c("c2", 3)]
    prefs = PreferenceTables(user_prefs={"a": ["c2", "c1"], "b": ["c1"], "x": ["c1", "c2"]},
                             cluster_prefs={"c1": ["a", "b", "x"], "c2": ["x", "a"]})
    return groups, clusters, prefs


def test_sized_groups_can_have_no_stable_allocation():
    assert stable_allocations(*_no_stable_instance()) == []


def test_isoa_returns_flagged_feasible_allocation_when_none_is_stable(caplog):
    groups, clusters, prefs = _no_stable_instance()
    with caplog.at_level(logging.WARNING, logger="src.edge.allocation"):
        alloc = isoa_allocate(groups, clusters, prefs)
    check_feasible(alloc, groups, clusters)
    assert alloc.blocking_pair is not None
    assert is_stable(alloc, groups, clusters, prefs) == (False, alloc.blocking_pair)
    assert "no stable allocation" in caplog.text


def test_isoa_reoffers_cluster_after_eviction_frees_room():
    # a evicts b from c; x, turned away by c earlier, now fits beside a and leaves d
    groups = [_g("b", 9), _g("x", 3), _g("a", 2)]
    clusters = [_c("c", 10), _c("d", 5)]
    prefs = PreferenceTables(user_prefs={"b": ["c"], "x": ["c", "d"], "a": ["c"]},
                             cluster_prefs={"c": ["a", "b", "x"], "d": ["x"]})
    alloc = isoa_allocate(groups, clusters, prefs)
    assert alloc.rosters == {"c": ["a", "x"], "d": []}
    assert alloc.unallocated == ["b"]
    assert alloc.blocking_pair is None
    assert is_stable(alloc, groups, clusters, prefs) == (True, None)


@pytest.mark.parametrize("seed", range(50))
def test_greedy_random_instances_are_feasible(seed):
    groups, clusters, prefs = random_instance(seed)
    alloc = greedy_allocate(groups, clusters, prefs)
    check_feasible(alloc, groups, clusters)


# ---------------- histograms ----------------

def test_histogram_total_equals_group_count():
    for seed in range(30):
        groups, clusters, prefs = random_instance(seed)
        alloc = isoa_allocate(groups, clusters, prefs)
        hist = preference_rank_histogram(alloc, prefs, lambda g, c: min(prefs.up(g).index(c) + 1, 6))
        assert hist.total == len(groups)


def test_histogram_of_empty_allocation():
    hist = preference_rank_histogram(Allocation(unallocated=["a", "b"]), PreferenceTables(), lambda g, c: 1)
    assert hist.levels == [0] * 6 and hist.unallocated == 2


def test_histogram_rejects_unmatched_level(fig4_topology):
    t = fig4_topology
    alloc = isoa_allocate(t.groups, t.clusters, t.preferences)
    with pytest.raises(InvariantViolation):
        preference_rank_histogram(alloc, t.preferences, lambda g, c: None)


def test_geographic_levels_and_rank_comparison(fig4_topology):
    t = fig4_topology
    level = topology_level(t)
    isoa = preference_rank_histogram(isoa_allocate(t.groups, t.clusters, t.preferences), t.preferences, level)
    greedy = preference_rank_histogram(greedy_allocate(t.groups, t.clusters, t.preferences), t.preferences, level)
    # g2 is placed across ISPs in the same county under ISOA, g3 under greedy
    assert isoa.levels == [3, 0, 0, 0, 1, 0]
    assert greedy.levels == [3, 0, 0, 0, 1, 0]
    rows = rank_comparison(greedy, isoa)
    assert rows[0] == ("Lv.1", 3, 3, 0)
    assert rows[-1] == ("unallocated", 0, 0, 0)
