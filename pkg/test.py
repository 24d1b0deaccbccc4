import sys
from dotenv import load_dotenv
load_dotenv()

from src.edge.allocation import greedy_allocate, is_stable, isoa_allocate
from src.edge.model import StreamKey, TimeWindow
from src.edge.replication import DemandItem, plver_schedule
from src.models.schemas import EdgeCluster, EdgeServer, PreferenceTables, UserGroup


def group(gid, isp, city, demand):
    return UserGroup(id=gid, isp=isp, city=city, county="k", state="s", population_weight=0.25, demand=demand)


def cluster(cid, isp, city, bandwidth, cache=100):
    return EdgeCluster(id=cid, isp=isp, city=city, county="k", state="s",
                       servers=[EdgeServer(id=f"{cid}-s00", bandwidth=bandwidth, cache=cache)])


def four_groups():
    groups = [group("g1", "a", "x", 3), group("g2", "b", "y", 5), group("g3", "b", "y", 6), group("g4", "a", "x", 6)]
    clusters = [cluster("c1", "a", "x", 15), cluster("c2", "b", "y", 10)]
    prefs = PreferenceTables(
        user_prefs={"g1": ["c1", "c2"], "g2": ["c2", "c1"], "g3": ["c2", "c1"], "g4": ["c1", "c2"]},
        cluster_prefs={"c1": ["g1", "g2", "g3", "g4"], "c2": ["g3", "g2", "g1", "g4"]},
    )
    return groups, clusters, prefs


if __name__ == "__main__":
    groups, clusters, prefs = four_groups()
    ok = True
    for name, fn in (("isoa", isoa_allocate), ("greedy", greedy_allocate)):
        alloc = fn(groups, clusters, prefs)
        stable, pair = is_stable(alloc, groups, clusters, prefs)
        print(f"{name:7s} rosters={alloc.rosters} stable={stable}" + (f" blocking={pair}" if pair else ""))
        if name == "isoa":
            ok &= alloc.rosters == {"c1": ["g1", "g2", "g4"], "c2": ["g3"]} and stable

    edge = cluster("c", "a", "x", 10_000, cache=1_100_000)
    demand = [DemandItem("g", StreamKey("A", 2500), 3), DemandItem("g", StreamKey("B", 1000), 4),
              DemandItem("g", StreamKey("C", 400), 2)]
    sched = plver_schedule(edge, demand, 1.0, TimeWindow(0, 300))
    cached = sorted(s.channel_id for s in sched.cached["c-s00"])
    print(f"plver   cached={cached} served={sched.served_kbps()} Kbps")
    ok &= sched.served_kbps() == 9500

    if not ok:
        print("[ERR] smoke run does not match the worked examples"); sys.exit(1)
