import json

import pytest

from src.edge.model import StreamKey, TimeWindow
from src.models.schemas import (
    EdgeCluster,
    EdgeServer,
    PreferenceTables,
    Topology,
    TopologyParams,
    TraceParams,
    UserGroup,
)


def _group(gid, isp, city, demand, weight=0.25):
    return UserGroup(id=gid, isp=isp, city=city, county="county-1", state="state-1",
                     population_weight=weight, demand=demand)


@pytest.fixture
def fig4_topology() -> Topology:
    """
    Four groups, two clusters (capacity 15 and 10). g1/g4 sit with c1, g2/g3
    with c2, all in one county.
    """
    groups = [
        _group("g1", "isp-a", "city-a", 3),
        _group("g2", "isp-b", "city-b", 5),
        _group("g3", "isp-b", "city-b", 6),
        _group("g4", "isp-a", "city-a", 6),
    ]
    clusters = [
        EdgeCluster(id="c1", isp="isp-a", city="city-a", county="county-1", state="state-1",
                    servers=[EdgeServer(id="c1-s00", bandwidth=15, cache=100)]),
        EdgeCluster(id="c2", isp="isp-b", city="city-b", county="county-1", state="state-1",
                    servers=[EdgeServer(id="c2-s00", bandwidth=10, cache=100)]),
    ]
    prefs = PreferenceTables(
        user_prefs={"g1": ["c1", "c2"], "g2": ["c2", "c1"], "g3": ["c2", "c1"], "g4": ["c1", "c2"]},
        cluster_prefs={"c1": ["g1", "g2", "g3", "g4"], "c2": ["g3", "g2", "g1", "g4"]},
    )
    return Topology(window_seconds=300, groups=groups, clusters=clusters, preferences=prefs)


@pytest.fixture
def window() -> TimeWindow:
    return TimeWindow(0, 300)


@pytest.fixture
def streams():
    return {
        "A": StreamKey("A", 2500),
        "B": StreamKey("B", 1000),
        "C": StreamKey("C", 400),
    }


@pytest.fixture
def small_config(tmp_path):
    """A small synthetic experiment config written to disk."""
    cfg = {
        "seed": 11,
        "topology": {"synth": TopologyParams(n_groups=12, n_clusters=4, n_isps=2, n_states=1,
                                             counties_per_state=2, cities_per_county=3).model_dump()},
        "trace": {"synth": TraceParams(n_channels=8, n_windows=4, peak_viewers=400).model_dump()},
        "strategies": ["plver", "abr", "cort"],
        "alphas": [0.4, 1.0],
        "workers": 2,
        "out_dir": str(tmp_path / "out"),
    }
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path
