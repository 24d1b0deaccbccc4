import json
import logging
import math

import pytest

from src.edge.errors import ConfigError, DataError, TopologyError, TraceParseError
from src.edge.model import (
    ChannelSample,
    SegmentSet,
    StreamKey,
    TimeWindow,
    TraceWindow,
    ViewershipSnapshot,
    apply_fluctuation,
    build_snapshot,
    channels_from_trace,
    distribute_viewers,
    group_demands,
    largest_remainder,
    level_of,
    list_position_level,
    load_topology,
    load_trace,
    mean_demands,
    save_topology,
    snap_bitrate,
    synthesize_topology,
    synthesize_trace,
    tier_weights,
    windows_from_records,
)
from src.models.schemas import EdgeCluster, EdgeServer, TopologyParams, TraceParams, TraceRecord, UserGroup


def _groups(n=3):
    return [UserGroup(id=f"g{i}", isp="i", city="c", county="k", state="s", population_weight=1.0)
            for i in range(n)]


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------- sizes and splits ----------------

def test_segment_set_size_is_bitrate_times_window():
    seg = SegmentSet(StreamKey("a", 400), TimeWindow(0, 300))
    assert seg.size == 120_000
    assert seg.segment_count(10) == 30


def test_largest_remainder_sums_exactly_and_breaks_ties_low():
    assert largest_remainder(10, [1, 1, 1]) == [4, 3, 3]
    assert largest_remainder(7, [0.5, 0.25, 0.25]) == [3, 2, 2]
    assert largest_remainder(0, [1, 2]) == [0, 0]
    for total in (1, 13, 999):
        assert sum(largest_remainder(total, [0.3, 0.3, 0.4, 0.0001])) == total


def test_largest_remainder_rejects_bad_input():
    with pytest.raises(DataError):
        largest_remainder(5, [])
    with pytest.raises(DataError):
        largest_remainder(-1, [1.0])


def test_snap_bitrate_picks_ladder_tier_below():
    assert snap_bitrate(800) == 750
    assert snap_bitrate(2500) == 2500
    assert snap_bitrate(6000) == 2500
    assert snap_bitrate(300) == 400


def test_tier_weights_restricts_and_falls_back_to_uniform():
    assert tier_weights(750) == {400: 1.0, 750: 1.0}
    assert tier_weights(750, {400: 0.0, 750: 0.0, 2500: 1.0}) == {400: 1.0, 750: 1.0}
    assert tier_weights(1000, {400: 2.0, 2500: 5.0}) == {400: 2.0, 750: 0.0, 1000: 0.0}


# ---------------- viewer distribution ----------------

def test_distribute_viewers_conserves_and_respects_broadcast():
    out = distribute_viewers(101, _groups(3), tier_weights(750), channel_id="ch")
    assert sum(out.values()) == 101
    assert {s.bitrate for (_, s) in out} <= {400, 750}
    assert all(n > 0 for n in out.values())


def test_distribute_viewers_edge_cases():
    assert distribute_viewers(0, _groups(2), {400: 1.0}, channel_id="ch") == {}
    with pytest.raises(DataError):
        distribute_viewers(5, [], {400: 1.0}, channel_id="ch")
    with pytest.raises(DataError):
        distribute_viewers(-1, _groups(1), {400: 1.0}, channel_id="ch")


def _snapshot():
    tw = TraceWindow(TimeWindow(0, 300), {"a": ChannelSample(2500, 100), "b": ChannelSample(400, 7)})
    return build_snapshot(tw, _groups(3))


def test_build_snapshot_and_group_demands():
    snap = _snapshot()
    assert snap.channel_totals() == {"a": 100, "b": 7}
    demands = group_demands(snap)
    assert sum(demands.values()) == sum(n * s.bitrate for (_, s), n in snap.counts.items())
    assert mean_demands([snap, snap]) == dict(sorted(demands.items()))


def test_apply_fluctuation_zero_is_identity():
    snap = _snapshot()
    same = apply_fluctuation(snap, 0.0, seed=1, groups=_groups(3))
    assert same.counts == snap.counts and same is not snap


def test_apply_fluctuation_scales_each_channel_up_or_down():
    snap = _snapshot()
    out = apply_fluctuation(snap, 0.5, seed=3, groups=_groups(3))
    totals = out.channel_totals()
    assert totals["a"] in (150, 50)
    assert totals["b"] in (11, 4)   # 10.5 and 3.5 round half up
    assert out.counts == apply_fluctuation(snap, 0.5, seed=3, groups=_groups(3)).counts


def test_apply_fluctuation_rejects_magnitude_out_of_range():
    with pytest.raises(ConfigError):
        apply_fluctuation(_snapshot(), 1.5, seed=0, groups=_groups(3))


# ---------------- preference levels ----------------

@pytest.mark.parametrize("isp,city,county,state,expected", [
    ("A", "c1", "k1", "s1", 1),
    ("A", "c2", "k1", "s1", 2),
    ("B", "c1", "k1", "s1", 3),
    ("A", "c3", "k2", "s1", 4),
    ("B", "c2", "k1", "s1", 5),
    ("B", "c3", "k2", "s1", 6),
    ("A", "c1", "k1", "s2", None),
])
def test_level_of(isp, city, county, state, expected):
    group = UserGroup(id="g", isp="A", city="c1", county="k1", state="s1", population_weight=1.0)
    cluster = EdgeCluster(id="c", isp=isp, city=city, county=county, state=state,
                          servers=[EdgeServer(id="s", bandwidth=1, cache=1)])
    assert level_of(group, cluster) == expected


def test_list_position_level(fig4_topology):
    lvl = list_position_level(fig4_topology.preferences)
    assert lvl("g2", "c2") == 1 and lvl("g2", "c1") == 2
    assert lvl("g2", "nowhere") is None


# ---------------- traces ----------------

def test_load_trace_buckets_windows_and_keeps_latest_sample(tmp_path):
    path = _write_lines(tmp_path / "t.jsonl", [
        json.dumps({"channel_id": "a", "t": 0, "bitrate_kbps": 2500, "viewers": 10}),
        json.dumps({"channel_id": "a", "t": 120, "bitrate_kbps": 2500, "viewers": 12}),
        "",
        json.dumps({"channel_id": "b", "t": 40, "bitrate_kbps": 750, "viewers": 3}),
        json.dumps({"channel_id": "a", "t": 300, "bitrate_kbps": 2500, "viewers": 20}),
    ])
    windows = load_trace(path, 300)
    assert [w.window.start for w in windows] == [0, 300]
    assert windows[0].channels["a"].viewers == 12
    assert set(windows[0].channels) == {"a", "b"}
    assert windows[1].total_viewers == 20


def test_load_trace_reports_json_error_position(tmp_path):
    path = _write_lines(tmp_path / "t.jsonl", [
        json.dumps({"channel_id": "a", "t": 0, "bitrate_kbps": 400, "viewers": 1}),
        '{"channel_id": "a", "t": 5,',
    ])
    with pytest.raises(TraceParseError) as exc:
        load_trace(path, 300)
    assert exc.value.line == 2
    assert exc.value.column is not None
    assert "line 2" in str(exc.value)


def test_load_trace_reports_field_errors(tmp_path):
    path = _write_lines(tmp_path / "t.jsonl", [
        json.dumps({"channel_id": "a", "t": 0, "bitrate_kbps": 400, "viewers": -4}),
    ])
    with pytest.raises(TraceParseError, match="viewers"):
        load_trace(path, 300)


def test_load_trace_rejects_non_increasing_timestamps(tmp_path):
    path = _write_lines(tmp_path / "t.jsonl", [
        json.dumps({"channel_id": "a", "t": 10, "bitrate_kbps": 400, "viewers": 1}),
        json.dumps({"channel_id": "a", "t": 10, "bitrate_kbps": 400, "viewers": 2}),
    ])
    with pytest.raises(TraceParseError) as exc:
        load_trace(path, 300)
    assert exc.value.line == 2


def test_load_trace_snaps_off_ladder_bitrate(tmp_path, caplog):
    path = _write_lines(tmp_path / "t.jsonl", [
        json.dumps({"channel_id": "a", "t": 0, "bitrate_kbps": 1200, "viewers": 1}),
    ])
    with caplog.at_level(logging.WARNING):
        windows = load_trace(path, 300)
    assert windows[0].channels["a"].bitrate_kbps == 1000
    assert "snapped" in caplog.text


def test_load_trace_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_trace(tmp_path / "nope.jsonl", 300)


def test_channels_from_trace_joins_contiguous_windows():
    records = [
        TraceRecord(channel_id="a", t=0, bitrate_kbps=750, viewers=1),
        TraceRecord(channel_id="a", t=300, bitrate_kbps=1000, viewers=1),
        TraceRecord(channel_id="a", t=900, bitrate_kbps=750, viewers=1),
    ]
    (ch,) = channels_from_trace(windows_from_records(records, 300))
    assert ch.broadcast_bitrate == 1000
    assert ch.sessions == [(0, 600), (900, 1200)]


def test_synthesize_trace_is_deterministic_and_on_ladder():
    params = TraceParams(n_channels=6, n_windows=5, peak_viewers=500)
    a = synthesize_trace(params, seed=4)
    assert a == synthesize_trace(params, seed=4)
    assert len(a) == 30
    assert {r.bitrate_kbps for r in a} <= {400, 750, 1000, 2500}
    assert a != synthesize_trace(params, seed=5)


def test_synthesize_trace_random_sessions_stay_in_range():
    params = TraceParams(n_channels=10, n_windows=6, always_on=False)
    for r in synthesize_trace(params, seed=2):
        assert 0 <= r.t < 6 * params.window_seconds


# ---------------- topology ----------------

def _params(**kw):
    base = dict(n_groups=20, n_clusters=6, n_isps=2, n_states=1, counties_per_state=2, cities_per_county=6,
                target_demand_kbps=400_000)
    base.update(kw)
    return TopologyParams(**base)


def test_synthesize_topology_sizes_servers_to_target():
    topo = synthesize_topology(_params(), seed=9)
    assert len(topo.groups) == 20 and len(topo.clusters) == 6
    assert sum(c.capacity for c in topo.clusters) >= 400_000
    assert sum(g.demand for g in topo.groups) == 400_000
    for c in topo.clusters:
        assert c.servers
        for s in c.servers:
            b_hat = s.bandwidth * topo.window_seconds
            assert b_hat / 2 < s.cache < 2 * b_hat


def test_synthesize_topology_preferences_follow_levels():
    topo = synthesize_topology(_params(), seed=9)
    groups, clusters = topo.group_map(), topo.cluster_map()
    for gid, up in topo.preferences.user_prefs.items():
        levels = [level_of(groups[gid], clusters[c]) for c in up]
        assert None not in levels
        assert levels == sorted(levels)


def test_synthesize_topology_deterministic_and_round_trips(tmp_path):
    topo = synthesize_topology(_params(), seed=3)
    assert topo == synthesize_topology(_params(), seed=3)
    path = save_topology(tmp_path / "topo.json", topo)
    assert load_topology(path) == topo
    assert '"uP"' in path.read_text()


def test_synthesize_topology_rejects_impossible_grid():
    with pytest.raises(ConfigError):
        synthesize_topology(_params(n_groups=100), seed=1)


def test_load_topology_invalid_reference(tmp_path, fig4_topology):
    data = json.loads(fig4_topology.model_dump_json(by_alias=True))
    data["preferences"]["uP"]["g1"].append("c9")
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(TopologyError, match="c9"):
        load_topology(path)


def test_load_topology_rejects_population_weights_not_summing_to_one(tmp_path, fig4_topology):
    data = json.loads(fig4_topology.model_dump_json(by_alias=True))
    data["groups"][0]["population_weight"] = 0.3
    path = tmp_path / "heavy.json"
    path.write_text(json.dumps(data))
    with pytest.raises(TopologyError, match="sum to 1.05"):
        load_topology(path)


def test_synthesized_population_weights_sum_to_one():
    topo = synthesize_topology(_params(), seed=4)
    assert math.isclose(math.fsum(g.population_weight for g in topo.groups), 1.0, abs_tol=1e-9)


def test_snapshot_helpers_ignore_zero_cells():
    snap = ViewershipSnapshot(TimeWindow(0, 10), {("g", StreamKey("a", 400)): 3}, {"a": 400, "b": 750})
    assert snap.channel_totals() == {"a": 3, "b": 0}
    assert snap.streams() == [StreamKey("a", 400)]
    assert snap.total_kb() == 3 * 400 * 10
