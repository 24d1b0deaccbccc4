# src/edge/model.py
"""
Domain values for one simulated market: the capacitated group/cluster
topology, windowed channel traces, and per-window viewership snapshots.

Units used throughout the package:
  bandwidth / bitrate  Kbps
  cache / traffic      Kb  (a stream of b Kbps over a window of T s is b*T Kb)
  time                 s
"""
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from src.edge import store
from src.edge.config import settings
from src.edge.errors import ConfigError, DataError, TopologyError, TraceParseError
from src.models.schemas import (
    Channel,
    EdgeCluster,
    EdgeServer,
    PreferenceTables,
    Topology,
    TopologyParams,
    TraceParams,
    TraceRecord,
    UserGroup,
)

log = logging.getLogger(__name__)


# ---------------------- value types ----------------------

class StreamKey(NamedTuple):
    """One bitrate version of one live channel."""
    channel_id: str
    bitrate: int


@dataclass(frozen=True)
class TimeWindow:
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class SegmentSet:
    """Segments a stream produces over one window."""
    stream: StreamKey
    window: TimeWindow

    @property
    def size(self) -> int:
        return segment_size(self.stream, self.window.length)

    def segment_count(self, segment_seconds: int) -> int:
        return math.ceil(self.window.length / segment_seconds)


def segment_size(stream: StreamKey, window_seconds: int) -> int:
    # constant bitrate over the window
    return stream.bitrate * window_seconds


@dataclass(frozen=True)
class ChannelSample:
    bitrate_kbps: int
    viewers: int


@dataclass(frozen=True)
class TraceWindow:
    window: TimeWindow
    channels: Mapping[str, ChannelSample]

    @property
    def total_viewers(self) -> int:
        return sum(c.viewers for c in self.channels.values())


@dataclass(frozen=True)
class ViewershipSnapshot:
    window: TimeWindow
    counts: Mapping[Tuple[str, StreamKey], int]
    channel_bitrates: Mapping[str, int]

    def channel_totals(self) -> Dict[str, int]:
        totals: Dict[str, int] = {ch: 0 for ch in self.channel_bitrates}
        for (_, stream), n in self.counts.items():
            totals[stream.channel_id] = totals.get(stream.channel_id, 0) + n
        return totals

    def streams(self) -> List[StreamKey]:
        return sorted({s for (_, s), n in self.counts.items() if n > 0})

    def total_units(self) -> int:
        return sum(self.counts.values())

    def total_kb(self) -> int:
        return sum(n * s.bitrate for (_, s), n in self.counts.items()) * self.window.length


# ---------------------- ladder helpers ----------------------

def snap_bitrate(bitrate: int, ladder: Sequence[int] = settings.BITRATE_LADDER) -> int:
    """
    Nearest ladder value at or below `bitrate`; below the lowest tier snaps up to it.
    """
    tiers = sorted(ladder)
    below = [t for t in tiers if t <= bitrate]
    return below[-1] if below else tiers[0]


def tiers_for(broadcast_bitrate: int, ladder: Sequence[int] = settings.BITRATE_LADDER) -> List[int]:
    return [t for t in sorted(ladder) if t <= broadcast_bitrate]


def tier_weights(broadcast_bitrate: int,
                 tier_mix: Optional[Mapping[int, float]] = None,
                 ladder: Sequence[int] = settings.BITRATE_LADDER) -> Dict[int, float]:
    """
    Restrict a tier mix to the tiers a channel can serve. Falls back to uniform
    when the mix puts no weight on any allowed tier.
    """
    allowed = tiers_for(broadcast_bitrate, ladder)
    if tier_mix:
        mix = {t: float(tier_mix.get(t, 0.0)) for t in allowed}
        if sum(mix.values()) > 0:
            return mix
    return {t: 1.0 for t in allowed}


# ---------------------- integer splits ----------------------

def largest_remainder(total: int, weights: Sequence[float]) -> List[int]:
    """
    Split `total` proportionally to `weights`; floors first, then one extra unit
    to the largest fractional remainders, ties to the lower index. Sums exactly.
    """
    if not len(weights):
        raise DataError("cannot split over an empty weight list")
    if total < 0:
        raise DataError(f"cannot split a negative total ({total})")
    w = np.asarray(weights, dtype=float)
    if (w < 0).any():
        raise DataError("weights must be non-negative")
    if total == 0 or w.sum() <= 0:
        return [0] * len(w)
    quotas = total * w / w.sum()
    base = np.floor(quotas + 1e-9).astype(np.int64)
    rem = quotas - base
    short = int(total - base.sum())
    idx = np.arange(len(w))
    if short > 0:
        order = np.lexsort((idx, -rem))
        base[order[:short]] += 1
    elif short < 0:
        order = np.lexsort((-idx, rem))
        for i in order:
            if short == 0:
                break
            if base[i] > 0:
                base[i] -= 1
                short += 1
    return [int(x) for x in base]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------- viewer distribution ----------------------

def distribute_viewers(viewers: int,
                       groups: Sequence[UserGroup],
                       tier_mix: Mapping[int, float],
                       *,
                       channel_id: str) -> Dict[Tuple[str, StreamKey], int]:
    """
    Spread a channel's viewers over user groups by population weight, then over
    bitrate tiers inside each group. Zero cells are omitted.
    """
    if not groups:
        raise DataError("cannot distribute viewers over an empty group list")
    if viewers < 0:
        raise DataError(f"channel {channel_id}: negative viewer count {viewers}")
    tiers = sorted(tier_mix)
    tier_w = [tier_mix[t] for t in tiers]
    per_group = largest_remainder(viewers, [g.population_weight for g in groups])
    out: Dict[Tuple[str, StreamKey], int] = {}
    for g, n in zip(groups, per_group):
        if n == 0:
            continue
        for tier, k in zip(tiers, largest_remainder(n, tier_w)):
            if k:
                out[(g.id, StreamKey(channel_id, tier))] = k
    return out


def build_snapshot(trace_window: TraceWindow,
                   groups: Sequence[UserGroup],
                   tier_mix: Optional[Mapping[int, float]] = None,
                   ladder: Sequence[int] = settings.BITRATE_LADDER) -> ViewershipSnapshot:
    counts: Dict[Tuple[str, StreamKey], int] = {}
    bitrates: Dict[str, int] = {}
    for ch in sorted(trace_window.channels):
        sample = trace_window.channels[ch]
        bitrates[ch] = sample.bitrate_kbps
        mix = tier_weights(sample.bitrate_kbps, tier_mix, ladder)
        counts.update(distribute_viewers(sample.viewers, groups, mix, channel_id=ch))
    return ViewershipSnapshot(window=trace_window.window, counts=counts, channel_bitrates=bitrates)


def apply_fluctuation(snapshot: ViewershipSnapshot,
                      magnitude: float,
                      seed: int | Sequence[int],
                      groups: Sequence[UserGroup],
                      tier_mix: Optional[Mapping[int, float]] = None,
                      ladder: Sequence[int] = settings.BITRATE_LADDER) -> ViewershipSnapshot:
    """
    Scale every channel's audience by (1+f) or (1-f), sign drawn per channel,
    and redistribute. Returns a new snapshot.
    """
    if not 0.0 <= magnitude <= 1.0:
        raise ConfigError(f"fluctuation magnitude {magnitude} outside [0, 1]")
    if magnitude == 0.0:
        return ViewershipSnapshot(snapshot.window, dict(snapshot.counts), dict(snapshot.channel_bitrates))

    rng = np.random.default_rng(seed)
    totals = snapshot.channel_totals()
    counts: Dict[Tuple[str, StreamKey], int] = {}
    for ch in sorted(snapshot.channel_bitrates):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        new_total = round_half_up(totals.get(ch, 0) * (1.0 + sign * magnitude))
        mix = tier_weights(snapshot.channel_bitrates[ch], tier_mix, ladder)
        counts.update(distribute_viewers(new_total, groups, mix, channel_id=ch))
    return ViewershipSnapshot(snapshot.window, counts, dict(snapshot.channel_bitrates))


def group_demands(snapshot: ViewershipSnapshot) -> Dict[str, int]:
    """d_i for every group present in the snapshot (Kbps)."""
    out: Dict[str, int] = defaultdict(int)
    for (gid, stream), n in snapshot.counts.items():
        out[gid] += n * stream.bitrate
    return dict(out)


def mean_demands(snapshots: Sequence[ViewershipSnapshot]) -> Dict[str, int]:
    acc: Dict[str, int] = defaultdict(int)
    for snap in snapshots:
        for gid, d in group_demands(snap).items():
            acc[gid] += d
    n = max(1, len(snapshots))
    return {gid: round_half_up(total / n) for gid, total in sorted(acc.items())}


def with_demand(groups: Sequence[UserGroup], demands: Mapping[str, int]) -> List[UserGroup]:
    return [g.model_copy(update={"demand": int(demands.get(g.id, 0))}) for g in groups]


# ---------------------- preference levels ----------------------

def level_of(group: UserGroup, cluster: EdgeCluster) -> Optional[int]:
    """
    Preference level (1 best .. 6) of a cluster for a group, None if the pair
    matches no level.
    """
    same_isp = group.isp == cluster.isp
    same_state = group.state == cluster.state
    same_county = same_state and group.county == cluster.county
    same_city = same_county and group.city == cluster.city
    if same_isp and same_city:
        return 1
    if same_isp and same_county:
        return 2
    if same_city:
        return 3
    if same_isp and same_state:
        return 4
    if same_county:
        return 5
    if same_state:
        return 6
    return None


def list_position_level(prefs: PreferenceTables):
    """Level = 1-based position in the group's uP list (for hand-built instances)."""
    def _level(group_id: str, cluster_id: str) -> Optional[int]:
        up = prefs.up(group_id)
        return up.index(cluster_id) + 1 if cluster_id in up else None
    return _level


def build_preferences(groups: Sequence[UserGroup],
                      clusters: Sequence[EdgeCluster],
                      rng: np.random.Generator,
                      max_preferences: Optional[int] = None) -> PreferenceTables:
    user_prefs: Dict[str, List[str]] = {}
    for g in groups:
        tie = rng.permutation(len(clusters))
        ranked = []
        for k, c in enumerate(clusters):
            lvl = level_of(g, c)
            if lvl is not None:
                ranked.append((lvl, int(tie[k]), c.id))
        ranked.sort()
        user_prefs[g.id] = [cid for _, _, cid in ranked[:max_preferences]]

    cluster_prefs: Dict[str, List[str]] = {}
    for c in clusters:
        tie = rng.permutation(len(groups))
        ranked = []
        for k, g in enumerate(groups):
            lvl = level_of(g, c)
            if lvl is not None:
                ranked.append((lvl, -g.demand, int(tie[k]), g.id))
        ranked.sort()
        cluster_prefs[c.id] = [gid for *_, gid in ranked[:max_preferences]]

    return PreferenceTables(user_prefs=user_prefs, cluster_prefs=cluster_prefs)


# ---------------------- topology synthesis ----------------------

def _synthesize_groups(params: TopologyParams, rng: np.random.Generator) -> List[UserGroup]:
    cities = []
    for s in range(params.n_states):
        for c in range(params.counties_per_state):
            for k in range(params.cities_per_county):
                cities.append((f"city-{s}-{c}-{k}", f"county-{s}-{c}", f"state-{s}"))
    isps = [f"isp-{i}" for i in range(params.n_isps)]
    combos = [(city, isp) for city in range(len(cities)) for isp in range(len(isps))]
    if params.n_groups > len(combos):
        raise ConfigError(
            f"n_groups={params.n_groups} exceeds the {len(combos)} (city, ISP) combinations; "
            "raise n_states/counties_per_state/cities_per_county/n_isps"
        )

    city_pop = rng.lognormal(mean=0.0, sigma=1.0, size=len(cities))
    isp_share = rng.dirichlet(np.ones(len(isps)), size=len(cities))
    chosen = np.sort(rng.choice(len(combos), size=params.n_groups, replace=False))
    raw = np.array([city_pop[combos[i][0]] * isp_share[combos[i][0], combos[i][1]] for i in chosen])
    weights = raw / raw.sum()

    groups = []
    for n, (i, w) in enumerate(zip(chosen, weights)):
        city_idx, isp_idx = combos[i]
        city, county, state = cities[city_idx]
        groups.append(UserGroup(id=f"g{n:04d}", isp=isps[isp_idx], city=city, county=county,
                                state=state, population_weight=float(w)))
    return groups


def _cluster_sites(groups: Sequence[UserGroup], n_clusters: int,
                   rng: np.random.Generator) -> List[Tuple[str, str, str, str]]:
    # edge clusters sit at the (city, ISP) combinations with the most viewers
    by_weight = sorted(range(len(groups)), key=lambda i: (-groups[i].population_weight, i))
    sites = [groups[i] for i in sorted(by_weight[:n_clusters])]
    out = [(g.isp, g.city, g.county, g.state) for g in sites]
    while len(out) < n_clusters:
        g = groups[int(rng.integers(len(groups)))]
        out.append((g.isp, g.city, g.county, g.state))
    return out


def deploy_servers(sites: Sequence[Tuple[str, str, str, str]],
                   target_kbps: int,
                   bandwidth_classes_kbps: Sequence[int],
                   window_seconds: int,
                   rng: np.random.Generator) -> List[EdgeCluster]:
    """
    Append servers to clusters round-robin, bandwidth class drawn per server,
    until Σ bandwidth ≥ target and every cluster has a server.
    Cache is drawn strictly inside (0.5·b̂, 2·b̂) with b̂ = bandwidth·T.
    """
    if not bandwidth_classes_kbps:
        raise ConfigError("at least one server bandwidth class is required")
    if target_kbps <= 0:
        raise ConfigError(f"target demand must be positive, got {target_kbps}")

    servers: List[List[EdgeServer]] = [[] for _ in sites]
    total, k = 0, 0
    while total < target_kbps or k < len(sites):
        ci = k % len(sites)
        bw = int(bandwidth_classes_kbps[int(rng.integers(len(bandwidth_classes_kbps)))])
        b_hat = bw * window_seconds
        lo, hi = math.ceil(b_hat / 2), 2 * b_hat
        cache = int(rng.integers(lo + 1, hi))
        servers[ci].append(EdgeServer(id=f"c{ci:03d}-s{len(servers[ci]):02d}", bandwidth=bw, cache=cache))
        total += bw
        k += 1

    return [
        EdgeCluster(id=f"c{i:03d}", isp=isp, city=city, county=county, state=state, servers=srv)
        for i, ((isp, city, county, state), srv) in enumerate(zip(sites, servers))
    ]


def synthesize_topology(params: TopologyParams, seed: int,
                        demands: Optional[Mapping[str, int]] = None) -> Topology:
    """
    Deterministic synthetic market: groups on a state/county/city/ISP grid,
    clusters at the busiest sites, servers sized so Σ bandwidth reaches the
    target demand, and level-based preference lists on both sides.
    """
    if not params.bandwidth_classes_kbps:
        raise ConfigError("at least one server bandwidth class is required")
    rng = np.random.default_rng(seed)
    groups = _synthesize_groups(params, rng)

    if demands is not None:
        groups = with_demand(groups, demands)
    elif params.target_demand_kbps is not None:
        split = largest_remainder(params.target_demand_kbps, [g.population_weight for g in groups])
        groups = with_demand(groups, {g.id: d for g, d in zip(groups, split)})
    target = params.target_demand_kbps if params.target_demand_kbps is not None else sum(g.demand for g in groups)
    if target <= 0:
        raise ConfigError(f"target demand must be positive, got {target}")

    sites = _cluster_sites(groups, params.n_clusters, rng)
    clusters = deploy_servers(sites, target, params.bandwidth_classes_kbps, params.window_seconds, rng)
    prefs = build_preferences(groups, clusters, rng, params.max_preferences)
    log.info(f"[topology] groups={len(groups)} clusters={len(clusters)} "
             f"servers={sum(len(c.servers) for c in clusters)} bandwidth={sum(c.capacity for c in clusters)}Kbps "
             f"target={target}Kbps")
    return Topology(window_seconds=params.window_seconds, groups=groups, clusters=clusters, preferences=prefs)


def synthesize_groups(params: TopologyParams, seed: int) -> List[UserGroup]:
    """The group half of synthesize_topology (same seed, same groups)."""
    return _synthesize_groups(params, np.random.default_rng(seed))


def save_topology(path: str | Path, topology: Topology) -> Path:
    return store.write_model(path, topology)


def load_topology(path: str | Path) -> Topology:
    try:
        return Topology.model_validate_json(store.read_text(path))
    except ValidationError as e:
        raise TopologyError(f"{path}: {_first_error(e)}") from e


# ---------------------- trace ingestion ----------------------

def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    where = ".".join(str(x) for x in err.get("loc", ())) or "record"
    return f"{where}: {err.get('msg')}"


def _windowize(numbered: Iterable[Tuple[int, TraceRecord]],
               window_seconds: int,
               ladder: Sequence[int]) -> List[TraceWindow]:
    last_t: Dict[str, int] = {}
    buckets: Dict[int, Dict[str, ChannelSample]] = defaultdict(dict)
    for line, rec in numbered:
        prev = last_t.get(rec.channel_id)
        if prev is not None and rec.t <= prev:
            raise TraceParseError(f"timestamp {rec.t} for channel {rec.channel_id} does not increase "
                                  f"(previous {prev})", line)
        last_t[rec.channel_id] = rec.t
        bitrate = snap_bitrate(rec.bitrate_kbps, ladder)
        if bitrate != rec.bitrate_kbps:
            log.warning(f"[trace] line {line}: channel {rec.channel_id} bitrate {rec.bitrate_kbps} "
                        f"is off the ladder; snapped to {bitrate}")
        start = (rec.t // window_seconds) * window_seconds
        # later samples in the same window replace earlier ones
        buckets[start][rec.channel_id] = ChannelSample(bitrate, rec.viewers)
    return [
        TraceWindow(TimeWindow(start, window_seconds), dict(sorted(buckets[start].items())))
        for start in sorted(buckets)
    ]


def load_trace(path: str | Path,
               window_seconds: int = settings.WINDOW_SECONDS,
               ladder: Sequence[int] = settings.BITRATE_LADDER) -> List[TraceWindow]:
    """
    Parse a JSONL trace ({channel_id, t, bitrate_kbps, viewers} per line) into
    windows of `window_seconds`. Errors name the offending line.
    """
    def _records():
        for line, raw in store.iter_jsonl_lines(path):
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise TraceParseError(e.msg, line, e.colno) from e
            if not isinstance(obj, dict):
                raise TraceParseError("expected a JSON object", line, 1)
            try:
                yield line, TraceRecord.model_validate(obj)
            except ValidationError as e:
                raise TraceParseError(_first_error(e), line) from e

    windows = _windowize(_records(), window_seconds, ladder)
    log.info(f"[trace] {path}: windows={len(windows)} channels={len({c for w in windows for c in w.channels})}")
    return windows


def windows_from_records(records: Sequence[TraceRecord],
                         window_seconds: int = settings.WINDOW_SECONDS,
                         ladder: Sequence[int] = settings.BITRATE_LADDER) -> List[TraceWindow]:
    return _windowize(enumerate(records, 1), window_seconds, ladder)


def write_trace(path: str | Path, records: Iterable[TraceRecord]) -> int:
    return store.write_jsonl(path, (r.model_dump() for r in records))


def channels_from_trace(windows: Sequence[TraceWindow]) -> List[Channel]:
    """Broadcast bitrate (highest seen) and online sessions of every channel."""
    seen: Dict[str, List[Tuple[TimeWindow, int]]] = defaultdict(list)
    for w in windows:
        for ch, sample in w.channels.items():
            seen[ch].append((w.window, sample.bitrate_kbps))
    out = []
    for ch in sorted(seen):
        sessions: List[Tuple[int, int]] = []
        for win, _ in seen[ch]:
            if sessions and sessions[-1][1] == win.start:
                sessions[-1] = (sessions[-1][0], win.end)
            else:
                sessions.append((win.start, win.end))
        out.append(Channel(id=ch, broadcast_bitrate=max(b for _, b in seen[ch]), sessions=sessions))
    return out


# ---------------------- trace synthesis ----------------------

_DEFAULT_BITRATE_WEIGHTS = {400: 0.15, 750: 0.2, 1000: 0.25, 2500: 0.4}


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=float)
    w = ranks ** -exponent
    return w / w.sum()


def synthesize_trace(params: TraceParams, seed: int,
                     ladder: Sequence[int] = settings.BITRATE_LADDER) -> List[TraceRecord]:
    """
    Zipf-popular channels with one session each, a daily viewer curve and
    lognormal per-window noise. One record per online channel per window.
    """
    rng = np.random.default_rng(seed)
    n = params.n_channels
    popularity = zipf_weights(n, params.zipf_exponent)[rng.permutation(n)]

    bw = params.bitrate_weights or {t: _DEFAULT_BITRATE_WEIGHTS.get(t, 1.0) for t in ladder}
    tiers = sorted(bw)
    p = np.array([bw[t] for t in tiers], dtype=float)
    bitrates = rng.choice(tiers, size=n, p=p / p.sum())

    if params.always_on:
        sessions = [(0, params.n_windows) for _ in range(n)]
    else:
        sessions = []
        for _ in range(n):
            start = int(rng.integers(0, params.n_windows))
            sessions.append((start, start + int(rng.integers(1, params.n_windows - start + 1))))

    records: List[TraceRecord] = []
    for w in range(params.n_windows):
        t = params.start_time + w * params.window_seconds
        day_phase = 2 * math.pi * (t - params.start_time) / 86400.0
        total = params.peak_viewers * (1.0 - params.diurnal_amplitude * (1.0 - math.cos(day_phase)) / 2.0)
        online = [i for i in range(n) if sessions[i][0] <= w < sessions[i][1]]
        if not online:
            continue
        share = popularity[online] / popularity[online].sum()
        noise = rng.lognormal(0.0, params.noise_sigma, size=len(online)) if params.noise_sigma else np.ones(len(online))
        viewers = np.rint(total * share * noise).astype(np.int64)
        for i, v in zip(online, viewers):
            records.append(TraceRecord(channel_id=f"ch{i:03d}", t=t, bitrate_kbps=int(bitrates[i]), viewers=int(v)))
    log.info(f"[trace] synthesized channels={n} windows={params.n_windows} records={len(records)}")
    return records
