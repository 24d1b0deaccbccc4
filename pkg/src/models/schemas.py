from __future__ import annotations
import math
from typing import Dict, List, Literal, Optional, Tuple
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

from src.edge.config import settings

StrategyName = Literal["plver", "abr", "cort"]
STRATEGIES: Tuple[str, ...] = ("plver", "abr", "cort")


# ---------------- topology ----------------

class UserGroup(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    isp: str
    city: str
    county: str
    state: str
    population_weight: float = Field(ge=0.0, description="Share of viewers routed to this group")
    demand: int = Field(default=0, ge=0, description="Aggregate live traffic demand d_i (Kbps)")


class EdgeServer(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    bandwidth: int = Field(gt=0, description="B_j (Kbps)")
    cache: int = Field(gt=0, description="c_j (Kb)")


class EdgeCluster(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    isp: str
    city: str
    county: str
    state: str
    servers: List[EdgeServer] = Field(min_length=1)

    @computed_field
    @property
    def capacity(self) -> int:
        # C_j, always derived from the member servers
        return sum(s.bandwidth for s in self.servers)


class PreferenceTables(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    user_prefs: Dict[str, List[str]] = Field(default_factory=dict, alias="uP")
    cluster_prefs: Dict[str, List[str]] = Field(default_factory=dict, alias="cP")

    @field_validator("user_prefs", "cluster_prefs")
    @classmethod
    def _no_duplicates(cls, v: Dict[str, List[str]]) -> Dict[str, List[str]]:
        for owner, prefs in v.items():
            if len(set(prefs)) != len(prefs):
                raise ValueError(f"duplicate entries in preference list of {owner}")
        return v

    def up(self, group_id: str) -> List[str]:
        return self.user_prefs.get(group_id, [])

    def cp(self, cluster_id: str) -> List[str]:
        return self.cluster_prefs.get(cluster_id, [])


class Topology(BaseModel):
    window_seconds: int = Field(default=settings.WINDOW_SECONDS, gt=0)
    groups: List[UserGroup] = Field(min_length=1)
    clusters: List[EdgeCluster] = Field(min_length=1)
    preferences: PreferenceTables

    @model_validator(mode="after")
    def _references_exist(self) -> "Topology":
        gids = [g.id for g in self.groups]
        cids = [c.id for c in self.clusters]
        if len(set(gids)) != len(gids):
            raise ValueError("duplicate user group ids")
        if len(set(cids)) != len(cids):
            raise ValueError("duplicate edge cluster ids")
        sids = [s.id for c in self.clusters for s in c.servers]
        if len(set(sids)) != len(sids):
            raise ValueError("duplicate edge server ids")
        total = math.fsum(g.population_weight for g in self.groups)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"group population weights sum to {total:.12g}, expected 1")
        gset, cset = set(gids), set(cids)
        for g, prefs in self.preferences.user_prefs.items():
            if g not in gset:
                raise ValueError(f"uP references unknown group {g}")
            missing = [c for c in prefs if c not in cset]
            if missing:
                raise ValueError(f"uP[{g}] references unknown clusters {missing}")
        for c, prefs in self.preferences.cluster_prefs.items():
            if c not in cset:
                raise ValueError(f"cP references unknown cluster {c}")
            missing = [g for g in prefs if g not in gset]
            if missing:
                raise ValueError(f"cP[{c}] references unknown groups {missing}")
        return self

    def group_map(self) -> Dict[str, UserGroup]:
        return {g.id: g for g in self.groups}

    def cluster_map(self) -> Dict[str, EdgeCluster]:
        return {c.id: c for c in self.clusters}


# ---------------- trace ----------------

class Channel(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    broadcast_bitrate: int = Field(gt=0, description="Kbps")
    sessions: List[Tuple[int, int]] = Field(default_factory=list)

    @field_validator("sessions")
    @classmethod
    def _disjoint_ordered(cls, v: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
        prev_end = None
        for start, end in v:
            if end <= start:
                raise ValueError(f"session ({start}, {end}) is empty")
            if prev_end is not None and start < prev_end:
                raise ValueError("sessions must be disjoint and ordered")
            prev_end = end
        return v


class TraceRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    channel_id: str = Field(min_length=1)
    t: int = Field(ge=0, description="Sample timestamp (s)")
    bitrate_kbps: int = Field(gt=0)
    viewers: int = Field(ge=0)


# ---------------- allocation ----------------

class Allocation(BaseModel):
    assigned: Dict[str, str] = Field(default_factory=dict, description="group_id -> cluster_id")
    rosters: Dict[str, List[str]] = Field(default_factory=dict, description="G_j ordered by cP_j")
    unallocated: List[str] = Field(default_factory=list)
    blocking_pair: Optional[Tuple[str, str]] = Field(
        default=None, description="Set when no stable allocation was reached; (group_id, cluster_id)")

    def cluster_of(self, group_id: str) -> Optional[str]:
        return self.assigned.get(group_id)


class RankHistogram(BaseModel):
    levels: List[int] = Field(default_factory=lambda: [0] * 6, min_length=6, max_length=6)
    unallocated: int = 0

    @property
    def total(self) -> int:
        return sum(self.levels) + self.unallocated

    def rows(self) -> List[Tuple[str, int]]:
        out = [(f"Lv.{i}", n) for i, n in enumerate(self.levels, 1)]
        out.append(("unallocated", self.unallocated))
        return out


# ---------------- simulation output ----------------

class WindowMetrics(BaseModel):
    window_start: int
    strategy: str
    alpha: float
    fluctuation: float = 0.0
    offloading_ratio: float = Field(ge=0.0, le=1.0)
    degenerate: bool = Field(default=False, description="No traffic at all; ratio set to 1.0 by convention")
    per_bitrate_satisfaction: Dict[int, float] = Field(default_factory=dict)
    per_cluster_offloading: Dict[str, float] = Field(default_factory=dict)
    edge_kb: int = 0
    origin_kb: int = 0


# ---------------- experiment configuration ----------------

class TopologyParams(BaseModel):
    n_groups: int = Field(default=60, ge=1)
    n_clusters: int = Field(default=30, ge=1)
    bandwidth_classes_kbps: List[int] = Field(default_factory=lambda: list(settings.bandwidth_classes_kbps))
    window_seconds: int = Field(default=settings.WINDOW_SECONDS, gt=0)
    target_demand_kbps: Optional[int] = Field(default=None, description="Σ server bandwidth target; defaults to Σ demand")
    n_isps: int = Field(default=4, ge=1)
    n_states: int = Field(default=2, ge=1)
    counties_per_state: int = Field(default=4, ge=1)
    cities_per_county: int = Field(default=3, ge=1)
    max_preferences: Optional[int] = Field(default=None, ge=1, description="Truncate uP/cP (partial lists)")


class TraceParams(BaseModel):
    n_channels: int = Field(default=40, ge=1)
    n_windows: int = Field(default=12, ge=1)
    start_time: int = Field(default=0, ge=0)
    window_seconds: int = Field(default=settings.WINDOW_SECONDS, gt=0)
    zipf_exponent: float = Field(default=settings.ZIPF_EXPONENT, gt=0.0)
    peak_viewers: int = Field(default=6000, ge=0)
    diurnal_amplitude: float = Field(default=0.3, ge=0.0, lt=1.0)
    noise_sigma: float = Field(default=0.1, ge=0.0)
    always_on: bool = True
    bitrate_weights: Optional[Dict[int, float]] = None


class TopologySource(BaseModel):
    path: Optional[str] = None
    synth: Optional[TopologyParams] = None

    @model_validator(mode="after")
    def _exactly_one(self) -> "TopologySource":
        if (self.path is None) == (self.synth is None):
            raise ValueError("give exactly one of 'path' or 'synth'")
        return self


class TraceSource(BaseModel):
    path: Optional[str] = None
    synth: Optional[TraceParams] = None

    @model_validator(mode="after")
    def _exactly_one(self) -> "TraceSource":
        if (self.path is None) == (self.synth is None):
            raise ValueError("give exactly one of 'path' or 'synth'")
        return self


class ExperimentConfig(BaseModel):
    topology: TopologySource = Field(default_factory=lambda: TopologySource(synth=TopologyParams()))
    trace: TraceSource = Field(default_factory=lambda: TraceSource(synth=TraceParams()))
    strategies: List[StrategyName] = Field(default_factory=lambda: list(STRATEGIES), min_length=1)
    alphas: List[float] = Field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0], min_length=1)
    fluctuations: List[float] = Field(default_factory=lambda: [0.0], min_length=1)
    seed: int
    window_seconds: int = Field(default=settings.WINDOW_SECONDS, gt=0)
    segment_seconds: int = Field(default=settings.SEGMENT_SECONDS, gt=0)
    dispatch_lag: int = Field(default=settings.DISPATCH_LAG, ge=0, le=1)
    tier_mix: Optional[Dict[int, float]] = Field(default=None, description="Ladder tier -> weight")
    cort_segment_misses: bool = False
    max_windows: Optional[int] = Field(default=None, ge=1)
    workers: int = Field(default=settings.MAX_WORKERS, ge=1)
    out_dir: str = settings.OUT_DIR

    @field_validator("alphas")
    @classmethod
    def _alphas_in_range(cls, v: List[float]) -> List[float]:
        for a in v:
            if not 0.0 < a <= 1.0:
                raise ValueError(f"alpha {a} outside (0, 1]")
        return v

    @field_validator("fluctuations")
    @classmethod
    def _fluctuations_in_range(cls, v: List[float]) -> List[float]:
        for f in v:
            if not 0.0 <= f <= 1.0:
                raise ValueError(f"fluctuation {f} outside [0, 1]")
        return v

    @field_validator("strategies")
    @classmethod
    def _unique_strategies(cls, v: List[str]) -> List[str]:
        if len(set(v)) != len(v):
            raise ValueError("strategies listed twice")
        return v

    @field_validator("tier_mix")
    @classmethod
    def _tier_mix_on_ladder(cls, v: Optional[Dict[int, float]]) -> Optional[Dict[int, float]]:
        if v is None:
            return v
        bad = [t for t in v if t not in settings.BITRATE_LADDER]
        if bad:
            raise ValueError(f"tiers {bad} are not on the bitrate ladder")
        if any(w < 0 for w in v.values()) or sum(v.values()) <= 0:
            raise ValueError("tier weights must be non-negative with a positive sum")
        return v
