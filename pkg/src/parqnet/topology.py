"""Network topology: routers, channels, QKD session specs, generators.

Topology files are JSON with top-level keys ``routers``, ``qconnections``,
``cconnections``, ``sessions`` and ``seed``; every delay is an integer
count of picoseconds. Generators compute propagation delays from distance
(fiber speed 2e8 m/s, rounded half-up to a tick) so files stay exact.
"""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import jsonschema

from .errors import ConfigError, EmptyTopology, SchemaViolation

FIBER_SPEED_M_PER_S = 2.0e8
PS_PER_S = 1_000_000_000_000

# Memory-key packing limits (see qkd.pack_key).
MAX_ROUTERS = 1 << 20
MAX_SESSIONS = 1 << 10


def distance_to_delay_ps(distance_m: float, speed_m_per_s: float = FIBER_SPEED_M_PER_S) -> int:
    """Propagation delay in integer picoseconds, rounded half-up."""
    return int(distance_m / speed_m_per_s * PS_PER_S + 0.5)


def survival_probability(attenuation_db_per_km: float, distance_m: float) -> float:
    """Photon survival against fiber loss: 10^(-loss_dB/10)."""
    loss_db = attenuation_db_per_km * (distance_m / 1000.0)
    return 10.0 ** (-loss_db / 10.0)


@dataclass(frozen=True)
class RouterSpec:
    name: str
    memories: int = 4


@dataclass(frozen=True)
class QuantumChannel:
    src: str
    dst: str
    distance_m: float
    attenuation_db_per_km: float
    delay_ps: int


@dataclass(frozen=True)
class ClassicalChannel:
    src: str
    dst: str
    delay_ps: int


@dataclass(frozen=True)
class SessionSpec:
    source: str
    destination: str
    period_ps: int
    target_bits: int
    start_offset_ps: int = 0


TOPOLOGY_SCHEMA = {
    "type": "object",
    "required": ["routers", "qconnections", "cconnections", "sessions", "seed"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "routers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "memories"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "memories": {"type": "integer", "minimum": 1},
                },
            },
        },
        "qconnections": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["src", "dst", "distance_m",
                             "attenuation_db_per_km", "delay_ps"],
                "additionalProperties": False,
                "properties": {
                    "src": {"type": "string"},
                    "dst": {"type": "string"},
                    "distance_m": {"type": "number", "exclusiveMinimum": 0},
                    "attenuation_db_per_km": {"type": "number", "minimum": 0},
                    "delay_ps": {"type": "integer", "exclusiveMinimum": 0},
                },
            },
        },
        "cconnections": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["src", "dst", "delay_ps"],
                "additionalProperties": False,
                "properties": {
                    "src": {"type": "string"},
                    "dst": {"type": "string"},
                    "delay_ps": {"type": "integer", "exclusiveMinimum": 0},
                },
            },
        },
        "sessions": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["source", "destination", "period_ps",
                             "target_bits"],
                "additionalProperties": False,
                "properties": {
                    "source": {"type": "string"},
                    "destination": {"type": "string"},
                    "period_ps": {"type": "integer", "exclusiveMinimum": 0},
                    "target_bits": {"type": "integer", "minimum": 1},
                    "start_offset_ps": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}


@dataclass
class Topology:
    routers: list[RouterSpec]
    qchannels: list[QuantumChannel]
    cchannels: list[ClassicalChannel]
    sessions: list[SessionSpec]
    seed: int = 0
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {r.name: i for i, r in enumerate(self.routers)}

    def router_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ConfigError(f"unknown router {name!r}") from None

    def router_names(self) -> list[str]:
        return [r.name for r in self.routers]

    def validate(self) -> None:
        if not self.routers:
            raise EmptyTopology("no routers")
        if len(self.routers) > MAX_ROUTERS:
            raise ConfigError(f"router count exceeds {MAX_ROUTERS}")
        if len(self.sessions) > MAX_SESSIONS:
            raise ConfigError(f"session count exceeds {MAX_SESSIONS}")
        if len(self._index) != len(self.routers):
            raise SchemaViolation("duplicate router names")
        for ch in self.qchannels + self.cchannels:
            if ch.src == ch.dst:
                raise SchemaViolation(f"self-loop on {ch.src}")
            self.router_index(ch.src)
            self.router_index(ch.dst)
            if ch.delay_ps <= 0:
                raise SchemaViolation("non-positive channel delay")
        # Classical latency must dominate quantum latency on parallel links.
        qdelay = {}
        for ch in self.qchannels:
            qdelay[frozenset((ch.src, ch.dst))] = ch.delay_ps
        for ch in self.cchannels:
            q = qdelay.get(frozenset((ch.src, ch.dst)))
            if q is not None and ch.delay_ps < q:
                raise SchemaViolation(
                    f"classical delay below quantum delay on {ch.src}-{ch.dst}")
        if len(self.routers) > 1 and not self._connected():
            raise SchemaViolation("quantum channel graph is not connected")
        for s in self.sessions:
            if s.source == s.destination:
                raise SchemaViolation("session with identical endpoints")
            self.router_index(s.source)
            self.router_index(s.destination)

    def _connected(self) -> bool:
        adj = self.adjacency()
        seen = {self.routers[0].name}
        queue = deque(seen)
        while queue:
            u = queue.popleft()
            for v in adj.get(u, ()):
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == len(self.routers)

    def adjacency(self) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {r.name: [] for r in self.routers}
        for ch in self.qchannels:
            adj[ch.src].append(ch.dst)
            adj[ch.dst].append(ch.src)
        for name in adj:
            adj[name].sort(key=self.router_index)
        return adj

    def shortest_path(self, src: str, dst: str) -> list[str]:
        """Deterministic BFS path (neighbors visited in index order)."""
        if src == dst:
            return [src]
        adj = self.adjacency()
        parent: dict[str, str] = {src: src}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in parent:
                    parent[v] = u
                    if v == dst:
                        path = [dst]
                        while path[-1] != src:
                            path.append(parent[path[-1]])
                        return path[::-1]
                    queue.append(v)
        raise ConfigError(f"no path {src} -> {dst}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "routers": [{"name": r.name, "memories": r.memories}
                        for r in self.routers],
            "qconnections": [
                {"src": c.src, "dst": c.dst, "distance_m": c.distance_m,
                 "attenuation_db_per_km": c.attenuation_db_per_km,
                 "delay_ps": c.delay_ps}
                for c in self.qchannels
            ],
            "cconnections": [
                {"src": c.src, "dst": c.dst, "delay_ps": c.delay_ps}
                for c in self.cchannels
            ],
            "sessions": [
                {"source": s.source, "destination": s.destination,
                 "period_ps": s.period_ps, "target_bits": s.target_bits,
                 "start_offset_ps": s.start_offset_ps}
                for s in self.sessions
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Topology":
        try:
            jsonschema.validate(data, TOPOLOGY_SCHEMA)
        except jsonschema.ValidationError as err:
            raise SchemaViolation(err.message) from err
        topo = cls(
            routers=[RouterSpec(r["name"], r["memories"])
                     for r in data["routers"]],
            qchannels=[QuantumChannel(c["src"], c["dst"], c["distance_m"],
                                      c["attenuation_db_per_km"], c["delay_ps"])
                       for c in data["qconnections"]],
            cchannels=[ClassicalChannel(c["src"], c["dst"], c["delay_ps"])
                       for c in data["cconnections"]],
            sessions=[SessionSpec(s["source"], s["destination"], s["period_ps"],
                                  s["target_bits"], s.get("start_offset_ps", 0))
                      for s in data["sessions"]],
            seed=data["seed"],
        )
        topo.validate()
        return topo

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "Topology":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def gen_linear(
    n_routers: int,
    link_km: float = 1.0,
    attenuation_db_per_km: float = 0.2,
    period_ps: int = 10_000_000,
    target_bits: int = 16,
    memories: int = 4,
    classical_delay_factor: float = 2.0,
    seed: int = 0,
) -> Topology:
    """Chain of routers with one end-to-end key relay session."""
    if n_routers < 2:
        raise ConfigError("linear topology needs at least 2 routers")
    if period_ps <= 0 or link_km <= 0:
        raise ConfigError("period and link length must be positive")
    width = max(4, len(str(n_routers - 1)))
    names = [f"r{i:0{width}d}" for i in range(n_routers)]
    routers = [RouterSpec(n, memories) for n in names]
    dist = link_km * 1000.0
    qdelay = distance_to_delay_ps(dist)
    cdelay = int(qdelay * classical_delay_factor + 0.5)
    qchannels = [QuantumChannel(names[i], names[i + 1], dist,
                                attenuation_db_per_km, qdelay)
                 for i in range(n_routers - 1)]
    cchannels = [ClassicalChannel(names[i], names[i + 1], cdelay)
                 for i in range(n_routers - 1)]
    sessions = [SessionSpec(names[0], names[-1], period_ps, target_bits, 0)]
    topo = Topology(routers, qchannels, cchannels, sessions, seed)
    topo.validate()
    return topo


def gen_as(
    n_groups: int,
    group_size: int,
    seed: int = 0,
    inter_session_density: float = 0.3,
    hot_group_sessions: int = 0,
    hot_group: int = 0,
    spoke_km: float = 0.5,
    backbone_km: float = 2.0,
    backbone_extra_density: float = 0.15,
    attenuation_db_per_km: float = 0.2,
    period_ps: int = 10_000_000,
    target_bits: int = 16,
    memories: int = 4,
    classical_delay_factor: float = 2.0,
) -> Topology:
    """Hierarchical autonomous-system-like topology.

    Each group is a hub-and-spoke star; hubs are joined by a seeded random
    backbone (a shuffled ring plus extra edges). The workload samples one
    session per group pair at ``inter_session_density``, optionally plus
    ``hot_group_sessions`` spoke-to-spoke sessions inside one group to
    construct a deliberately imbalanced load.
    """
    if n_groups < 1 or group_size < 1:
        raise ConfigError("need at least one group with one router")
    if hot_group_sessions and group_size < 3:
        raise ConfigError("hot-group sessions need at least 3 routers per group")
    rng = random.Random(seed)
    names = [[f"g{g:02d}r{r:02d}" for r in range(group_size)]
             for g in range(n_groups)]
    routers = [RouterSpec(n, memories) for grp in names for n in grp]
    spoke_dist = spoke_km * 1000.0
    backbone_dist = backbone_km * 1000.0
    sq = distance_to_delay_ps(spoke_dist)
    bq = distance_to_delay_ps(backbone_dist)
    qchannels: list[QuantumChannel] = []
    cchannels: list[ClassicalChannel] = []

    def link(a: str, b: str, dist: float, qd: int) -> None:
        qchannels.append(QuantumChannel(a, b, dist, attenuation_db_per_km, qd))
        cchannels.append(ClassicalChannel(a, b, int(qd * classical_delay_factor + 0.5)))

    for grp in names:
        hub = grp[0]
        for spoke in grp[1:]:
            link(hub, spoke, spoke_dist, sq)
    hubs = [grp[0] for grp in names]
    if len(hubs) > 1:
        ring = hubs[:]
        rng.shuffle(ring)
        backbone = set()
        for i, hub in enumerate(ring):
            pair = frozenset((hub, ring[(i + 1) % len(ring)]))
            if len(pair) == 2 and pair not in backbone:
                backbone.add(pair)
                link(hub, ring[(i + 1) % len(ring)], backbone_dist, bq)
        for i in range(len(hubs)):
            for j in range(i + 1, len(hubs)):
                pair = frozenset((hubs[i], hubs[j]))
                if pair not in backbone and rng.random() < backbone_extra_density:
                    backbone.add(pair)
                    link(hubs[i], hubs[j], backbone_dist, bq)

    sessions: list[SessionSpec] = []
    for i in range(n_groups):
        for j in range(i + 1, n_groups):
            if rng.random() < inter_session_density:
                src = rng.choice(names[i])
                dst = rng.choice(names[j])
                sessions.append(SessionSpec(src, dst, period_ps, target_bits))
    if not sessions and n_groups >= 2:
        sessions.append(SessionSpec(names[0][0], names[1][0],
                                    period_ps, target_bits))
    for _ in range(hot_group_sessions):
        grp = names[hot_group]
        src, dst = rng.sample(grp[1:], 2)
        sessions.append(SessionSpec(src, dst, period_ps, target_bits))
    # Stagger emissions so independent sessions do not tick in unison.
    sessions = [
        SessionSpec(s.source, s.destination, s.period_ps, s.target_bits,
                    rng.randrange(s.period_ps))
        for s in sessions
    ]
    topo = Topology(routers, qchannels, cchannels, sessions, seed)
    topo.validate()
    return topo
