"""Router-to-worker assignment: energy functions and simulated annealing.

The annealer minimizes a weighted blend of three objectives: session
paths crossing worker boundaries, quantum channels crossing boundaries,
and the spread of per-worker memory counts. All of them are exact counts,
deterministic in (topology, partition), so small instances can be checked
against brute force.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError, SchemaViolation
from .topology import Topology

CROSS_FLOWS = "CROSS_FLOWS"
CROSS_QCHANNELS = "CROSS_QCHANNELS"
MEMORY_BALANCE = "MEMORY_BALANCE"
ENERGY_KINDS = (CROSS_FLOWS, CROSS_QCHANNELS, MEMORY_BALANCE)


@dataclass
class Partition:
    num_workers: int
    assignment: dict[str, int]

    def worker_of(self, router: str) -> int:
        return self.assignment[router]

    def validate(self, topology: Optional[Topology] = None) -> None:
        if self.num_workers < 1:
            raise SchemaViolation("num_workers must be >= 1")
        for router, worker in self.assignment.items():
            if not 0 <= worker < self.num_workers:
                raise SchemaViolation(
                    f"router {router!r} assigned to out-of-range worker {worker}")
        if topology is not None:
            missing = [r.name for r in topology.routers
                       if r.name not in self.assignment]
            if missing:
                raise SchemaViolation(f"routers missing from partition: {missing}")
            unknown = [name for name in self.assignment
                       if name not in topology.router_names()]
            if unknown:
                raise SchemaViolation(f"unknown routers in partition: {unknown}")

    def to_dict(self) -> dict:
        return {"num_workers": self.num_workers, "assignment": dict(self.assignment)}

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str,
             topology: Optional[Topology] = None) -> "Partition":
        with open(path) as fh:
            data = json.load(fh)
        if (not isinstance(data, dict) or "num_workers" not in data
                or "assignment" not in data
                or not isinstance(data["assignment"], dict)):
            raise SchemaViolation("partition file needs num_workers and assignment")
        try:
            part = cls(int(data["num_workers"]),
                       {str(k): int(v) for k, v in data["assignment"].items()})
        except (TypeError, ValueError) as err:
            raise SchemaViolation(f"malformed partition file: {err}") from err
        part.validate(topology)
        return part


@dataclass
class EnergySpec:
    kind: str
    weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ENERGY_KINDS:
            raise ConfigError(f"unknown energy kind {self.kind!r}")
        for k in self.weights:
            if k not in ENERGY_KINDS:
                raise ConfigError(f"unknown energy weight {k!r}")
        if not self.weights:
            self.weights = {self.kind: 1.0}
        elif self.kind not in self.weights:
            self.weights[self.kind] = 1.0


def round_robin(topology: Topology, num_workers: int) -> Partition:
    assignment = {r.name: i % num_workers
                  for i, r in enumerate(topology.routers)}
    return Partition(num_workers, assignment)


def cross_qchannel_count(topology: Topology, assignment: dict[str, int]) -> int:
    return sum(1 for ch in topology.qchannels
               if assignment[ch.src] != assignment[ch.dst])


def cross_flow_count(topology: Topology, assignment: dict[str, int]) -> int:
    """Worker-boundary crossings summed over every session path."""
    total = 0
    for spec in topology.sessions:
        path = topology.shortest_path(spec.source, spec.destination)
        total += sum(1 for a, b in zip(path, path[1:])
                     if assignment[a] != assignment[b])
    return total


def memory_spread(topology: Topology, assignment: dict[str, int],
                  num_workers: int) -> int:
    loads = [0] * num_workers
    for r in topology.routers:
        loads[assignment[r.name]] += r.memories
    return max(loads) - min(loads)


def energy(topology: Topology, partition: Partition, spec: EnergySpec) -> float:
    partition.validate(topology)
    total = 0.0
    for kind, weight in sorted(spec.weights.items()):
        if kind == CROSS_QCHANNELS:
            term = cross_qchannel_count(topology, partition.assignment)
        elif kind == CROSS_FLOWS:
            term = cross_flow_count(topology, partition.assignment)
        else:
            term = memory_spread(topology, partition.assignment,
                                 partition.num_workers)
        total += weight * term
    return total


@dataclass
class AnnealSchedule:
    t0: float = 10.0
    alpha: float = 0.995
    iterations: int = 50_000

    def validate(self) -> None:
        if self.t0 <= 0 or not 0 < self.alpha < 1 or self.iterations < 0:
            raise ConfigError(f"invalid annealing schedule {self}")


def accept(delta: float, temperature: float, rng: random.Random) -> bool:
    """Metropolis rule: always take improvements, otherwise accept with
    probability exp(-delta / T)."""
    if delta <= 0:
        return True
    if temperature <= 0:
        return False
    return rng.random() < math.exp(-delta / temperature)


def anneal(topology: Topology, spec: EnergySpec, num_workers: int,
           schedule: Optional[AnnealSchedule] = None,
           seed: int = 0) -> Partition:
    """Simulated annealing from a round-robin start.

    The proposal move relocates one random router to a random other
    worker, except moves that would leave a worker with no routers (a
    partition onto k workers keeps all k populated; there is still no
    balance pressure beyond that). Geometric cooling; the best assignment
    ever seen is returned, so the result never regresses below the
    starting point. Deterministic given the seed. Energy deltas are
    evaluated incrementally from edges incident to the moved router and
    match :func:`energy` exactly.
    """
    schedule = schedule or AnnealSchedule()
    schedule.validate()
    if num_workers < 1:
        raise ConfigError("num_workers must be >= 1")
    start = round_robin(topology, num_workers)
    if num_workers == 1 or schedule.iterations == 0 or len(topology.routers) < 2:
        return start
    rng = random.Random(seed)
    names = topology.router_names()
    n = len(names)
    assign = [i % num_workers for i in range(n)]
    wq = spec.weights.get(CROSS_QCHANNELS, 0.0)
    wf = spec.weights.get(CROSS_FLOWS, 0.0)
    wm = spec.weights.get(MEMORY_BALANCE, 0.0)
    q_inc: list[list[int]] = [[] for _ in range(n)]
    for ch in topology.qchannels:
        a = topology.router_index(ch.src)
        b = topology.router_index(ch.dst)
        q_inc[a].append(b)
        q_inc[b].append(a)
    f_inc: list[list[int]] = [[] for _ in range(n)]
    if wf:
        for sess in topology.sessions:
            path = [topology.router_index(x)
                    for x in topology.shortest_path(sess.source, sess.destination)]
            for a, b in zip(path, path[1:]):
                f_inc[a].append(b)
                f_inc[b].append(a)
    memories = [r.memories for r in topology.routers]
    loads = [0] * num_workers
    occupancy = [0] * num_workers
    for i, m in enumerate(memories):
        loads[assign[i]] += m
        occupancy[assign[i]] += 1

    def full_energy() -> float:
        e = 0.0
        if wq:
            e += wq * sum(assign[i] != assign[o]
                          for i in range(n) for o in q_inc[i] if o > i)
        if wf:
            e += wf * sum(assign[i] != assign[o]
                          for i in range(n) for o in f_inc[i] if o > i)
        if wm:
            e += wm * (max(loads) - min(loads))
        return e

    current_e = full_energy()
    best = list(assign)
    best_e = current_e
    temperature = schedule.t0
    for _ in range(schedule.iterations):
        r = rng.randrange(n)
        old_w = assign[r]
        new_w = rng.randrange(num_workers - 1)
        if new_w >= old_w:
            new_w += 1
        if occupancy[old_w] == 1:
            temperature *= schedule.alpha
            continue  # would empty a worker
        delta = 0.0
        if wq:
            delta += wq * sum((assign[o] != new_w) - (assign[o] != old_w)
                              for o in q_inc[r])
        if wf:
            delta += wf * sum((assign[o] != new_w) - (assign[o] != old_w)
                              for o in f_inc[r])
        if wm:
            old_spread = max(loads) - min(loads)
            loads[old_w] -= memories[r]
            loads[new_w] += memories[r]
            delta += wm * ((max(loads) - min(loads)) - old_spread)
        if accept(delta, temperature, rng):
            assign[r] = new_w
            occupancy[old_w] -= 1
            occupancy[new_w] += 1
            current_e += delta
            if current_e < best_e:
                best_e = current_e
                best = list(assign)
        elif wm:
            loads[old_w] += memories[r]
            loads[new_w] -= memories[r]
        temperature *= schedule.alpha
    return Partition(num_workers, {names[i]: best[i] for i in range(n)})
