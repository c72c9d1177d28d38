"""Energy functions vs direct-count oracles; annealer vs brute force."""

import itertools
import math
import random

import pytest

from parqnet.errors import ConfigError, SchemaViolation
from parqnet.partition import (
    AnnealSchedule,
    CROSS_FLOWS,
    CROSS_QCHANNELS,
    MEMORY_BALANCE,
    EnergySpec,
    Partition,
    accept,
    anneal,
    energy,
    round_robin,
)
from parqnet.topology import (
    ClassicalChannel,
    QuantumChannel,
    RouterSpec,
    SessionSpec,
    Topology,
)


def line_topology(names, memories=None, sessions=()):
    memories = memories or [4] * len(names)
    routers = [RouterSpec(n, m) for n, m in zip(names, memories)]
    q = [QuantumChannel(names[i], names[i + 1], 1000.0, 0.2, 5_000_000)
         for i in range(len(names) - 1)]
    c = [ClassicalChannel(names[i], names[i + 1], 10_000_000)
         for i in range(len(names) - 1)]
    return Topology(routers, q, c, list(sessions), seed=0)


def ring_topology(n):
    names = [f"v{i}" for i in range(n)]
    routers = [RouterSpec(x) for x in names]
    q = [QuantumChannel(names[i], names[(i + 1) % n], 1000.0, 0.2, 5_000_000)
         for i in range(n)]
    c = [ClassicalChannel(names[i], names[(i + 1) % n], 10_000_000)
         for i in range(n)]
    return Topology(routers, q, c, [], seed=0)


def random_graph(rng, n):
    names = [f"v{i}" for i in range(n)]
    routers = [RouterSpec(x, rng.randrange(1, 8)) for x in names]
    edges = {(i, i + 1) for i in range(n - 1)}  # spanning chain
    extra = rng.randrange(n // 2, 2 * n)
    while len(edges) < min(n - 1 + extra, n * (n - 1) // 2):
        a, b = rng.sample(range(n), 2)
        edges.add((min(a, b), max(a, b)))
    q = [QuantumChannel(names[a], names[b], 1000.0, 0.2, 5_000_000)
         for a, b in sorted(edges)]
    c = [ClassicalChannel(names[a], names[b], 10_000_000)
         for a, b in sorted(edges)]
    return Topology(routers, q, c, [], seed=0)


def brute_force_min_cut(topology, num_workers=2):
    """Exhaustive minimum of CROSS_QCHANNELS over proper partitions
    (every worker populated; first router pinned to 0 for symmetry)."""
    names = topology.router_names()
    spec = EnergySpec(CROSS_QCHANNELS)
    best = math.inf
    for bits in itertools.product(range(num_workers), repeat=len(names) - 1):
        workers = set(bits) | {0}
        if len(workers) < num_workers:
            continue
        part = Partition(num_workers,
                         dict(zip(names, (0,) + bits)))
        best = min(best, energy(topology, part, spec))
    return best


def oracle_cross_edges(topology, assignment):
    return sum(1 for ch in topology.qchannels
               if assignment[ch.src] != assignment[ch.dst])


def test_energy_line_examples():
    topo = line_topology(["A", "B", "C", "D"])
    spec = EnergySpec(CROSS_QCHANNELS)
    split = Partition(2, {"A": 0, "B": 0, "C": 1, "D": 1})
    assert energy(topo, split, spec) == 1  # only B-C crosses
    comb = Partition(2, {"A": 0, "B": 1, "C": 0, "D": 1})
    assert energy(topo, comb, spec) == 3  # every edge crosses


def test_energy_memory_balance():
    topo = line_topology(["A", "B", "C", "D"], memories=[4, 4, 4, 4])
    spec = EnergySpec(MEMORY_BALANCE)
    balanced = Partition(2, {"A": 0, "B": 0, "C": 1, "D": 1})
    assert energy(topo, balanced, spec) == 0
    skewed = Partition(2, {"A": 0, "B": 0, "C": 0, "D": 1})
    assert energy(topo, skewed, spec) == 8


def test_energy_cross_flows_counts_crossings():
    topo = line_topology(["A", "B", "C", "D"],
                         sessions=[SessionSpec("A", "D", 1_000_000, 4)])
    spec = EnergySpec(CROSS_FLOWS)
    split = Partition(2, {"A": 0, "B": 0, "C": 1, "D": 1})
    assert energy(topo, split, spec) == 1
    comb = Partition(2, {"A": 0, "B": 1, "C": 0, "D": 1})
    assert energy(topo, comb, spec) == 3  # weighted by crossings


def test_energy_blended_weights():
    topo = line_topology(["A", "B", "C", "D"], memories=[1, 1, 1, 5])
    spec = EnergySpec(CROSS_QCHANNELS, {MEMORY_BALANCE: 0.5})
    part = Partition(2, {"A": 0, "B": 0, "C": 1, "D": 1})
    # cut 1, loads {2, 6} -> spread 4 weighted 0.5
    assert energy(topo, part, spec) == 1 + 2.0


def test_zero_iterations_returns_round_robin():
    topo = ring_topology(8)
    part = anneal(topo, EnergySpec(CROSS_QCHANNELS), 2,
                  AnnealSchedule(iterations=0), seed=1)
    assert part.assignment == round_robin(topo, 2).assignment


def test_anneal_ring_reaches_known_minimum():
    # A ring's minimum 2-cut is exactly 2; verified against brute force.
    topo = ring_topology(12)
    assert brute_force_min_cut(topo) == 2
    part = anneal(topo, EnergySpec(CROSS_QCHANNELS), 2,
                  AnnealSchedule(t0=4.0, alpha=0.999, iterations=8000), seed=3)
    assert energy(topo, part, EnergySpec(CROSS_QCHANNELS)) == 2


def test_anneal_deterministic_given_seed():
    topo = ring_topology(10)
    sched = AnnealSchedule(iterations=2000)
    a = anneal(topo, EnergySpec(CROSS_QCHANNELS), 3, sched, seed=42)
    b = anneal(topo, EnergySpec(CROSS_QCHANNELS), 3, sched, seed=42)
    assert a.assignment == b.assignment


def test_anneal_never_worse_than_round_robin():
    rng = random.Random(7)
    spec = EnergySpec(CROSS_QCHANNELS, {MEMORY_BALANCE: 0.25})
    for n in (6, 9, 12):
        topo = random_graph(rng, n)
        start_e = energy(topo, round_robin(topo, 3), spec)
        part = anneal(topo, spec, 3, AnnealSchedule(iterations=1500),
                      seed=n)
        assert energy(topo, part, spec) <= start_e


def test_energy_matches_direct_count_on_random_graphs():
    rng = random.Random(13)
    for _ in range(10):
        topo = random_graph(rng, rng.randrange(5, 12))
        names = topo.router_names()
        assignment = {x: rng.randrange(2) for x in names}
        part = Partition(2, assignment)
        assert energy(topo, part, EnergySpec(CROSS_QCHANNELS)) == \
            oracle_cross_edges(topo, assignment)


def test_metropolis_acceptance_rate_statistics():
    # Empirical acceptance of uphill moves vs exp(-delta/T), 3 sigma.
    rng = random.Random(2024)
    trials = 10_000
    for delta, temperature in [(1.0, 2.0), (2.5, 1.5), (0.5, 0.25)]:
        p = math.exp(-delta / temperature)
        accepted = sum(accept(delta, temperature, rng)
                       for _ in range(trials))
        sigma = math.sqrt(p * (1 - p) * trials)
        assert abs(accepted - trials * p) < 3 * sigma
    assert accept(0.0, 1e-9, rng)
    assert accept(-5.0, 1e-9, rng)


def test_partition_roundtrip_and_schema_errors(tmp_path):
    topo = line_topology(["A", "B", "C"])
    part = Partition(2, {"A": 0, "B": 1, "C": 0})
    path = tmp_path / "part.json"
    part.save(str(path))
    back = Partition.load(str(path), topo)
    assert back.assignment == part.assignment
    # Missing router
    bad = tmp_path / "missing.json"
    bad.write_text('{"num_workers": 2, "assignment": {"A": 0, "B": 1}}')
    with pytest.raises(SchemaViolation):
        Partition.load(str(bad), topo)
    # Worker id out of range
    bad2 = tmp_path / "range.json"
    bad2.write_text('{"num_workers": 2, "assignment": '
                    '{"A": 0, "B": 1, "C": 2}}')
    with pytest.raises(SchemaViolation):
        Partition.load(str(bad2), topo)


def test_invalid_schedule_rejected():
    topo = ring_topology(6)
    with pytest.raises(ConfigError):
        anneal(topo, EnergySpec(CROSS_QCHANNELS), 2,
               AnnealSchedule(t0=-1.0), seed=0)
    with pytest.raises(ConfigError):
        AnnealSchedule(alpha=1.0).validate()
    with pytest.raises(ConfigError):
        EnergySpec("NOT_A_KIND")
