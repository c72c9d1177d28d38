"""QKD workload: relay timing, sifting symmetry, loss statistics,
session independence."""

import math

import pytest

from parqnet.kernel import EventKind
from parqnet.partition import round_robin
from parqnet.qkd import (
    TAG_SURVIVAL,
    Network,
    draw,
    pack_key,
    router_of_key,
    session_stream_id,
)
from parqnet.runner import RunConfig, run_simulation
from parqnet.topology import (
    ClassicalChannel,
    QuantumChannel,
    RouterSpec,
    SessionSpec,
    Topology,
    gen_as,
    gen_linear,
)


def lossless_line(n, delay_ps, period_ps=None, target_bits=4, offset=0):
    """Chain with explicit per-hop delay and zero attenuation."""
    names = [f"n{i}" for i in range(n)]
    routers = [RouterSpec(x) for x in names]
    q = [QuantumChannel(names[i], names[i + 1], 1000.0, 0.0, delay_ps)
         for i in range(n - 1)]
    c = [ClassicalChannel(names[i], names[i + 1], 2 * delay_ps)
         for i in range(n - 1)]
    period = period_ps or delay_ps * 2 * n
    sessions = [SessionSpec(names[0], names[-1], period, target_bits, offset)]
    return Topology(routers, q, c, sessions, seed=0)


def run_serial(topology, seed=0, stop_time=None):
    stop = stop_time if stop_time is not None else 2**64 - 1
    return run_simulation(RunConfig(topology, round_robin(topology, 1),
                                    seed=seed, stop_time=stop))


def test_draws_are_deterministic_and_tag_separated():
    a = draw(1, 2, 3, 4, TAG_SURVIVAL)
    assert a == draw(1, 2, 3, 4, TAG_SURVIVAL)
    assert 0.0 <= a < 1.0
    assert a != draw(1, 2, 3, 4, TAG_SURVIVAL + 1)
    assert a != draw(2, 2, 3, 4, TAG_SURVIVAL)


def test_pack_key_fields_round_trip():
    key = pack_key(1023, 512, 1_000_000, 99, 1)
    assert router_of_key(key) == 1023
    assert key != pack_key(1023, 512, 1_000_000, 99, 0)
    # Distinct coordinates never collide within the packing limits.
    seen = {pack_key(r, s, p, h, d)
            for r in (0, 5) for s in (0, 7) for p in (0, 3)
            for h in (0, 2) for d in (0, 1)}
    assert len(seen) == 2 * 2 * 2 * 2 * 2


def test_first_photon_arrival_is_sum_of_hop_delays():
    # 4 routers, 1 ms per hop: the relay forwards with zero processing
    # delay, so the first arrival at the far end logs at exactly 3 ms.
    ms = 1_000_000_000
    topo = lossless_line(4, delay_ps=ms)
    report = run_serial(topo, stop_time=20 * ms)
    # Census counts every hop-arrival; the digest check needs the raw log,
    # so recompute serially here with the entity handlers.
    from parqnet.kernel import Timeline
    from parqnet.qkd import RouterEntity
    from parqnet.qsm_client import QsmClient

    network = Network(topo, seed=0)
    tl = Timeline(20 * ms)
    qsm = QsmClient(0, lambda k: 0, None)
    entities = [RouterEntity(i, network, tl, qsm) for i in range(4)]
    for i, e in enumerate(entities):
        tl.add_entity(i, e.handle)
    for e in entities:
        e.start()
    tl.run_until(20 * ms)
    arrivals = [(t, target) for target, t, kind, *_ in tl.execution_log
                if kind == int(EventKind.PHOTON_ARRIVAL)]
    first_at_dst = min(t for t, target in arrivals if target == 3)
    assert first_at_dst == 3 * ms
    # And every intermediate arrival time is emission + exact hop delays.
    assert min(t for t, target in arrivals if target == 1) == ms
    assert min(t for t, target in arrivals if target == 2) == 2 * ms


def test_completed_session_keys_match_bit_for_bit():
    topo = lossless_line(3, delay_ps=5_000_000, period_ps=1_000_000,
                         target_bits=8)
    report = run_serial(topo)
    sess = report["sessions"]["0"]
    assert sess["source_count"] == sess["destination_count"] == 8
    assert sess["source_key"] == sess["destination_key"]
    assert len(sess["source_key"]) == 8
    assert sess["complete_time"] is not None


def test_truncated_session_source_key_is_prefix():
    topo = lossless_line(3, delay_ps=5_000_000, period_ps=1_000_000,
                         target_bits=1000)
    report = run_serial(topo, stop_time=80_000_000)
    sess = report["sessions"]["0"]
    assert sess["source_count"] <= sess["destination_count"]
    assert sess["destination_key"].startswith(sess["source_key"])


def test_sifting_only_counts_all_hops_matched():
    # With lossless links the chain always reaches the destination; the
    # counted fraction over many photons must approach the basis-match
    # probability (1/2 per hop).
    topo = lossless_line(3, delay_ps=1_000_000, period_ps=100_000,
                         target_bits=10_000)
    report = run_serial(topo, stop_time=400_000_000)
    emitted = report["sessions"]["0"]["emitted"]
    counted = report["sessions"]["0"]["destination_count"]
    assert emitted > 3000
    frac = counted / emitted
    expected = 0.25  # two hops
    sigma = math.sqrt(expected * (1 - expected) / emitted)
    assert abs(frac - expected) < 4 * sigma


def test_loss_model_monte_carlo_three_sigma():
    # Survival draws against p = 10^(-attenuation*km/10), three settings.
    settings = [(0.2, 50_000.0, 0.1), (0.1, 30_000.0, 10 ** -0.3),
                (0.2, 10_000.0, 10 ** -0.2)]
    n = 20_000
    for attenuation, dist_m, p in settings:
        from parqnet.topology import survival_probability
        assert survival_probability(attenuation, dist_m) == pytest.approx(p)
        survived = sum(
            draw(17, 1, photon, 0, TAG_SURVIVAL) < p for photon in range(n))
        sigma = math.sqrt(p * (1 - p) * n)
        assert abs(survived - n * p) < 3 * sigma


def test_quantum_events_dominate_linear_workload():
    topo = gen_linear(16, period_ps=1_000_000, target_bits=10_000)
    report = run_serial(topo, stop_time=300_000_000)
    census = report["census"]
    total = sum(census.values())
    assert census["photon_arrival"] / total >= 0.80


def test_session_independence_under_deletion():
    base = gen_as(4, 4, seed=21, inter_session_density=0.9)
    assert len(base.sessions) >= 3
    full = run_serial(base, seed=5, stop_time=150_000_000)
    # Drop one session (not the last, so positional ids shift underneath).
    victim = 1
    trimmed = Topology(
        base.routers, base.qchannels, base.cchannels,
        [s for i, s in enumerate(base.sessions) if i != victim],
        seed=base.seed,
    )
    reduced = run_serial(trimmed, seed=5, stop_time=150_000_000)
    spec_by_pair = {}
    for i, s in enumerate(base.sessions):
        if i != victim:
            spec_by_pair[(s.source, s.destination)] = full["sessions"][str(i)]
    for i, s in enumerate(trimmed.sessions):
        got = reduced["sessions"][str(i)]
        want = spec_by_pair[(s.source, s.destination)]
        assert got["source_key"] == want["source_key"]
        assert got["destination_key"] == want["destination_key"]
        assert got["destination_count"] == want["destination_count"]


def test_session_stream_ids_stable():
    assert session_stream_id("a", "b", 0) == session_stream_id("a", "b", 0)
    assert session_stream_id("a", "b", 0) != session_stream_id("a", "b", 1)
    assert session_stream_id("a", "b", 0) != session_stream_id("b", "a", 0)
