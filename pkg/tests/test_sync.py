"""Lookahead, horizon negotiation, and remote-event merge rules."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parqnet.errors import CausalityViolation, ConfigError, EmptyTopology
from parqnet.kernel import TIME_INFINITY, Event, TimerPayload, Timeline
from parqnet.sync import (
    EpochTiming,
    RemoteEventBatch,
    compute_lookahead,
    merge_remote_events,
    negotiate_horizon,
)
from parqnet.topology import (
    ClassicalChannel,
    QuantumChannel,
    RouterSpec,
    Topology,
)

MS = 1_000_000_000


def line4(delay_ps=MS):
    names = ["A", "B", "C", "D"]
    routers = [RouterSpec(x) for x in names]
    q = [QuantumChannel(names[i], names[i + 1], 1000.0, 0.2, delay_ps)
         for i in range(3)]
    c = [ClassicalChannel(names[i], names[i + 1], 2 * delay_ps)
         for i in range(3)]
    return Topology(routers, q, c, [], seed=0)


def test_lookahead_is_min_cross_delay():
    names = ["A", "B", "C"]
    routers = [RouterSpec(x) for x in names]
    q = [QuantumChannel("A", "B", 1.0, 0.2, 2 * MS),
         QuantumChannel("B", "C", 1.0, 0.2, 5 * MS)]
    c = [ClassicalChannel("A", "B", 4 * MS),
         ClassicalChannel("B", "C", 10 * MS)]
    topo = Topology(routers, q, c, [], seed=0)
    assignment = {"A": 0, "B": 1, "C": 1}
    assert compute_lookahead(topo, assignment) == 2 * MS
    assignment = {"A": 0, "B": 0, "C": 1}
    assert compute_lookahead(topo, assignment) == 5 * MS


def test_lookahead_single_worker_is_infinite():
    topo = line4()
    assert compute_lookahead(topo, {n: 0 for n in "ABCD"}) == TIME_INFINITY


def test_lookahead_line_partition_enumerates_cross_edges():
    topo = line4(MS)  # equal 1 ms quantum links, 2 ms classical
    assignment = {"A": 0, "B": 0, "C": 1, "D": 1}
    # Cross edges: quantum B-C (1 ms) and classical B-C (2 ms).
    assert compute_lookahead(topo, assignment) == MS


def test_lookahead_requires_complete_partition():
    topo = line4()
    with pytest.raises(ConfigError):
        compute_lookahead(topo, {"A": 0})
    with pytest.raises(EmptyTopology):
        compute_lookahead(Topology([], [], [], [], seed=0), {})


def test_negotiate_horizon_min_plus_lookahead():
    plan = negotiate_horizon([10, 14, TIME_INFINITY], 3)
    assert plan.horizon == 13
    assert not plan.completed


def test_negotiate_all_infinity_signals_completion():
    plan = negotiate_horizon([TIME_INFINITY] * 3, 7)
    assert plan.completed


def test_negotiate_serial_fast_path_saturates_at_stop_time():
    plan = negotiate_horizon([10], TIME_INFINITY, stop_time=5000)
    assert plan.horizon == 5000
    assert not plan.completed


def test_negotiate_treats_times_beyond_stop_as_done():
    plan = negotiate_horizon([700], 5, stop_time=600)
    assert plan.completed


def events_at(times, seqs=None, session=0):
    seqs = seqs or range(len(times))
    return [Event(time=t, target=0, seq=s, payload=TimerPayload(session))
            for t, s in zip(times, seqs)]


def test_merge_resequences_by_time_sender_seq():
    tl = Timeline()
    order = []
    tl.add_entity(0, lambda ev: order.append(ev.payload.session))
    batches = [
        RemoteEventBatch(2, 0, events_at([50], seqs=[4], session=2)),
        RemoteEventBatch(1, 0, events_at([50], seqs=[9], session=1)),
    ]
    merged = merge_remote_events(tl, batches, epoch_start=40)
    assert merged == 2
    tl.run_until(100)
    assert order == [1, 2]  # worker 1's event first despite arrival order


def test_merge_empty_batch_list():
    tl = Timeline()
    assert merge_remote_events(tl, [], epoch_start=0) == 0
    assert tl.peek_next_time() == TIME_INFINITY


def test_merge_rejects_event_before_epoch_start():
    tl = Timeline()
    batches = [RemoteEventBatch(1, 0, events_at([99]))]
    with pytest.raises(CausalityViolation):
        merge_remote_events(tl, batches, epoch_start=100)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(100, 120),
                          st.integers(0, 50)),
                min_size=1, max_size=12),
       st.randoms(use_true_random=False))
def test_merge_order_independent_of_arrival(items, rng):
    def build(order):
        tl = Timeline()
        log = []
        tl.add_entity(0, lambda ev: log.append(
            (ev.time, ev.payload.session)))
        by_sender = {}
        for sender, t, seq in order:
            by_sender.setdefault(sender, []).append((t, seq))
        batches = []
        for sender, evs in by_sender.items():
            batches.append(RemoteEventBatch(
                sender, 0,
                events_at([t for t, _ in evs], seqs=[s for _, s in evs],
                          session=sender)))
        rng.shuffle(batches)
        merge_remote_events(tl, batches, epoch_start=100)
        tl.run_until(TIME_INFINITY)
        return log

    # seqs must be unique per sender for a valid trace
    seen = set()
    items = [it for it in items
             if not (key := (it[0], it[2])) in seen and not seen.add(key)]
    shuffled = list(items)
    rng.shuffle(shuffled)
    assert build(items) == build(shuffled)


def test_epoch_timing_total():
    t = EpochTiming(0, 0, compute_ns=10, barrier_wait_ns=20, exchange_ns=30,
                    qsm_socket_ns=40)
    assert t.total_ns() == 100
