"""Frame codec round-trips for both socket protocols."""

import math

from parqnet import wire
from parqnet.kernel import (
    ClassicalPayload,
    Event,
    PhotonPayload,
    QsmFlushPayload,
    TimerPayload,
)
from parqnet.qsm import QsmOp, QsmRequest, QsmResponse, QuantumState

BELL = (complex(1 / math.sqrt(2)), 0j, 0j, complex(1 / math.sqrt(2)))


def roundtrip_event(event):
    blob = wire.encode_event(event)
    return wire.decode_event(wire.Cursor(blob))


def test_event_payload_roundtrips():
    events = [
        Event(time=123, target=4, seq=9, payload=PhotonPayload(
            session=2, photon=77, hop=3, sender_basis=1, sender_bit=0,
            cum_correction=1, bases_matched_so_far=True)),
        Event(time=5, target=0, seq=1, payload=ClassicalPayload(
            session=1, photon=8, counted=True)),
        Event(time=2**63, target=2**32 - 1, seq=2**40, payload=TimerPayload(
            session=1023)),
        Event(time=0, target=1, seq=0, payload=QsmFlushPayload(marker=7)),
    ]
    for ev in events:
        back = roundtrip_event(ev)
        assert back.time == ev.time
        assert back.seq == ev.seq
        assert back.target == ev.target
        assert back.payload == ev.payload


def test_event_batch_roundtrip():
    events = [
        Event(time=10 + i, target=i, seq=i,
              payload=TimerPayload(session=i)) for i in range(5)
    ]
    blob = wire.encode_event_batch(3, 1, 42, events)
    cur = wire.Cursor(blob)
    assert cur.take("<B") == wire.OP_EVENT_BATCH
    sender, receiver, epoch, back = wire.decode_event_batch(cur)
    assert (sender, receiver, epoch) == (3, 1, 42)
    assert [e.time for e in back] == [e.time for e in events]


def test_propose_commit_roundtrip():
    blob = wire.encode_propose(2, 17, wire.PHASE_REDUCE, 987654321)
    cur = wire.Cursor(blob)
    assert cur.take("<B") == wire.OP_HORIZON_PROPOSE
    assert cur.take("<IQBQ") == (2, 17, wire.PHASE_REDUCE, 987654321)
    blob = wire.encode_commit(17, wire.PHASE_BARRIER, 5)
    cur = wire.Cursor(blob)
    assert cur.take("<B") == wire.OP_HORIZON_COMMIT
    assert cur.take("<QBQ") == (17, wire.PHASE_BARRIER, 5)


def test_qsm_batch_roundtrip():
    requests = [
        QsmRequest(QsmOp.SET, (1, 2), BELL),
        QsmRequest(QsmOp.MEASURE, (1,), rng_draw=0.25),
        QsmRequest(QsmOp.GET, (2,)),
        QsmRequest(QsmOp.REMOVE, (2,)),
    ]
    blob = wire.encode_qsm_batch(6, 1, requests)
    cur = wire.Cursor(blob)
    assert cur.take("<B") == wire.OP_QSM_BATCH
    epoch, worker, back = wire.decode_qsm_batch(cur)
    assert (epoch, worker) == (6, 1)
    assert [r.op for r in back] == [r.op for r in requests]
    assert back[0].amplitudes == BELL
    assert back[1].rng_draw == 0.25
    assert back[3].keys == (2,)


def test_qsm_response_roundtrip_with_migrations():
    responses = [
        (QsmOp.SET, QsmResponse()),
        (QsmOp.MEASURE, QsmResponse(outcome=1, removed=True)),
        (QsmOp.GET, QsmResponse(keys=(4, 9), amplitudes=BELL)),
        (QsmOp.MEASURE, QsmResponse(status=3)),  # in-band error
    ]
    migrations = [QuantumState((12,), (1 + 0j, 0j))]
    blob = wire.encode_qsm_responses(7, 0, responses, migrations)
    cur = wire.Cursor(blob)
    assert cur.take("<B") == wire.OP_QSM_BATCH_RESP
    epoch, worker, back, migs = wire.decode_qsm_responses(cur)
    assert (epoch, worker) == (7, 0)
    assert back[0].ok and back[0].outcome is None
    assert back[1].outcome == 1 and back[1].removed
    assert back[2].keys == (4, 9) and back[2].amplitudes == BELL
    assert back[3].status == 3 and not back[3].ok
    assert migs == migrations
