"""Length-prefixed binary framing for the two socket protocols.

Every frame is a little-endian u32 payload length followed by the payload;
the first payload byte is the opcode. One codec covers worker-to-worker
synchronization traffic (horizon negotiation plus event batches), the
other the global quantum-state-manager batch protocol.
"""

from __future__ import annotations

import socket
import struct
from typing import Optional

from .errors import TransportFailure
from .kernel import (
    ClassicalPayload,
    Event,
    EventKind,
    PhotonPayload,
    QsmFlushPayload,
    TimerPayload,
)
from .qsm import QsmOp, QsmRequest, QsmResponse, QuantumState

# Sync-protocol opcodes.
OP_HORIZON_PROPOSE = 1
OP_HORIZON_COMMIT = 2
OP_EVENT_BATCH = 3
OP_DONE = 4

# Phases within an epoch rendezvous.
PHASE_BARRIER = 0
PHASE_REDUCE = 1

# QSM-protocol opcodes.
OP_QSM_BATCH = 1
OP_QSM_BATCH_RESP = 2
OP_QSM_SHUTDOWN = 3


def send_frame(sock: socket.socket, payload: bytes) -> None:
    try:
        sock.sendall(struct.pack("<I", len(payload)) + payload)
    except OSError as err:
        raise TransportFailure(str(err)) from err


def recv_frame(sock: socket.socket) -> bytes:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", header)
    return _recv_exact(sock, length)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        try:
            chunk = sock.recv(n)
        except OSError as err:
            raise TransportFailure(str(err)) from err
        if not chunk:
            raise TransportFailure("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


class Cursor:
    """Sequential struct reads over one frame payload."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, fmt: str):
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += struct.calcsize(fmt)
        return values if len(values) > 1 else values[0]

    def take_bytes(self, n: int) -> bytes:
        out = self.data[self.offset:self.offset + n]
        self.offset += n
        return out


# --- sync protocol -------------------------------------------------------

def encode_propose(worker: int, epoch: int, phase: int, value: int) -> bytes:
    return struct.pack("<BIQBQ", OP_HORIZON_PROPOSE, worker, epoch, phase, value)


def encode_commit(epoch: int, phase: int, value: int) -> bytes:
    return struct.pack("<BQBQ", OP_HORIZON_COMMIT, epoch, phase, value)


def encode_done(worker: int, report_json: bytes) -> bytes:
    return struct.pack("<BI", OP_DONE, worker) + report_json


def encode_event(event: Event) -> bytes:
    head = struct.pack("<QQIB", event.time, event.seq, event.target,
                       int(event.payload.kind))
    p = event.payload
    if p.kind == EventKind.PHOTON_ARRIVAL:
        flags = (p.sender_basis | (p.sender_bit << 1) | (p.cum_correction << 2)
                 | (int(p.bases_matched_so_far) << 3))
        return head + struct.pack("<IQHB", p.session, p.photon, p.hop, flags)
    if p.kind == EventKind.CLASSICAL_MESSAGE:
        return head + struct.pack("<IQB", p.session, p.photon, int(p.counted))
    if p.kind == EventKind.PROTOCOL_TIMER:
        return head + struct.pack("<I", p.session)
    return head + struct.pack("<I", p.marker)


def decode_event(cur: Cursor) -> Event:
    time, seq, target, kind = cur.take("<QQIB")
    kind = EventKind(kind)
    if kind == EventKind.PHOTON_ARRIVAL:
        session, photon, hop, flags = cur.take("<IQHB")
        payload = PhotonPayload(
            session=session, photon=photon, hop=hop,
            sender_basis=flags & 1,
            sender_bit=(flags >> 1) & 1,
            cum_correction=(flags >> 2) & 1,
            bases_matched_so_far=bool((flags >> 3) & 1),
        )
    elif kind == EventKind.CLASSICAL_MESSAGE:
        session, photon, counted = cur.take("<IQB")
        payload = ClassicalPayload(session=session, photon=photon,
                                   counted=bool(counted))
    elif kind == EventKind.PROTOCOL_TIMER:
        session = cur.take("<I")
        payload = TimerPayload(session=session)
    else:
        marker = cur.take("<I")
        payload = QsmFlushPayload(marker=marker)
    return Event(time=time, target=target, payload=payload, seq=seq)


def encode_event_batch(sender: int, receiver: int, epoch: int,
                       events: list[Event]) -> bytes:
    parts = [struct.pack("<BIIQI", OP_EVENT_BATCH, sender, receiver, epoch,
                         len(events))]
    parts.extend(encode_event(ev) for ev in events)
    return b"".join(parts)


def decode_event_batch(cur: Cursor) -> tuple[int, int, int, list[Event]]:
    sender, receiver, epoch, count = cur.take("<IIQI")
    events = [decode_event(cur) for _ in range(count)]
    return sender, receiver, epoch, events


# --- QSM protocol --------------------------------------------------------

def _encode_amps(amps) -> bytes:
    parts = [struct.pack("<I", len(amps))]
    parts.extend(struct.pack("<dd", a.real, a.imag) for a in amps)
    return b"".join(parts)


def _decode_amps(cur: Cursor) -> tuple[complex, ...]:
    count = cur.take("<I")
    return tuple(complex(*cur.take("<dd")) for _ in range(count))


def encode_qsm_batch(epoch: int, worker: int,
                     requests: list[QsmRequest]) -> bytes:
    parts = [struct.pack("<BQII", OP_QSM_BATCH, epoch, worker, len(requests))]
    for req in requests:
        parts.append(struct.pack("<BB", int(req.op), len(req.keys)))
        parts.extend(struct.pack("<Q", k) for k in req.keys)
        parts.append(_encode_amps(req.amplitudes or ()))
        if req.op == QsmOp.MEASURE:
            parts.append(struct.pack("<d", req.rng_draw))
    return b"".join(parts)


def decode_qsm_batch(cur: Cursor) -> tuple[int, int, list[QsmRequest]]:
    epoch, worker, count = cur.take("<QII")
    requests = []
    for _ in range(count):
        op, key_count = cur.take("<BB")
        op = QsmOp(op)
        keys = tuple(cur.take("<Q") for _ in range(key_count))
        amps = _decode_amps(cur)
        draw = cur.take("<d") if op == QsmOp.MEASURE else None
        requests.append(QsmRequest(op=op, keys=keys,
                                   amplitudes=amps or None, rng_draw=draw))
    return epoch, worker, requests


def encode_qsm_responses(epoch: int, worker: int,
                         responses: list[tuple[QsmOp, QsmResponse]],
                         migrations: list[QuantumState]) -> bytes:
    parts = [struct.pack("<BQII", OP_QSM_BATCH_RESP, epoch, worker,
                         len(responses))]
    for op, resp in responses:
        parts.append(struct.pack("<BB", resp.status, int(op)))
        if not resp.ok:
            continue
        if op == QsmOp.MEASURE:
            parts.append(struct.pack("<BB", resp.outcome, int(resp.removed)))
        elif op == QsmOp.GET:
            parts.append(struct.pack("<B", len(resp.keys)))
            parts.extend(struct.pack("<Q", k) for k in resp.keys)
            parts.append(_encode_amps(resp.amplitudes))
    parts.append(struct.pack("<I", len(migrations)))
    for state in migrations:
        parts.append(struct.pack("<B", len(state.keys)))
        parts.extend(struct.pack("<Q", k) for k in state.keys)
        parts.append(_encode_amps(state.amplitudes))
    return b"".join(parts)


def decode_qsm_responses(cur: Cursor) -> tuple[
        int, int, list[QsmResponse], list[QuantumState]]:
    epoch, worker, count = cur.take("<QII")
    responses = []
    for _ in range(count):
        status, op = cur.take("<BB")
        op = QsmOp(op)
        resp = QsmResponse(status=status)
        if status == 0:
            if op == QsmOp.MEASURE:
                outcome, removed = cur.take("<BB")
                resp.outcome = outcome
                resp.removed = bool(removed)
            elif op == QsmOp.GET:
                key_count = cur.take("<B")
                resp.keys = tuple(cur.take("<Q") for _ in range(key_count))
                resp.amplitudes = _decode_amps(cur)
        responses.append(resp)
    mig_count = cur.take("<I")
    migrations = []
    for _ in range(mig_count):
        key_count = cur.take("<B")
        keys = tuple(cur.take("<Q") for _ in range(key_count))
        amps = _decode_amps(cur)
        migrations.append(QuantumState(keys, amps))
    return epoch, worker, responses, migrations


def encode_qsm_shutdown() -> bytes:
    return struct.pack("<B", OP_QSM_SHUTDOWN)
