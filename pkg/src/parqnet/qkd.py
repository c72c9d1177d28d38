"""Simplified key-relay QKD workload over the simulated network.

Each session runs BB84-style sifting over a trusted-node relay: the source
emits photons on a fixed period, every hop survives fiber loss with
probability 10^(-loss_dB/10), and a surviving hop creates a Bell pair in
the state manager that both endpoints measure. A photon contributes one
sifted key bit when it reaches the destination with every hop's bases
matching; the relay's XOR corrections ride along with the photon so the
endpoints finish with bit-identical keys.

All randomness is drawn from per-(session, photon, hop) streams derived by
hashing the run seed, never from shared generator state, so outcomes are
identical no matter how routers are partitioned or interleaved.

Measurement outcomes from the global state manager arrive only when the
epoch's batch is flushed, so handlers never branch on them: a fresh Bell
pair's outcome is implied by the supplied draw (P(0) is exactly 1/2), and
the flush response is checked against that prediction after the fact.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError, UnknownSession
from .kernel import (
    ClassicalPayload,
    Event,
    PhotonPayload,
    TimerPayload,
    Timeline,
)
from .qsm import QsmOp, QsmRequest
from .qsm_client import QsmClient
from .topology import Topology, survival_probability

# Draw purposes.
TAG_SURVIVAL = 0
TAG_BASIS_TX = 1
TAG_BASIS_RX = 2
TAG_MEAS_TX = 3
TAG_MEAS_RX = 4

# Memory-key packing: router(20) | session(10) | photon(26) | hop(7) | side(1).
_ROUTER_SHIFT = 44
_SESSION_SHIFT = 34
_PHOTON_SHIFT = 8
_HOP_SHIFT = 1
MAX_PHOTONS = 1 << 26
MAX_HOPS = 1 << 7

_BELL_PAIR = (complex(1 / math.sqrt(2)), 0j, 0j, complex(1 / math.sqrt(2)))
# P(0) of a fresh pair exactly as the store computes it, so a sender can
# predict its own measurement outcome from the draw it supplies.
_BELL_P0 = (_BELL_PAIR[0].real * _BELL_PAIR[0].real
            + _BELL_PAIR[0].imag * _BELL_PAIR[0].imag
            + _BELL_PAIR[1].real * _BELL_PAIR[1].real
            + _BELL_PAIR[1].imag * _BELL_PAIR[1].imag)


def pack_key(router: int, session: int, photon: int, hop: int, side: int) -> int:
    return ((router << _ROUTER_SHIFT) | (session << _SESSION_SHIFT)
            | (photon << _PHOTON_SHIFT) | (hop << _HOP_SHIFT) | side)


def router_of_key(key: int) -> int:
    return key >> _ROUTER_SHIFT


def session_stream_id(source: str, destination: str, occurrence: int) -> int:
    """Stable identity for a session's random streams.

    Derived from the endpoint names (plus a disambiguator for repeated
    pairs) rather than the session's position in the workload, so removing
    one session never perturbs another session's randomness.
    """
    blob = f"{source}|{destination}|{occurrence}".encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(),
                          "little")


def draw(seed: int, stream: int, photon: int, hop: int, tag: int) -> float:
    """Deterministic uniform draw in [0, 1) for one protocol step."""
    digest = hashlib.blake2b(
        struct.pack("<QQQHB", seed, stream, photon, hop, tag),
        digest_size=8,
    ).digest()
    return int.from_bytes(digest, "little") / 2.0**64


def draw_bit(seed: int, stream: int, photon: int, hop: int, tag: int) -> int:
    return 1 if draw(seed, stream, photon, hop, tag) >= 0.5 else 0


@dataclass
class SessionRuntime:
    """Static per-session routing data shared by all routers on the path."""

    sid: int
    stream: int                     # seed component for this session's draws
    path: list[int]                 # router indices, source first
    hop_delays: list[int]           # quantum delay per hop, ps
    hop_survival: list[float]       # survival probability per hop
    ack_delay_ps: int               # classical delay, destination back to source
    period_ps: int
    target_bits: int
    start_offset_ps: int


@dataclass
class SourceState:
    next_photon: int = 0
    count: int = 0
    bits: list[tuple[int, int]] = field(default_factory=list)  # (photon, bit)
    pending: dict[int, int] = field(default_factory=dict)
    complete_time: Optional[int] = None


@dataclass
class DestState:
    count: int = 0
    bits: list[tuple[int, int]] = field(default_factory=list)


class Network:
    """Read-only precomputation shared by every router entity.

    Holds router indexing, per-channel delay and survival tables, and the
    BFS route plus acknowledgment delay of every session.
    """

    def __init__(self, topology: Topology, seed: Optional[int] = None):
        topology.validate()
        self.topology = topology
        self.seed = topology.seed if seed is None else seed
        self.n_routers = len(topology.routers)
        self._qdelay: dict[tuple[int, int], int] = {}
        self._survival: dict[tuple[int, int], float] = {}
        self._cdelay: dict[tuple[int, int], int] = {}
        for ch in topology.qchannels:
            a = topology.router_index(ch.src)
            b = topology.router_index(ch.dst)
            p = survival_probability(ch.attenuation_db_per_km, ch.distance_m)
            for pair in ((a, b), (b, a)):
                self._qdelay[pair] = ch.delay_ps
                self._survival[pair] = p
        for ch in topology.cchannels:
            a = topology.router_index(ch.src)
            b = topology.router_index(ch.dst)
            self._cdelay[(a, b)] = ch.delay_ps
            self._cdelay[(b, a)] = ch.delay_ps
        self.sessions: list[SessionRuntime] = []
        pair_seen: dict[tuple[str, str], int] = {}
        for sid, spec in enumerate(topology.sessions):
            path = [topology.router_index(n)
                    for n in topology.shortest_path(spec.source,
                                                    spec.destination)]
            if len(path) > MAX_HOPS:
                raise ConfigError(f"session {sid} path exceeds {MAX_HOPS} hops")
            pair = (spec.source, spec.destination)
            occurrence = pair_seen.get(pair, 0)
            pair_seen[pair] = occurrence + 1
            hops = list(zip(path, path[1:]))
            self.sessions.append(SessionRuntime(
                sid=sid,
                stream=session_stream_id(spec.source, spec.destination,
                                         occurrence),
                path=path,
                hop_delays=[self._qdelay[h] for h in hops],
                hop_survival=[self._survival[h] for h in hops],
                ack_delay_ps=sum(self._cdelay_for(h) for h in hops),
                period_ps=spec.period_ps,
                target_bits=spec.target_bits,
                start_offset_ps=spec.start_offset_ps,
            ))

    def _cdelay_for(self, hop: tuple[int, int]) -> int:
        d = self._cdelay.get(hop)
        if d is None:
            # Acks are routed over the session path; require the parallel
            # classical link to exist there.
            raise ConfigError(f"no classical channel along hop {hop}")
        return d

    def quantum_delay(self, a: int, b: int) -> int:
        return self._qdelay[(a, b)]

    def min_cross_delay(self, assignment: dict[int, int]) -> int:
        """Smallest channel delay between routers on different workers."""
        best = None
        for (a, b), d in list(self._qdelay.items()) + list(self._cdelay.items()):
            if assignment[a] != assignment[b]:
                if best is None or d < best:
                    best = d
        return best if best is not None else -1


class RouterEntity:
    """Event handlers for one router; owned by exactly one timeline."""

    def __init__(self, index: int, network: Network, timeline: Timeline,
                 qsm: QsmClient):
        self.index = index
        self.network = network
        self.timeline = timeline
        self.qsm = qsm
        self.as_source: dict[int, SourceState] = {}
        self.as_dest: dict[int, DestState] = {}
        for session in network.sessions:
            if session.path[0] == index:
                self.as_source[session.sid] = SourceState()
            if session.path[-1] == index:
                self.as_dest[session.sid] = DestState()

    def start(self) -> None:
        """Schedule the first emission of every session sourced here."""
        for sid in sorted(self.as_source):
            session = self.network.sessions[sid]
            self.timeline.schedule(Event(
                time=session.start_offset_ps,
                target=self.index,
                payload=TimerPayload(session=sid),
            ))

    def handle(self, event: Event) -> None:
        payload = event.payload
        if isinstance(payload, TimerPayload):
            self._handle_emit(event.time, payload)
        elif isinstance(payload, PhotonPayload):
            self._handle_photon(event.time, payload)
        elif isinstance(payload, ClassicalPayload):
            self._handle_ack(payload)

    # -- emission ----------------------------------------------------------

    def _handle_emit(self, now: int, payload: TimerPayload) -> None:
        state = self.as_source.get(payload.session)
        if state is None:
            raise UnknownSession(f"session {payload.session} at router {self.index}")
        session = self.network.sessions[payload.session]
        if state.count >= session.target_bits:
            return  # session complete; stop the emission clock
        photon = state.next_photon
        state.next_photon += 1
        if photon + 1 < MAX_PHOTONS:
            self.timeline.schedule(Event(
                time=now + session.period_ps,
                target=self.index,
                payload=TimerPayload(session=payload.session),
            ))
        sent = self._send_hop(now, session, photon, hop=0,
                              cum_correction=0, matched_so_far=True,
                              prev_sender_bit=0)
        if sent is not None:
            state.pending[photon] = sent

    # -- relay / arrival ---------------------------------------------------

    def _handle_photon(self, now: int, payload: PhotonPayload) -> None:
        session = self._session(payload.session)
        hop = payload.hop
        if session.path[hop + 1] != self.index:
            raise UnknownSession(
                f"photon for session {payload.session} hop {hop} "
                f"misdelivered to router {self.index}")
        basis_rx = draw_bit(self.network.seed, session.stream, payload.photon,
                            hop, TAG_BASIS_RX)
        matched = payload.bases_matched_so_far and basis_rx == payload.sender_basis
        rx_key = pack_key(self.index, session.sid, payload.photon, hop, 1)
        if self._hop_is_remote(session, hop):
            # The pair was created by a remote sender, so it lives in the
            # global store unless it has already migrated back to us.
            self.qsm.mark_global([rx_key])
        expected = payload.sender_bit
        is_dest = hop + 1 == len(session.path) - 1
        record_bit = False
        if is_dest:
            dest = self.as_dest[session.sid]
            if matched and dest.count < session.target_bits:
                dest.count += 1
                record_bit = True
                self.timeline.schedule(Event(
                    time=now + session.ack_delay_ps,
                    target=session.path[0],
                    payload=ClassicalPayload(session=session.sid,
                                             photon=payload.photon,
                                             counted=True),
                ))
        correction = payload.cum_correction
        photon = payload.photon

        def on_measure(response, *, _dest_sid=session.sid):
            if not response.ok or response.outcome != expected:
                raise AssertionError(
                    f"measurement drift: session {_dest_sid} photon {photon}")
            if record_bit:
                self.as_dest[_dest_sid].bits.append(
                    (photon, response.outcome ^ correction))

        meas_draw = draw(self.network.seed, session.stream, photon, hop,
                         TAG_MEAS_RX)
        self.qsm.submit(QsmRequest(QsmOp.MEASURE, (rx_key,),
                                   rng_draw=meas_draw), on_measure)
        if not is_dest:
            self._send_hop(now, session, photon, hop + 1,
                           cum_correction=payload.cum_correction,
                           matched_so_far=matched,
                           prev_sender_bit=payload.sender_bit)

    def _handle_ack(self, payload: ClassicalPayload) -> None:
        state = self.as_source.get(payload.session)
        if state is None:
            raise UnknownSession(f"ack for session {payload.session}")
        session = self.network.sessions[payload.session]
        bit = state.pending.pop(payload.photon, None)
        if payload.counted and state.count < session.target_bits:
            if bit is None:
                raise AssertionError(
                    f"ack for session {payload.session} photon "
                    f"{payload.photon} without a pending source bit")
            state.count += 1
            state.bits.append((payload.photon, bit))
            if state.count >= session.target_bits:
                state.complete_time = self.timeline.now

    # -- hop transmission ----------------------------------------------------

    def _send_hop(self, now: int, session: SessionRuntime, photon: int,
                  hop: int, cum_correction: int, matched_so_far: bool,
                  prev_sender_bit: int) -> Optional[int]:
        """Attempt one hop; returns the sender's bit, or None on loss."""
        sid = session.sid
        stream = session.stream
        if draw(self.network.seed, stream, photon, hop, TAG_SURVIVAL) \
                >= session.hop_survival[hop]:
            return None  # photon absorbed in fiber
        basis_tx = draw_bit(self.network.seed, stream, photon, hop, TAG_BASIS_TX)
        meas_draw = draw(self.network.seed, stream, photon, hop, TAG_MEAS_TX)
        sender_bit = 0 if meas_draw < _BELL_P0 else 1
        tx_key = pack_key(self.index, sid, photon, hop, 0)
        rx_key = pack_key(session.path[hop + 1], sid, photon, hop, 1)
        self.qsm.submit(QsmRequest(QsmOp.SET, (tx_key, rx_key), _BELL_PAIR))

        def on_measure(response):
            if not response.ok or response.outcome != sender_bit:
                raise AssertionError(
                    f"measurement drift: session {sid} photon {photon}")

        self.qsm.submit(QsmRequest(QsmOp.MEASURE, (tx_key,),
                                   rng_draw=meas_draw), on_measure)
        cum = (cum_correction ^ prev_sender_bit ^ sender_bit) if hop else 0
        self.timeline.schedule(Event(
            time=now + session.hop_delays[hop],
            target=session.path[hop + 1],
            payload=PhotonPayload(
                session=sid, photon=photon, hop=hop,
                sender_basis=basis_tx, sender_bit=sender_bit,
                cum_correction=cum, bases_matched_so_far=matched_so_far,
            ),
        ))
        return sender_bit if hop == 0 else None

    # -- helpers -------------------------------------------------------------

    def _session(self, sid: int) -> SessionRuntime:
        if sid >= len(self.network.sessions):
            raise UnknownSession(f"session {sid}")
        return self.network.sessions[sid]

    def _hop_is_remote(self, session: SessionRuntime, hop: int) -> bool:
        owner = self.qsm.owner_of_key
        tx = pack_key(session.path[hop], session.sid, 0, hop, 0)
        return owner(tx) != self.qsm.worker
