"""Serial discrete-event kernel.

One :class:`Timeline` owns a priority work queue of timestamped events and
a simulation clock, and executes events in (time, seq) order up to a
horizon. Simulated time is an unsigned 64-bit count of picoseconds;
``TIME_INFINITY`` is the reserved "no event" sentinel.

A parallel run gives each worker its own Timeline; everything here is
single-worker code with no locking. Cross-worker traffic is handled by the
``remote_sink`` hook: when set, events targeting entities the timeline does
not own are diverted to it instead of entering the local queue.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional

from .errors import ScheduleInPast

# Reserved maximum of the u64 tick range; means "infinity / no event".
TIME_INFINITY = 2**64 - 1


def saturating_add(a: int, b: int) -> int:
    """Add two tick counts, clamping at the infinity sentinel."""
    if a >= TIME_INFINITY or b >= TIME_INFINITY:
        return TIME_INFINITY
    s = a + b
    return s if s < TIME_INFINITY else TIME_INFINITY


class EventKind(IntEnum):
    PHOTON_ARRIVAL = 0
    CLASSICAL_MESSAGE = 1
    PROTOCOL_TIMER = 2
    QSM_BATCH_FLUSH = 3


@dataclass(frozen=True)
class PhotonPayload:
    """A photon hop in flight on a quantum channel.

    ``sender_bit`` is the transmitting side's measurement outcome and
    ``cum_correction`` the running XOR relay correction; both ride along as
    the classical sideband a trusted-node relay would keep per photon.
    """

    session: int
    photon: int
    hop: int
    sender_basis: int
    sender_bit: int
    cum_correction: int
    bases_matched_so_far: bool

    kind = EventKind.PHOTON_ARRIVAL

    def identity(self) -> tuple:
        return (int(self.kind), self.session, self.photon, self.hop)


@dataclass(frozen=True)
class ClassicalPayload:
    """A classical control message (session acknowledgments)."""

    session: int
    photon: int
    counted: bool

    kind = EventKind.CLASSICAL_MESSAGE

    def identity(self) -> tuple:
        return (int(self.kind), self.session, self.photon, 0)


@dataclass(frozen=True)
class TimerPayload:
    """A protocol self-timer (photon emission ticks at a session source)."""

    session: int

    kind = EventKind.PROTOCOL_TIMER

    def identity(self) -> tuple:
        return (int(self.kind), self.session, 0, 0)


@dataclass(frozen=True)
class QsmFlushPayload:
    """Marker payload for quantum-state-manager batch flush delivery.

    The QKD workload applies flush responses directly at epoch boundaries,
    but workloads that need response handling inside the event stream can
    schedule this kind at a bookkeeping entity.
    """

    marker: int = 0

    kind = EventKind.QSM_BATCH_FLUSH

    def identity(self) -> tuple:
        return (int(self.kind), self.marker, 0, 0)


Payload = PhotonPayload | ClassicalPayload | TimerPayload | QsmFlushPayload


@dataclass
class Event:
    """A timestamped unit of work targeting one simulated entity.

    ``seq`` is assigned by the scheduling timeline and makes (time, seq)
    a total order; it is never reused within a run.
    """

    time: int
    target: int
    payload: Payload
    seq: Optional[int] = None
    cancelled: bool = False

    def sort_key(self) -> tuple[int, int]:
        return (self.time, self.seq)


Handler = Callable[[Event], None]


@dataclass
class TimelineStats:
    scheduled: int = 0
    executed: int = 0
    cancelled: int = 0


class Timeline:
    """Priority work queue plus simulation clock for one worker.

    Confined to a single worker; never call into one timeline from two
    threads. Cancellation is a tombstone flag (O(1)); tombstoned events are
    dropped, not executed, when they surface.
    """

    def __init__(self, stop_time: int = TIME_INFINITY):
        self.now: int = 0
        self.stop_time: int = stop_time
        self.handlers: dict[int, Handler] = {}
        self.stats = TimelineStats()
        # Per-entity execution log: (target, time, payload identity tuple).
        self.execution_log: list[tuple] = []
        self.remote_sink: Optional[Callable[[Event], bool]] = None
        self._heap: list[tuple[int, int, Event]] = []
        self._next_seq: int = 0

    def add_entity(self, entity_id: int, handler: Handler) -> None:
        self.handlers[entity_id] = handler

    def owns(self, entity_id: int) -> bool:
        return entity_id in self.handlers

    def schedule(self, event: Event) -> Event:
        """Queue an event, assigning its seq if unset.

        Events targeting entities this timeline does not own are handed to
        ``remote_sink`` (parallel mode) instead of entering the queue.
        """
        if event.time < self.now:
            raise ScheduleInPast(
                f"event at t={event.time} scheduled while now={self.now}"
            )
        if self.remote_sink is not None and not self.owns(event.target):
            if event.seq is None:
                event.seq = self._take_seq()
            self.remote_sink(event)
            return event
        if event.seq is None:
            event.seq = self._take_seq()
        heapq.heappush(self._heap, (event.time, event.seq, event))
        self.stats.scheduled += 1
        return event

    def insert_remote(self, event: Event) -> None:
        """Insert an already re-sequenced remote event (see merge logic)."""
        event.seq = self._take_seq()
        heapq.heappush(self._heap, (event.time, event.seq, event))
        self.stats.scheduled += 1

    def cancel(self, event: Event) -> None:
        """Tombstone a locally queued event. Idempotent."""
        if not event.cancelled:
            event.cancelled = True
            self.stats.cancelled += 1

    def peek_next_time(self) -> int:
        """Earliest queued event time, or TIME_INFINITY when drained.

        Tombstoned events at the head are discarded here so the returned
        time always refers to a live event.
        """
        while self._heap:
            _, _, ev = self._heap[0]
            if ev.cancelled:
                heapq.heappop(self._heap)
                continue
            return ev.time
        return TIME_INFINITY

    def run_until(self, horizon: int) -> int:
        """Execute all live events in the half-open window [now, horizon).

        Events at exactly ``horizon`` stay queued for the next window. The
        clock lands on ``horizon`` even when the queue drains early.
        """
        if horizon < self.now:
            raise ScheduleInPast(
                f"run_until horizon {horizon} behind clock {self.now}"
            )
        executed = 0
        while self._heap:
            t, _, ev = self._heap[0]
            if t >= horizon:
                break
            heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self.now = ev.time
            self.execution_log.append((ev.target, ev.time) + ev.payload.identity())
            self.handlers[ev.target](ev)
            self.stats.executed += 1
            executed += 1
        self.now = horizon if horizon < TIME_INFINITY else self.now
        return executed

    def pending_count(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.cancelled)

    def _take_seq(self) -> int:
        seq = self._next_seq
        self._next_seq += 1
        return seq
