"""Conservative epoch synchronization.

Workers advance in lockstep synchronization epochs. Each epoch they
process local events up to an agreed horizon, flush quantum-state-manager
batches, meet at a barrier (timed separately so straggler wait is visible
apart from real communication), then exchange diverted cross-worker events
and agree on the next horizon in a single reduce.

The horizon for an epoch is min-next-event-time across workers plus the
lookahead: the smallest propagation delay of any channel whose endpoints
live on different workers. Nothing a worker does before the horizon can
affect another worker earlier than that, which is the causality argument
for executing the window without further coordination.

A worker's reduce proposal is the minimum over its queue AND its outgoing
batches, so events in flight during the exchange still hold the global
minimum down.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Optional

from .errors import CausalityViolation, ConfigError, EmptyTopology, TransportFailure
from .kernel import TIME_INFINITY, Event, Timeline, saturating_add
from .topology import Topology
from . import wire


@dataclass(frozen=True)
class ParallelConfig:
    num_workers: int
    assignment: dict  # router name -> worker id
    transport: str = "inproc"  # "inproc" (threads) or "socket" (processes)

    def __post_init__(self):
        if self.num_workers < 1:
            raise ConfigError("num_workers must be >= 1")
        if self.transport not in ("inproc", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}")


@dataclass(frozen=True)
class EpochPlan:
    epoch_index: int
    epoch_start: int
    horizon: int
    lookahead: int
    completed: bool = False


@dataclass
class EpochTiming:
    worker: int
    epoch_index: int
    compute_ns: int = 0
    barrier_wait_ns: int = 0
    exchange_ns: int = 0
    qsm_socket_ns: int = 0
    events_executed: int = 0

    def total_ns(self) -> int:
        return (self.compute_ns + self.barrier_wait_ns
                + self.exchange_ns + self.qsm_socket_ns)


@dataclass
class RemoteEventBatch:
    sender: int
    receiver: int
    events: list[Event] = field(default_factory=list)


def compute_lookahead(topology: Topology, assignment: dict) -> int:
    """Minimum propagation delay over channels that cross workers.

    Returns the infinity sentinel when no channel crosses a worker
    boundary (pure serial execution).
    """
    if not topology.routers:
        raise EmptyTopology("no routers")
    for r in topology.routers:
        if r.name not in assignment:
            raise ConfigError(f"router {r.name!r} not in partition")
    best = TIME_INFINITY
    for ch in list(topology.qchannels) + list(topology.cchannels):
        if assignment[ch.src] != assignment[ch.dst]:
            best = min(best, ch.delay_ps)
    return best


def plan_from_min(global_min: int, epoch_index: int, epoch_start: int,
                  lookahead: int, stop_time: int) -> EpochPlan:
    if global_min >= stop_time or global_min >= TIME_INFINITY:
        return EpochPlan(epoch_index, epoch_start, epoch_start, lookahead,
                         completed=True)
    horizon = min(saturating_add(global_min, lookahead), stop_time)
    return EpochPlan(epoch_index, epoch_start, horizon, lookahead)


def negotiate_horizon(local_next_times: list[int], lookahead: int,
                      epoch_index: int = 0, epoch_start: int = 0,
                      stop_time: int = TIME_INFINITY) -> EpochPlan:
    """Agree on the epoch horizon from every worker's next event time.

    Identical inputs on every worker yield the identical plan; in the
    orchestrated runs the reduction happens once at the hub and only the
    reduced minimum is distributed.
    """
    if not local_next_times:
        raise ConfigError("need at least one worker's next event time")
    return plan_from_min(min(local_next_times), epoch_index, epoch_start,
                         lookahead, stop_time)


def merge_remote_events(timeline: Timeline, batches: list[RemoteEventBatch],
                        epoch_start: int) -> int:
    """Insert exchanged events into the local queue.

    Events are re-sequenced by (time, sender worker, sender-local seq) so
    the merged order is independent of message arrival order, then receive
    fresh local seq numbers in that order. An event timestamped before the
    upcoming epoch's start means lookahead was wrong: fatal.
    """
    flat = []
    for batch in batches:
        for ev in batch.events:
            if ev.time < epoch_start:
                raise CausalityViolation(
                    f"remote event at t={ev.time} inside committed window "
                    f"(epoch_start={epoch_start}, sender={batch.sender})")
            flat.append((ev.time, batch.sender, ev.seq, ev))
    flat.sort(key=lambda item: item[:3])
    for _, _, _, ev in flat:
        timeline.insert_remote(ev)
    return len(flat)


class ExchangePort:
    """One worker's handle on the epoch rendezvous."""

    def barrier(self, epoch: int) -> None:
        raise NotImplementedError

    def exchange(self, epoch: int, proposal: int,
                 outgoing: dict[int, list[Event]]
                 ) -> tuple[int, list[RemoteEventBatch]]:
        """Deposit proposal + batches; returns (global min, my batches)."""
        raise NotImplementedError

    def done(self, report_blob: bytes) -> None:
        pass

    def close(self) -> None:
        pass


class NullExchange(ExchangePort):
    """Degenerate single-worker port: the barrier and exchange still
    "happen" so the epoch structure is uniform, at zero cost."""

    def barrier(self, epoch: int) -> None:
        return

    def exchange(self, epoch, proposal, outgoing):
        if outgoing:
            raise CausalityViolation("cross-worker event with one worker")
        return proposal, []


class InprocHub:
    """Shared-memory rendezvous for worker threads in one process."""

    def __init__(self, num_workers: int):
        self.num_workers = num_workers
        self._barrier = threading.Barrier(num_workers)
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._slots: dict[int, dict[int, tuple[int, dict[int, list[Event]]]]] = {}
        self._failure: Optional[BaseException] = None

    def port(self, worker: int) -> "InprocPort":
        return InprocPort(self, worker)

    def abort(self, exc: BaseException) -> None:
        with self._cond:
            self._failure = exc
            self._cond.notify_all()
        self._barrier.abort()

    def wait_barrier(self) -> None:
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise TransportFailure("barrier broken by aborted peer") from None

    def rendezvous(self, worker: int, epoch: int, proposal: int,
                   outgoing: dict[int, list[Event]]
                   ) -> tuple[int, list[RemoteEventBatch]]:
        with self._cond:
            slot = self._slots.setdefault(epoch, {})
            slot[worker] = (proposal, outgoing)
            self._cond.notify_all()
            while len(slot) < self.num_workers:
                if self._failure is not None:
                    raise TransportFailure(str(self._failure))
                self._cond.wait(timeout=0.5)
            global_min = min(p for p, _ in slot.values())
            incoming = []
            for sender in sorted(slot):
                events = slot[sender][1].get(worker)
                if events:
                    incoming.append(RemoteEventBatch(sender, worker, events))
            self._slots.pop(epoch - 2, None)
            return global_min, incoming


class InprocPort(ExchangePort):
    def __init__(self, hub: InprocHub, worker: int):
        self.hub = hub
        self.worker = worker

    def barrier(self, epoch: int) -> None:
        self.hub.wait_barrier()

    def exchange(self, epoch, proposal, outgoing):
        return self.hub.rendezvous(self.worker, epoch, proposal, outgoing)


class SocketExchangePort(ExchangePort):
    """Worker-side client of the sync hub for process deployment."""

    def __init__(self, host: str, port: int, worker: int):
        self.worker = worker
        self._sock = socket.create_connection((host, port))
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def barrier(self, epoch: int) -> None:
        wire.send_frame(self._sock, wire.encode_propose(
            self.worker, epoch, wire.PHASE_BARRIER, 0))
        payload = wire.recv_frame(self._sock)
        cur = wire.Cursor(payload)
        op = cur.take("<B")
        _, phase, _ = cur.take("<QBQ")
        if op != wire.OP_HORIZON_COMMIT or phase != wire.PHASE_BARRIER:
            raise TransportFailure("expected barrier release")

    def exchange(self, epoch, proposal, outgoing):
        for receiver in sorted(outgoing):
            if outgoing[receiver]:
                wire.send_frame(self._sock, wire.encode_event_batch(
                    self.worker, receiver, epoch, outgoing[receiver]))
        wire.send_frame(self._sock, wire.encode_propose(
            self.worker, epoch, wire.PHASE_REDUCE, proposal))
        incoming: list[RemoteEventBatch] = []
        while True:
            payload = wire.recv_frame(self._sock)
            cur = wire.Cursor(payload)
            op = cur.take("<B")
            if op == wire.OP_EVENT_BATCH:
                sender, receiver, _, events = wire.decode_event_batch(cur)
                incoming.append(RemoteEventBatch(sender, receiver, events))
            elif op == wire.OP_HORIZON_COMMIT:
                _, phase, value = cur.take("<QBQ")
                if phase != wire.PHASE_REDUCE:
                    raise TransportFailure("unexpected commit phase")
                return value, incoming
            else:
                raise TransportFailure(f"unexpected sync opcode {op}")

    def done(self, report_blob: bytes) -> None:
        wire.send_frame(self._sock, wire.encode_done(self.worker, report_blob))

    def close(self) -> None:
        self._sock.close()


class SyncServer:
    """Hub side of the socket sync protocol.

    Thread per connection; the last worker to arrive at each phase
    releases everyone. Event batches are forwarded to their destination
    worker ahead of the phase commit, in sender order.
    """

    def __init__(self, num_workers: int, host: str = "127.0.0.1", port: int = 0):
        self.num_workers = num_workers
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(num_workers + 4)
        self.host, self.port = self._listener.getsockname()
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._conns: dict[int, socket.socket] = {}
        self._arrived: dict[tuple[int, int], dict[int, int]] = {}
        self._batches: dict[int, dict[int, list[bytes]]] = {}
        self.reports: dict[int, bytes] = {}
        self._failure: Optional[BaseException] = None
        self._threads: list[threading.Thread] = []
        self._accepting = True
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="sync-accept", daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        for _ in range(self.num_workers):
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve, args=(conn,),
                                 name="sync-conn", daemon=True)
            t.start()
            self._threads.append(t)

    def _serve(self, conn: socket.socket) -> None:
        worker = None
        try:
            while True:
                payload = wire.recv_frame(conn)
                cur = wire.Cursor(payload)
                op = cur.take("<B")
                if op == wire.OP_HORIZON_PROPOSE:
                    worker, epoch, phase, value = cur.take("<IQBQ")
                    self._register(worker, conn)
                    self._phase_rendezvous(worker, epoch, phase, value)
                elif op == wire.OP_EVENT_BATCH:
                    # Forwarded opaquely; only the header matters here.
                    _, receiver, epoch = struct.unpack_from("<IIQ", payload, 1)
                    with self._cond:
                        self._batches.setdefault(epoch, {}).setdefault(
                            receiver, []).append(payload)
                elif op == wire.OP_DONE:
                    worker = cur.take("<I")
                    blob = payload[5:]
                    with self._cond:
                        self.reports[worker] = blob
                        # A DONE while peers sit in a rendezvous means this
                        # worker bailed out mid-epoch: release everyone.
                        if self._arrived and self._failure is None:
                            self._failure = TransportFailure(
                                f"worker {worker} left mid-epoch")
                            for conn_ in self._conns.values():
                                try:
                                    conn_.close()
                                except OSError:
                                    pass
                        self._cond.notify_all()
                    return
                else:
                    raise TransportFailure(f"unexpected sync opcode {op}")
        except TransportFailure as err:
            self.abort(err)
        finally:
            conn.close()

    def _register(self, worker: int, conn: socket.socket) -> None:
        with self._cond:
            self._conns[worker] = conn

    def _phase_rendezvous(self, worker: int, epoch: int, phase: int,
                          value: int) -> None:
        with self._cond:
            key = (epoch, phase)
            slot = self._arrived.setdefault(key, {})
            slot[worker] = value
            if len(slot) == self.num_workers:
                self._release(epoch, phase, slot)
                self._arrived.pop(key, None)
                self._cond.notify_all()

    def _release(self, epoch: int, phase: int, slot: dict[int, int]) -> None:
        # Called with the lock held by the last arriver.
        if phase == wire.PHASE_REDUCE:
            global_min = min(slot.values())
            per_receiver = self._batches.pop(epoch, {})
            for w in sorted(self._conns):
                for frame in per_receiver.get(w, []):
                    wire.send_frame(self._conns[w], frame)
                wire.send_frame(self._conns[w],
                                wire.encode_commit(epoch, phase, global_min))
        else:
            for w in sorted(self._conns):
                wire.send_frame(self._conns[w],
                                wire.encode_commit(epoch, phase, 0))

    def abort(self, exc: BaseException) -> None:
        with self._cond:
            if self._failure is None:
                self._failure = exc
            self._cond.notify_all()

    def wait_reports(self, timeout: float = 600.0,
                     liveness=None) -> dict[int, bytes]:
        """Block until every worker reported, or a failure released us.

        ``liveness`` is polled about once a second; returning False marks
        the run failed (a worker process died without reporting). On
        failure the reports gathered so far are returned (they may carry
        the original error); an empty set raises instead.
        """
        deadline = None if timeout is None else \
            (threading.TIMEOUT_MAX if timeout <= 0 else timeout)
        waited = 0.0
        with self._cond:
            while (len(self.reports) != self.num_workers
                   and self._failure is None):
                self._cond.wait(timeout=1.0)
                waited += 1.0
                if liveness is not None and not liveness():
                    # Give in-flight DONE frames a moment to land.
                    self._cond.wait(timeout=1.0)
                    if len(self.reports) != self.num_workers:
                        self._failure = TransportFailure(
                            "worker process died before reporting")
                    break
                if deadline is not None and waited >= deadline:
                    break
            if len(self.reports) == self.num_workers:
                return dict(self.reports)
            if self.reports:
                return dict(self.reports)
            if self._failure is not None:
                raise TransportFailure(str(self._failure))
            raise TransportFailure("timed out waiting for worker reports")

    def stop(self) -> None:
        self._accepting = False
        try:
            self._listener.close()
        except OSError:
            pass
        for t in self._threads:
            t.join(timeout=2.0)
