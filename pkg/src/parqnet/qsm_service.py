"""Global quantum state manager service.

One process-wide (or network-wide) store for states entangled across
workers. Requests arrive as per-epoch batches; the service gathers every
worker's batch for an epoch, applies them serially in ascending worker id,
and answers each batch in request order. The serialized application order
makes response streams deterministic even when two workers touch the same
entangled state in one epoch.

Workers with nothing to send still report the epoch (an empty batch),
which is a fire-and-forget note: it unblocks the gather without costing
the sender a round trip.

After an epoch is applied, any state whose keys have all collapsed onto a
single worker is queued for ownership migration and handed back with that
worker's next response-bearing flush.
"""

from __future__ import annotations

import socket
import struct
import threading
from typing import Callable, Optional

from .errors import TransportFailure
from .qsm import QsmRequest, QsmResponse, QsmStore, QuantumState
from . import wire


class GlobalQsmCoordinator:
    """Deterministic batch application engine shared by both transports."""

    def __init__(self, num_workers: int, owner_of_key: Callable[[int], int]):
        self.num_workers = num_workers
        self.owner_of_key = owner_of_key
        self.store = QsmStore()
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._pending: dict[int, dict[int, list[QsmRequest]]] = {}
        self._responses: dict[tuple[int, int], list[QsmResponse]] = {}
        self._applied_through = -1
        self._failure: Optional[BaseException] = None

    def note_empty(self, worker: int, epoch: int) -> None:
        with self._cond:
            self._record(worker, epoch, [])
            self._advance()
            self._cond.notify_all()

    def flush(self, worker: int, epoch: int,
              requests: list[QsmRequest]) -> tuple[list[QsmResponse],
                                                   list[QuantumState]]:
        with self._cond:
            self._record(worker, epoch, requests)
            self._cond.notify_all()
            key = (epoch, worker)
            while key not in self._responses:
                if self._failure is not None:
                    raise TransportFailure(str(self._failure))
                if self._ready_to_apply(self._applied_through + 1):
                    self._advance()
                    self._cond.notify_all()
                    continue
                self._cond.wait(timeout=0.5)
            responses = self._responses.pop(key)
            return responses, self._collect_migrations(worker)

    def abort(self, exc: BaseException) -> None:
        with self._cond:
            self._failure = exc
            self._cond.notify_all()

    def _record(self, worker: int, epoch: int,
                requests: list[QsmRequest]) -> None:
        slot = self._pending.setdefault(epoch, {})
        if worker in slot:
            raise TransportFailure(
                f"worker {worker} reported epoch {epoch} twice")
        slot[worker] = requests

    def _ready_to_apply(self, epoch: int) -> bool:
        if epoch != self._applied_through + 1:
            return False
        slot = self._pending.get(epoch, {})
        return len(slot) == self.num_workers

    def _advance(self) -> None:
        while self._ready_to_apply(self._applied_through + 1):
            self._apply_epoch(self._applied_through + 1)

    def _apply_epoch(self, epoch: int) -> None:
        slot = self._pending.pop(epoch)
        for worker in sorted(slot):
            requests = slot[worker]
            if requests:
                self._responses[(epoch, worker)] = [
                    self.store.apply(req) for req in requests
                ]
        self._applied_through = epoch

    def _collect_migrations(self, worker: int) -> list[QuantumState]:
        """Hand back states whose keys have all collapsed onto ``worker``.

        Migration is lazy: a confined state stays serviceable in the global
        store until its owner's next response-bearing flush, so requests
        already in flight for it still resolve here.
        """
        migrations = []
        for state in self.store.states():
            owners = {self.owner_of_key(k) for k in state.keys}
            if owners == {worker}:
                self.store.pop_state(state.keys[0])
                migrations.append(state)
        return migrations

    def drain(self) -> None:
        """Apply any fully reported epochs (used at orderly shutdown)."""
        with self._cond:
            self._advance()


class GlobalConnection:
    """Client-side interface to the global QSM service."""

    def note_empty(self, epoch: int) -> None:
        raise NotImplementedError

    def flush(self, epoch: int, requests: list[QsmRequest]
              ) -> tuple[list[QsmResponse], list[QuantumState]]:
        raise NotImplementedError

    def close(self) -> None:
        pass


class InprocGlobalConnection(GlobalConnection):
    def __init__(self, coordinator: GlobalQsmCoordinator, worker: int):
        self.coordinator = coordinator
        self.worker = worker

    def note_empty(self, epoch: int) -> None:
        self.coordinator.note_empty(self.worker, epoch)

    def flush(self, epoch, requests):
        return self.coordinator.flush(self.worker, epoch, requests)


class SocketGlobalConnection(GlobalConnection):
    def __init__(self, host: str, port: int, worker: int):
        self.worker = worker
        self._sock = socket.create_connection((host, port))
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def note_empty(self, epoch: int) -> None:
        wire.send_frame(self._sock, wire.encode_qsm_batch(epoch, self.worker, []))

    def flush(self, epoch, requests):
        wire.send_frame(self._sock,
                        wire.encode_qsm_batch(epoch, self.worker, requests))
        payload = wire.recv_frame(self._sock)
        cur = wire.Cursor(payload)
        op = cur.take("<B")
        if op != wire.OP_QSM_BATCH_RESP:
            raise TransportFailure(f"unexpected QSM opcode {op}")
        _, _, responses, migrations = wire.decode_qsm_responses(cur)
        return responses, migrations

    def close(self) -> None:
        try:
            wire.send_frame(self._sock, wire.encode_qsm_shutdown())
        except TransportFailure:
            pass
        self._sock.close()


class GlobalQsmServer:
    """TCP front end around a coordinator; one thread per connection."""

    def __init__(self, num_workers: int, owner_of_key: Callable[[int], int],
                 host: str = "127.0.0.1", port: int = 0):
        self.coordinator = GlobalQsmCoordinator(num_workers, owner_of_key)
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(num_workers + 4)
        self.host, self.port = self._listener.getsockname()
        self._threads: list[threading.Thread] = []
        self._accepting = True
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="qsm-accept", daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while self._accepting:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve, args=(conn,),
                                 name="qsm-conn", daemon=True)
            t.start()
            self._threads.append(t)

    def _serve(self, conn: socket.socket) -> None:
        try:
            while True:
                payload = wire.recv_frame(conn)
                cur = wire.Cursor(payload)
                op = cur.take("<B")
                if op == wire.OP_QSM_SHUTDOWN:
                    return
                if op != wire.OP_QSM_BATCH:
                    raise TransportFailure(f"unexpected QSM opcode {op}")
                epoch, worker, requests = wire.decode_qsm_batch(cur)
                if not requests:
                    self.coordinator.note_empty(worker, epoch)
                    continue
                responses, migrations = self.coordinator.flush(
                    worker, epoch, requests)
                paired = list(zip((r.op for r in requests), responses))
                wire.send_frame(conn, wire.encode_qsm_responses(
                    epoch, worker, paired, migrations))
        except TransportFailure:
            pass
        finally:
            conn.close()

    def stop(self) -> None:
        self._accepting = False
        try:
            self._listener.close()
        except OSError:
            pass
        for t in self._threads:
            t.join(timeout=2.0)
