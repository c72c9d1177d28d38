"""Per-worker view of the quantum state manager hierarchy.

Each worker holds a local store for states confined to its own routers and
a connection to the global service for states entangled across workers.
Local requests execute synchronously; global ones accumulate in the
epoch's batch and are answered at flush time, so callers that need a
global result register a callback instead of blocking mid-epoch.
"""

from __future__ import annotations

from typing import Callable, Optional

from .errors import PartialOverwrite
from .qsm import QsmRequest, QsmResponse, QsmStore, RequestBatch, route_request
from .qsm_service import GlobalConnection

ResponseCallback = Callable[[QsmResponse], None]


class QsmClient:
    def __init__(self, worker: int, owner_of_key: Callable[[int], int],
                 connection: Optional[GlobalConnection] = None):
        self.worker = worker
        self.owner_of_key = owner_of_key
        self.connection = connection
        self.local = QsmStore()
        self.global_resident: set[int] = set()
        self._pending: list[tuple[QsmRequest, Optional[ResponseCallback]]] = []
        self.stats_local = 0
        self.stats_global = 0

    def route(self, request: QsmRequest) -> str:
        if self.connection is None:
            return "local"
        return route_request(request, self.owner_of_key, self.worker,
                             self.global_resident, self.local)

    def submit(self, request: QsmRequest,
               callback: Optional[ResponseCallback] = None
               ) -> Optional[QsmResponse]:
        """Execute locally (returning the response) or batch for the
        global QSM (returning None; callback fires at flush).

        A request routed global must not span keys currently held in the
        local store: promoting a local state into the global store is not
        supported, only the reverse migration.
        """
        if self.route(request) == "local":
            self.stats_local += 1
            response = self.local.apply(request)
            if callback is not None:
                callback(response)
            return response
        for k in request.keys:
            if k in self.local:
                raise PartialOverwrite(
                    f"key {k} is local-resident; cannot join a global request")
        self.stats_global += 1
        self.global_resident.update(request.keys)
        self._pending.append((request, callback))
        return None

    def pending_batch(self, epoch: int) -> RequestBatch:
        return RequestBatch(self.worker, epoch,
                            [req for req, _ in self._pending])

    def flush(self, epoch: int) -> list[QsmResponse]:
        """Flush the epoch's batch and deliver responses in program order.

        An empty batch is reported as a fire-and-forget note so the global
        service can keep its epoch cursor moving; the returned response
        list is then empty. Migrated-in states (now confined to this
        worker) are adopted by the local store.
        """
        if self.connection is None:
            self._pending.clear()
            return []
        if not self._pending:
            self.connection.note_empty(epoch)
            return []
        pending, self._pending = self._pending, []
        responses, migrations = self.connection.flush(
            epoch, [req for req, _ in pending])
        for (request, callback), response in zip(pending, responses):
            if response.ok and response.removed:
                for k in request.keys:
                    self.global_resident.discard(k)
            if callback is not None:
                callback(response)
        for state in migrations:
            self.local.insert_state(state)
            for k in state.keys:
                self.global_resident.discard(k)
        return responses

    def mark_global(self, keys) -> None:
        """Record that these keys live in the global store (learned from a
        cross-worker event rather than a local request)."""
        self.global_resident.update(keys)

    def close(self) -> None:
        if self.connection is not None:
            self.connection.close()
