"""Quantum state manager: key-value store of amplitude vectors.

States are dense, normalized amplitude vectors over an ordered set of
memory keys. A key appears in at most one state at a time, and a state is
manipulated only through SET / GET / MEASURE / REMOVE requests so local
and remote stores behave identically.

Bit convention: within a state, keys are kept strictly increasing and the
first key is the most significant bit of the amplitude index. A Bell pair
on keys {1, 2} is ``[1/sqrt(2), 0, 0, 1/sqrt(2)]``.

MEASURE never draws randomness server-side: the requesting worker supplies
``rng_draw`` from its own seeded stream, which keeps full-simulation
results independent of where the state happens to live.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

from .errors import (
    BadRequest,
    KeyNotFound,
    NotNormalized,
    PartialOverwrite,
    QsmError,
    StateTooLarge,
    QSM_STATUS_OK,
    qsm_status_of,
)

NORM_TOLERANCE = 1e-9
MAX_STATE_QUBITS = 10


class QsmOp(IntEnum):
    SET = 0
    GET = 1
    MEASURE = 2
    REMOVE = 3


@dataclass(frozen=True)
class QuantumState:
    keys: tuple[int, ...]
    amplitudes: tuple[complex, ...]

    def norm_sq(self) -> float:
        return sum((a.real * a.real + a.imag * a.imag) for a in self.amplitudes)


@dataclass
class QsmRequest:
    op: QsmOp
    keys: tuple[int, ...]
    amplitudes: Optional[tuple[complex, ...]] = None
    rng_draw: Optional[float] = None


@dataclass
class QsmResponse:
    """In-band result of one request. ``status`` 0 is success."""

    status: int = QSM_STATUS_OK
    outcome: Optional[int] = None       # MEASURE result bit
    removed: bool = False               # MEASURE consumed the whole state
    keys: Optional[tuple[int, ...]] = None        # GET
    amplitudes: Optional[tuple[complex, ...]] = None  # GET

    @property
    def ok(self) -> bool:
        return self.status == QSM_STATUS_OK


@dataclass
class RequestBatch:
    worker: int
    epoch_index: int
    requests: list[QsmRequest] = field(default_factory=list)


class QsmStore:
    """One key-value store of quantum states (a local or the global QSM)."""

    def __init__(self):
        self._by_key: dict[int, QuantumState] = {}

    def __contains__(self, key: int) -> bool:
        return key in self._by_key

    def __len__(self) -> int:
        return len(set(id(s) for s in self._by_key.values()))

    def keys(self) -> list[int]:
        return sorted(self._by_key)

    def set(self, keys: tuple[int, ...], amplitudes: tuple[complex, ...]) -> None:
        """Bind all ``keys`` to one shared state.

        Existing states may only be replaced whole: if any key currently
        belongs to a state whose key set is not fully covered by this
        request, the write is rejected.
        """
        if len(keys) == 0:
            raise BadRequest("SET with no keys")
        if len(set(keys)) != len(keys):
            raise BadRequest("SET with duplicate keys")
        if len(keys) > MAX_STATE_QUBITS:
            raise StateTooLarge(f"{len(keys)} qubits exceeds cap {MAX_STATE_QUBITS}")
        canonical = tuple(sorted(keys))
        if amplitudes is None or len(amplitudes) != 2 ** len(canonical):
            raise BadRequest("amplitude vector length must be 2^len(keys)")
        amps = tuple(complex(a) for a in amplitudes)
        norm_sq = sum(a.real * a.real + a.imag * a.imag for a in amps)
        if abs(norm_sq - 1.0) > NORM_TOLERANCE:
            raise NotNormalized(f"squared norm {norm_sq!r}")
        covered = set(canonical)
        for k in canonical:
            old = self._by_key.get(k)
            if old is not None and not set(old.keys) <= covered:
                raise PartialOverwrite(
                    f"key {k} belongs to state {old.keys}, not covered by SET"
                )
        for k in canonical:
            old = self._by_key.get(k)
            if old is not None:
                for ok in old.keys:
                    self._by_key.pop(ok, None)
        state = QuantumState(canonical, amps)
        for k in canonical:
            self._by_key[k] = state

    def get(self, key: int) -> QuantumState:
        state = self._by_key.get(key)
        if state is None:
            raise KeyNotFound(f"key {key}")
        return state

    def measure(self, key: int, rng_draw: float) -> tuple[int, bool]:
        """Measure one qubit in the computational basis.

        Returns (outcome, removed). The outcome is 0 when ``rng_draw``
        falls below P(0); the measured key is dropped and the survivors
        renormalized. ``removed`` reports that the state had only this key
        and is gone from the store entirely.
        """
        if rng_draw is None or not (0.0 <= rng_draw < 1.0):
            raise BadRequest(f"rng_draw {rng_draw!r} outside [0, 1)")
        state = self._by_key.get(key)
        if state is None:
            raise KeyNotFound(f"key {key}")
        n = len(state.keys)
        pos = state.keys.index(key)
        bit = 1 << (n - 1 - pos)  # first key = most significant bit
        p0 = 0.0
        for idx, a in enumerate(state.amplitudes):
            if not idx & bit:
                p0 += a.real * a.real + a.imag * a.imag
        outcome = 0 if rng_draw < p0 else 1
        p_outcome = p0 if outcome == 0 else state.norm_sq() - p0
        for ok in state.keys:
            del self._by_key[ok]
        if n == 1:
            return outcome, True
        inv = 1.0 / math.sqrt(p_outcome)
        remaining_keys = state.keys[:pos] + state.keys[pos + 1:]
        new_amps = []
        low_mask = bit - 1
        for idx in range(2 ** (n - 1)):
            src = ((idx & ~low_mask) << 1) | (bit if outcome else 0) | (idx & low_mask)
            new_amps.append(state.amplitudes[src] * inv)
        collapsed = QuantumState(remaining_keys, tuple(new_amps))
        for ok in remaining_keys:
            self._by_key[ok] = collapsed
        return outcome, False

    def remove(self, key: int) -> None:
        """Discard the whole state containing ``key``."""
        state = self._by_key.get(key)
        if state is None:
            raise KeyNotFound(f"key {key}")
        for ok in state.keys:
            del self._by_key[ok]

    def insert_state(self, state: QuantumState) -> None:
        """Adopt a state shipped from another store (ownership migration)."""
        for k in state.keys:
            if k in self._by_key:
                raise PartialOverwrite(f"migrated key {k} already bound")
        for k in state.keys:
            self._by_key[k] = state

    def pop_state(self, key: int) -> QuantumState:
        state = self.get(key)
        for ok in state.keys:
            del self._by_key[ok]
        return state

    def states(self) -> list[QuantumState]:
        seen: dict[int, QuantumState] = {}
        for s in self._by_key.values():
            seen[id(s)] = s
        return sorted(seen.values(), key=lambda s: s.keys)

    def apply(self, request: QsmRequest) -> QsmResponse:
        """Execute one request, mapping QSM errors to in-band statuses."""
        try:
            if request.op == QsmOp.SET:
                self.set(request.keys, request.amplitudes)
                return QsmResponse()
            if request.op == QsmOp.GET:
                state = self.get(request.keys[0])
                return QsmResponse(keys=state.keys, amplitudes=state.amplitudes)
            if request.op == QsmOp.MEASURE:
                if len(request.keys) != 1:
                    raise BadRequest("MEASURE takes exactly one key")
                outcome, removed = self.measure(request.keys[0], request.rng_draw)
                return QsmResponse(outcome=outcome, removed=removed)
            if request.op == QsmOp.REMOVE:
                self.remove(request.keys[0])
                return QsmResponse()
            raise BadRequest(f"unknown op {request.op}")
        except QsmError as err:
            return QsmResponse(status=qsm_status_of(err))


def route_request(
    request: QsmRequest,
    key_owner,
    worker: int,
    global_resident: set[int],
    local_store: Optional["QsmStore"] = None,
) -> str:
    """Decide whether a request is served locally or batched for the
    global QSM.

    ``key_owner`` maps a memory key to the worker owning its router.
    States already resident in the local store win (this covers states
    migrated back after cross-worker entanglement collapsed); otherwise a
    request goes global when any key is flagged global-resident or belongs
    to another worker's router.
    """
    if local_store is not None and all(k in local_store for k in request.keys):
        return "local"
    for k in request.keys:
        if k in global_resident or key_owner(k) != worker:
            return "global"
    return "local"
