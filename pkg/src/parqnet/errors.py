"""Exception types shared across the simulator.

Each error carries a stable ``code`` string so the same condition can be
reported identically whether it is raised in-process or returned in-band
over a wire protocol.
"""


class SimulationError(Exception):
    """Base class for all simulator errors."""

    code = "SIMULATION_ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class ScheduleInPast(SimulationError):
    code = "SCHEDULE_IN_PAST"


class CausalityViolation(SimulationError):
    """A remote event arrived with a timestamp inside an already-committed
    epoch window. This always indicates a lookahead bug and is fatal."""

    code = "CAUSALITY_VIOLATION"


class EmptyTopology(SimulationError):
    code = "EMPTY_TOPOLOGY"


class UnknownSession(SimulationError):
    code = "UNKNOWN_SESSION"


class ConfigError(SimulationError):
    code = "CONFIG_ERROR"


class SchemaViolation(SimulationError):
    code = "SCHEMA_VIOLATION"


class TransportFailure(SimulationError):
    code = "TRANSPORT_FAILURE"


class QsmError(SimulationError):
    """Base class for per-request quantum state manager errors.

    These are the errors that may be returned in-band as batch response
    statuses rather than tearing down the connection.
    """

    code = "QSM_ERROR"


class NotNormalized(QsmError):
    code = "NOT_NORMALIZED"


class PartialOverwrite(QsmError):
    code = "PARTIAL_OVERWRITE"


class KeyNotFound(QsmError):
    code = "KEY_NOT_FOUND"


class StateTooLarge(QsmError):
    code = "STATE_TOO_LARGE"


class BadRequest(QsmError):
    code = "BAD_REQUEST"


# Status bytes used by the wire protocols; 0 means success.
QSM_STATUS_OK = 0
_QSM_ERROR_CODES = {
    1: NotNormalized,
    2: PartialOverwrite,
    3: KeyNotFound,
    4: StateTooLarge,
    5: BadRequest,
}
_QSM_STATUS_BY_CODE = {cls.code: num for num, cls in _QSM_ERROR_CODES.items()}


def qsm_status_of(error: QsmError) -> int:
    return _QSM_STATUS_BY_CODE.get(error.code, 5)


def qsm_error_from_status(status: int, message: str = "") -> QsmError:
    cls = _QSM_ERROR_CODES.get(status, BadRequest)
    return cls(message)
