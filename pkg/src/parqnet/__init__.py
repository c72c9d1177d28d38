"""Parallel discrete-event quantum network simulator."""

from .kernel import TIME_INFINITY, Event, EventKind, Timeline
from .partition import EnergySpec, Partition, anneal, energy
from .qsm import QsmOp, QsmRequest, QsmResponse, QsmStore, QuantumState
from .runner import RunConfig, run_simulation
from .sync import EpochPlan, EpochTiming, compute_lookahead, negotiate_horizon
from .topology import Topology, gen_as, gen_linear

__version__ = "0.1.0"

__all__ = [
    "TIME_INFINITY", "Event", "EventKind", "Timeline",
    "EnergySpec", "Partition", "anneal", "energy",
    "QsmOp", "QsmRequest", "QsmResponse", "QsmStore", "QuantumState",
    "RunConfig", "run_simulation",
    "EpochPlan", "EpochTiming", "compute_lookahead", "negotiate_horizon",
    "Topology", "gen_as", "gen_linear",
    "__version__",
]
