"""Run orchestration: worker epoch loops, thread and process deployment,
and report assembly.

A run executes the same worker loop regardless of deployment:

    compute      run_until(horizon), diverting remote-target events
    qsm_socket   flush this epoch's global QSM batch
    barrier_wait rendezvous with all workers (straggler wait shows here)
    exchange     ship event batches, reduce next-event minima, agree on
                 the next horizon, merge incoming events

The four phase timers are taken back-to-back, so summed over an epoch they
tile its wall time exactly; the run ends after two consecutive all-idle
negotiations.

Every report carries a serial-equivalence digest: a hash over per-entity
execution logs (canonically ordered within equal timestamps, since
simultaneous independent events may interleave differently across worker
counts) plus the final sifted keys of every session.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .errors import (
    CausalityViolation,
    ConfigError,
    SimulationError,
    TransportFailure,
)
from .kernel import TIME_INFINITY, Event, EventKind, Timeline, saturating_add
from .partition import Partition
from .qkd import Network, RouterEntity, router_of_key
from .qsm_client import QsmClient
from .qsm_service import (
    GlobalQsmCoordinator,
    GlobalQsmServer,
    InprocGlobalConnection,
    SocketGlobalConnection,
)
from .sync import (
    EpochPlan,
    EpochTiming,
    ExchangePort,
    InprocHub,
    NullExchange,
    SocketExchangePort,
    SyncServer,
    compute_lookahead,
    merge_remote_events,
    plan_from_min,
)
from .topology import Topology


@dataclass
class RunConfig:
    topology: Topology
    partition: Partition
    seed: int = 0
    stop_time: int = TIME_INFINITY
    exchange_transport: str = "inproc"   # inproc = threads, socket = processes
    qsm_transport: str = "inproc"
    lookahead_override: Optional[int] = None  # testing hook for causality suite

    def validate(self) -> None:
        self.topology.validate()
        self.partition.validate(self.topology)
        if self.exchange_transport not in ("inproc", "socket"):
            raise ConfigError(f"bad exchange transport {self.exchange_transport!r}")
        if self.qsm_transport not in ("inproc", "socket"):
            raise ConfigError(f"bad qsm transport {self.qsm_transport!r}")
        if self.exchange_transport == "socket" and self.qsm_transport != "socket":
            raise ConfigError("process workers need the socket QSM transport")


class Worker:
    """One parallel timeline plus its epoch loop."""

    def __init__(self, worker_id: int, network: Network,
                 assignment_by_index: dict[int, int], stop_time: int,
                 lookahead: int, port: ExchangePort, qsm: QsmClient,
                 serial: bool):
        self.worker_id = worker_id
        self.network = network
        self.assignment = assignment_by_index
        self.stop_time = stop_time
        self.lookahead = lookahead
        self.port = port
        self.qsm = qsm
        self.serial = serial
        self.timeline = Timeline(stop_time)
        self.entities: dict[int, RouterEntity] = {}
        for idx in sorted(i for i, w in assignment_by_index.items()
                          if w == worker_id):
            entity = RouterEntity(idx, network, self.timeline, qsm)
            self.entities[idx] = entity
            self.timeline.add_entity(idx, entity.handle)
        self.current_plan = EpochPlan(0, 0, 0, lookahead)
        self.outgoing: dict[int, list[Event]] = {}
        self.records: list[EpochTiming] = []
        self.loop_wall_ns = 0
        self.total_wall_ns = 0
        if not serial:
            self.timeline.remote_sink = self._divert

    # -- cross-worker diversion --------------------------------------------

    def _divert(self, event: Event) -> bool:
        dest = self.assignment[event.target]
        bound = saturating_add(self.current_plan.epoch_start, self.lookahead)
        if event.time < bound:
            raise CausalityViolation(
                f"outgoing event at t={event.time} violates lookahead bound "
                f"{bound} (epoch {self.current_plan.epoch_index})")
        self.outgoing.setdefault(dest, []).append(event)
        return True

    def _proposal(self, outgoing: dict[int, list[Event]]) -> int:
        nxt = self.timeline.peek_next_time()
        for events in outgoing.values():
            for ev in events:
                if ev.time < nxt:
                    nxt = ev.time
        return TIME_INFINITY if nxt >= self.stop_time else nxt

    # -- the epoch loop ------------------------------------------------------

    def run(self) -> dict:
        run_start = time.perf_counter_ns()
        for idx in sorted(self.entities):
            self.entities[idx].start()
        # Bootstrap rendezvous: agree on the first horizon before timing epochs.
        self.port.barrier(0)
        gmin, incoming = self.port.exchange(0, self._proposal({}), {})
        merge_remote_events(self.timeline, incoming, 0)
        plan = plan_from_min(gmin, 0, 0, self.lookahead, self.stop_time)
        idle_negotiations = 1 if plan.completed else 0
        first_t0 = None
        last_t4 = None
        mark = None
        while idle_negotiations < 2:
            t0 = mark if mark is not None else time.perf_counter_ns()
            executed = 0
            if not plan.completed:
                self.current_plan = plan
                executed = self.timeline.run_until(plan.horizon)
            t1 = time.perf_counter_ns()
            self.qsm.flush(plan.epoch_index)
            t2 = time.perf_counter_ns()
            self.port.barrier(plan.epoch_index + 1)
            t3 = time.perf_counter_ns()
            outgoing, self.outgoing = self.outgoing, {}
            proposal = self._proposal(outgoing)
            gmin, incoming = self.port.exchange(plan.epoch_index + 1,
                                                proposal, outgoing)
            merge_remote_events(self.timeline, incoming, plan.horizon)
            next_plan = plan_from_min(gmin, plan.epoch_index + 1, plan.horizon,
                                      self.lookahead, self.stop_time)
            t4 = time.perf_counter_ns()
            if not plan.completed:
                timing = EpochTiming(
                    worker=self.worker_id,
                    epoch_index=plan.epoch_index,
                    compute_ns=t1 - t0,
                    qsm_socket_ns=t2 - t1,
                    barrier_wait_ns=0 if self.serial else t3 - t2,
                    exchange_ns=0 if self.serial else t4 - t3,
                    events_executed=executed,
                )
                self.records.append(timing)
                if first_t0 is None:
                    first_t0 = t0
                last_t4 = t4
            mark = t4
            idle_negotiations = idle_negotiations + 1 if next_plan.completed else 0
            plan = next_plan
        if first_t0 is not None:
            self.loop_wall_ns = last_t4 - first_t0
        self.total_wall_ns = time.perf_counter_ns() - run_start
        return self.result_dict()

    # -- results ---------------------------------------------------------------

    def result_dict(self) -> dict:
        census: dict[str, int] = {}
        per_entity: dict[int, list[tuple]] = {}
        for entry in self.timeline.execution_log:
            target, t, kind, a, b, c = entry
            census_key = EventKind(kind).name.lower()
            census[census_key] = census.get(census_key, 0) + 1
            per_entity.setdefault(target, []).append((t, kind, a, b, c))
        entity_hashes = {}
        for idx, entries in per_entity.items():
            entries.sort()
            h = hashlib.sha256()
            for e in entries:
                h.update(("%d,%d,%d,%d,%d;" % e).encode())
            entity_hashes[str(idx)] = h.hexdigest()
        sessions_src = {}
        sessions_dst = {}
        for idx in sorted(self.entities):
            entity = self.entities[idx]
            for sid, st in entity.as_source.items():
                sessions_src[str(sid)] = {
                    "count": st.count,
                    "bits": sorted(st.bits),
                    "emitted": st.next_photon,
                    "complete_time": st.complete_time,
                }
            for sid, st in entity.as_dest.items():
                sessions_dst[str(sid)] = {
                    "count": st.count,
                    "bits": sorted(st.bits),
                }
        stats = self.timeline.stats
        return {
            "worker": self.worker_id,
            "records": [
                [r.epoch_index, r.compute_ns, r.barrier_wait_ns,
                 r.exchange_ns, r.qsm_socket_ns, r.events_executed]
                for r in self.records
            ],
            "loop_wall_ns": self.loop_wall_ns,
            "total_wall_ns": self.total_wall_ns,
            "scheduled": stats.scheduled,
            "executed": stats.executed,
            "cancelled": stats.cancelled,
            "remaining": self.timeline.pending_count(),
            "census": census,
            "qsm_local": self.qsm.stats_local,
            "qsm_global": self.qsm.stats_global,
            "entity_hashes": entity_hashes,
            "sessions_src": sessions_src,
            "sessions_dst": sessions_dst,
        }


# -- shared assembly ----------------------------------------------------------


def _assignment_by_index(topology: Topology, partition: Partition) -> dict[int, int]:
    return {topology.router_index(name): worker
            for name, worker in partition.assignment.items()}


def topology_digest(topology: Topology) -> str:
    blob = json.dumps(topology.to_dict(), sort_keys=True,
                      separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _bits_string(bits: list) -> str:
    return "".join(str(int(b)) for _, b in sorted(tuple(x) for x in bits))


def assemble_report(config: RunConfig, worker_dicts: list[dict],
                    lookahead: int, wall_ns: int) -> dict:
    """Merge per-worker results into the run report."""
    worker_dicts = sorted(worker_dicts, key=lambda d: d["worker"])
    entity_hashes: dict[str, str] = {}
    sessions: dict[str, dict] = {}
    census: dict[str, int] = {}
    epochs = []
    for wd in worker_dicts:
        entity_hashes.update(wd["entity_hashes"])
        for kind, count in wd["census"].items():
            census[kind] = census.get(kind, 0) + count
        for sid, frag in wd["sessions_src"].items():
            sessions.setdefault(sid, {}).update({
                "source_count": frag["count"],
                "source_key": _bits_string(frag["bits"]),
                "emitted": frag["emitted"],
                "complete_time": frag["complete_time"],
            })
        for sid, frag in wd["sessions_dst"].items():
            sessions.setdefault(sid, {}).update({
                "destination_count": frag["count"],
                "destination_key": _bits_string(frag["bits"]),
            })
        for rec in wd["records"]:
            epochs.append({
                "worker": wd["worker"],
                "epoch": rec[0],
                "compute_ns": rec[1],
                "barrier_wait_ns": rec[2],
                "exchange_ns": rec[3],
                "qsm_socket_ns": rec[4],
                "events_executed": rec[5],
            })
    digest_material = json.dumps(
        {"entities": entity_hashes,
         "sessions": {
             sid: {
                 "source_count": s.get("source_count"),
                 "destination_count": s.get("destination_count"),
                 "source_key": s.get("source_key"),
                 "destination_key": s.get("destination_key"),
             } for sid, s in sessions.items()
         }},
        sort_keys=True, separators=(",", ":")).encode()
    digest = hashlib.sha256(digest_material).hexdigest()
    epochs.sort(key=lambda e: (e["epoch"], e["worker"]))
    workers_summary = []
    for wd in worker_dicts:
        totals = {
            "compute_ns": sum(r[1] for r in wd["records"]),
            "barrier_wait_ns": sum(r[2] for r in wd["records"]),
            "exchange_ns": sum(r[3] for r in wd["records"]),
            "qsm_socket_ns": sum(r[4] for r in wd["records"]),
        }
        workers_summary.append({
            "worker": wd["worker"],
            "loop_wall_ns": wd["loop_wall_ns"],
            "total_wall_ns": wd["total_wall_ns"],
            "events_executed": wd["executed"],
            "events_scheduled": wd["scheduled"],
            "events_cancelled": wd["cancelled"],
            "events_remaining": wd["remaining"],
            "qsm_local": wd["qsm_local"],
            "qsm_global": wd["qsm_global"],
            **totals,
        })
    return {
        "config": {
            "num_workers": config.partition.num_workers,
            "seed": config.seed,
            "stop_time": None if config.stop_time >= TIME_INFINITY
                         else config.stop_time,
            "exchange_transport": config.exchange_transport,
            "qsm_transport": config.qsm_transport,
            "lookahead": None if lookahead >= TIME_INFINITY else lookahead,
            "topology_digest": topology_digest(config.topology),
            "partition": config.partition.to_dict(),
        },
        "digest": digest,
        "census": census,
        "sessions": sessions,
        "workers": workers_summary,
        "epochs": epochs,
        "epoch_count": max((e["epoch"] for e in epochs), default=-1) + 1,
        "wall_ns": wall_ns,
    }


# -- thread deployment ----------------------------------------------------------


def _run_threads(config: RunConfig, network: Network,
                 assignment_idx: dict[int, int], lookahead: int) -> list[dict]:
    k = config.partition.num_workers
    owner_of_key = lambda key: assignment_idx[router_of_key(key)]
    hub = InprocHub(k) if k > 1 else None
    qsm_server = None
    coordinator = None
    connections: list = [None] * k
    if k > 1:
        if config.qsm_transport == "inproc":
            coordinator = GlobalQsmCoordinator(k, owner_of_key)
            connections = [InprocGlobalConnection(coordinator, w)
                           for w in range(k)]
        else:
            qsm_server = GlobalQsmServer(k, owner_of_key)
            connections = [SocketGlobalConnection(qsm_server.host,
                                                  qsm_server.port, w)
                           for w in range(k)]
    workers = []
    for w in range(k):
        port = hub.port(w) if hub is not None else NullExchange()
        qsm = QsmClient(w, owner_of_key, connections[w])
        workers.append(Worker(w, network, assignment_idx, config.stop_time,
                              lookahead, port, qsm, serial=(k == 1)))
    results: list[Optional[dict]] = [None] * k
    failures: list[BaseException] = []

    def runner(worker: Worker) -> None:
        try:
            results[worker.worker_id] = worker.run()
        except BaseException as exc:  # propagate to the orchestrator
            failures.append(exc)
            if hub is not None:
                hub.abort(exc)
            if coordinator is not None:
                coordinator.abort(exc)

    threads = [threading.Thread(target=runner, args=(wk,),
                                name=f"worker-{wk.worker_id}")
               for wk in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for wk in workers:
        wk.qsm.close()
    if qsm_server is not None:
        qsm_server.stop()
    if failures:
        primary = next((f for f in failures
                        if not isinstance(f, TransportFailure)), failures[0])
        raise primary
    return [r for r in results if r is not None]


# -- process deployment -----------------------------------------------------------


def worker_process_main(config_blob: dict, worker_id: int,
                        sync_addr: tuple, qsm_addr: Optional[tuple]) -> None:
    """Entry point of one worker OS process (socket transport)."""
    port = None
    try:
        topology = Topology.from_dict(config_blob["topology"])
        partition = Partition(config_blob["num_workers"],
                              {k: int(v) for k, v in
                               config_blob["assignment"].items()})
        network = Network(topology, config_blob["seed"])
        assignment_idx = _assignment_by_index(topology, partition)
        owner_of_key = lambda key: assignment_idx[router_of_key(key)]
        lookahead = config_blob["lookahead"]
        stop_time = config_blob["stop_time"]
        port = SocketExchangePort(sync_addr[0], sync_addr[1], worker_id)
        connection = None
        if qsm_addr is not None:
            connection = SocketGlobalConnection(qsm_addr[0], qsm_addr[1],
                                                worker_id)
        qsm = QsmClient(worker_id, owner_of_key, connection)
        worker = Worker(worker_id, network, assignment_idx, stop_time,
                        lookahead, port, qsm,
                        serial=(partition.num_workers == 1))
        result = worker.run()
        qsm.close()
        port.done(json.dumps(result).encode())
        port.close()
    except BaseException as exc:
        code = exc.code if isinstance(exc, SimulationError) else "WORKER_ERROR"
        if port is not None:
            try:
                port.done(json.dumps({
                    "worker": worker_id,
                    "error": {"code": code,
                              "message": f"{type(exc).__name__}: {exc}"},
                }).encode())
                port.close()
            except TransportFailure:
                pass
        raise SystemExit(1)


def _run_processes(config: RunConfig, network: Network,
                   assignment_idx: dict[int, int], lookahead: int) -> list[dict]:
    k = config.partition.num_workers
    owner_of_key = lambda key: assignment_idx[router_of_key(key)]
    sync_server = SyncServer(k)
    qsm_server = GlobalQsmServer(k, owner_of_key) if k > 1 else None
    config_blob = {
        "topology": config.topology.to_dict(),
        "num_workers": k,
        "assignment": config.partition.assignment,
        "seed": config.seed,
        "stop_time": config.stop_time,
        "lookahead": lookahead,
    }
    ctx = multiprocessing.get_context("spawn")
    procs = []
    try:
        for w in range(k):
            qsm_addr = (qsm_server.host, qsm_server.port) if qsm_server else None
            p = ctx.Process(target=worker_process_main,
                            args=(config_blob, w,
                                  (sync_server.host, sync_server.port),
                                  qsm_addr),
                            name=f"parqnet-worker-{w}")
            p.start()
            procs.append(p)
        reports = sync_server.wait_reports(
            liveness=lambda: all(p.is_alive() or p.exitcode == 0
                                 for p in procs))
    finally:
        sync_server.stop()
        if qsm_server is not None:
            qsm_server.stop()
        for p in procs:
            p.join(timeout=5.0)
            if p.is_alive():
                p.terminate()
                p.join(timeout=5.0)
    results = []
    for w, blob in sorted(reports.items()):
        data = json.loads(blob.decode())
        if "error" in data:
            code = data["error"]["code"]
            message = f"worker {w}: {data['error']['message']}"
            if code == CausalityViolation.code:
                raise CausalityViolation(message)
            raise SimulationError(message)
        results.append(data)
    if len(results) != k:
        raise TransportFailure(
            f"only {len(results)} of {k} workers reported")
    return results


# -- public entry -------------------------------------------------------------------


def run_simulation(config: RunConfig) -> dict:
    """Execute one full parallel run and return its report dict."""
    config.validate()
    network = Network(config.topology, config.seed)
    assignment_idx = _assignment_by_index(config.topology, config.partition)
    lookahead = compute_lookahead(config.topology, config.partition.assignment)
    if config.lookahead_override is not None:
        lookahead = config.lookahead_override
    start = time.perf_counter_ns()
    if config.exchange_transport == "inproc":
        worker_dicts = _run_threads(config, network, assignment_idx, lookahead)
    else:
        worker_dicts = _run_processes(config, network, assignment_idx, lookahead)
    wall_ns = time.perf_counter_ns() - start
    return assemble_report(config, worker_dicts, lookahead, wall_ns)
