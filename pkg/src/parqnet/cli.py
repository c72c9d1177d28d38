"""Command-line experiment driver.

Subcommands: ``gen-topology``, ``partition``, ``run``, ``sweep`` and
``report``. Every output is deterministic given ``--seed``; the harness
emits JSON and CSV data files only.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from .errors import ConfigError, SimulationError
from .kernel import TIME_INFINITY
from .partition import (
    AnnealSchedule,
    CROSS_QCHANNELS,
    ENERGY_KINDS,
    EnergySpec,
    Partition,
    anneal,
    energy,
    round_robin,
)
from .runner import RunConfig, run_simulation, topology_digest
from .topology import Topology, gen_as, gen_linear

EPOCH_COLUMNS = ["worker", "epoch", "compute_ns", "barrier_wait_ns",
                 "exchange_ns", "qsm_socket_ns", "events_executed"]


# -- trace / breakdown post-processing ------------------------------------------


def aggregate_trace(epochs: list[dict], collapse: int) -> list[dict]:
    """Sum compute time over consecutive groups of ``collapse`` epochs.

    One output row per worker per group; group g covers epochs
    [g*collapse, (g+1)*collapse).
    """
    if collapse < 1:
        raise ConfigError("collapse factor must be >= 1")
    groups: dict[tuple[int, int], dict] = {}
    for rec in epochs:
        key = (rec["worker"], rec["epoch"] // collapse)
        row = groups.setdefault(key, {
            "worker": rec["worker"],
            "group": rec["epoch"] // collapse,
            "epoch_start": (rec["epoch"] // collapse) * collapse,
            "compute_ns": 0,
            "events_executed": 0,
        })
        row["compute_ns"] += rec["compute_ns"]
        row["events_executed"] += rec["events_executed"]
    return [groups[k] for k in sorted(groups)]


BREAKDOWN_MODES = ("legacy", "split", "redefined")


def breakdown_rows(reports: list[dict], mode: str) -> list[dict]:
    """Per-run, per-worker timing columns in one of three views.

    legacy    compute | qsm_socket | sync (= barrier wait + exchange)
    split     compute | qsm_socket | wait | exchange
    redefined compute+wait | qsm_socket | exchange
    """
    if mode not in BREAKDOWN_MODES:
        raise ConfigError(f"unknown breakdown mode {mode!r}")
    rows = []
    for report in reports:
        k = report["config"]["num_workers"]
        for w in report["workers"]:
            base = {"num_workers": k, "worker": w["worker"]}
            if mode == "legacy":
                base.update(compute_ns=w["compute_ns"],
                            qsm_socket_ns=w["qsm_socket_ns"],
                            sync_ns=w["barrier_wait_ns"] + w["exchange_ns"])
            elif mode == "split":
                base.update(compute_ns=w["compute_ns"],
                            qsm_socket_ns=w["qsm_socket_ns"],
                            barrier_wait_ns=w["barrier_wait_ns"],
                            exchange_ns=w["exchange_ns"])
            else:
                base.update(compute_ns=w["compute_ns"] + w["barrier_wait_ns"],
                            qsm_socket_ns=w["qsm_socket_ns"],
                            exchange_ns=w["exchange_ns"])
            rows.append(base)
    rows.sort(key=lambda r: (r["num_workers"], r["worker"]))
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(no data)\n"
    columns = list(rows[0])
    widths = {c: max(len(c), max(len(str(r[c])) for r in rows))
              for c in columns}
    lines = ["  ".join(c.rjust(widths[c]) for c in columns)]
    for r in rows:
        lines.append("  ".join(str(r[c]).rjust(widths[c]) for c in columns))
    return "\n".join(lines) + "\n"


def write_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_report_files(report: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_csv(os.path.join(out_dir, "epochs.csv"), report["epochs"],
              EPOCH_COLUMNS)


# -- subcommands ----------------------------------------------------------------


def cmd_gen_topology(args) -> int:
    if args.kind == "linear":
        topo = gen_linear(
            n_routers=args.routers,
            link_km=args.link_km,
            attenuation_db_per_km=args.attenuation,
            period_ps=args.period_ps,
            target_bits=args.target_bits,
            memories=args.memories,
            seed=args.seed,
        )
    else:
        topo = gen_as(
            n_groups=args.groups,
            group_size=args.group_size,
            seed=args.seed,
            inter_session_density=args.session_density,
            hot_group_sessions=args.hot_group_sessions,
            spoke_km=args.link_km,
            backbone_km=args.backbone_km,
            attenuation_db_per_km=args.attenuation,
            period_ps=args.period_ps,
            target_bits=args.target_bits,
            memories=args.memories,
        )
    topo.save(args.out)
    print(f"wrote {args.out}: {len(topo.routers)} routers, "
          f"{len(topo.qchannels)} qchannels, {len(topo.sessions)} sessions, "
          f"digest {topology_digest(topo)[:16]}")
    return 0


def group_isolate_partition(topology: Topology, num_workers: int) -> Partition:
    """Group-aligned assignment that pins the first group alone on worker 0.

    Groups are read from the router-name prefix before the 'r' segment
    (the AS generator's naming). Keeping stars whole is cut-optimal for
    hub-and-spoke groups; isolating the first group makes load imbalance
    reproducible for straggler studies.
    """
    groups: dict[str, list[str]] = {}
    for name in topology.router_names():
        groups.setdefault(name.rsplit("r", 1)[0], []).append(name)
    keys = sorted(groups)
    if len(keys) < 2 and num_workers > 1:
        raise ConfigError("group partitioning needs group-named routers")
    assignment = {}
    for gi, key in enumerate(keys):
        if num_workers == 1:
            worker = 0
        elif gi == 0:
            worker = 0
        else:
            worker = 1 + (gi - 1) % (num_workers - 1)
        for name in groups[key]:
            assignment[name] = worker
    return Partition(num_workers, assignment)


def _make_partition(topology: Topology, args, num_workers: int) -> Partition:
    if getattr(args, "partition", None):
        part = Partition.load(args.partition, topology)
        if part.num_workers != num_workers:
            raise ConfigError(
                f"partition file is for {part.num_workers} workers, "
                f"requested {num_workers}")
        return part
    mode = getattr(args, "partition_mode", "roundrobin")
    if mode == "roundrobin":
        return round_robin(topology, num_workers)
    if mode == "group-isolate":
        return group_isolate_partition(topology, num_workers)
    spec = EnergySpec(getattr(args, "energy", CROSS_QCHANNELS))
    schedule = AnnealSchedule(args.t0, args.alpha, args.iterations)
    return anneal(topology, spec, num_workers, schedule,
                  seed=getattr(args, "partition_seed", 0))


def cmd_partition(args) -> int:
    topo = Topology.load(args.topology)
    spec = EnergySpec(args.energy)
    schedule = AnnealSchedule(args.t0, args.alpha, args.iterations)
    part = anneal(topo, spec, args.workers, schedule, seed=args.partition_seed)
    part.save(args.out)
    print(f"wrote {args.out}: {args.workers} workers, "
          f"{args.energy} energy {energy(topo, part, spec)}")
    return 0


def _stop_time(args) -> int:
    return TIME_INFINITY if args.stop_time is None else args.stop_time


def cmd_run(args) -> int:
    topo = Topology.load(args.topology)
    part = _make_partition(topo, args, args.workers)
    config = RunConfig(
        topology=topo,
        partition=part,
        seed=args.seed if args.seed is not None else topo.seed,
        stop_time=_stop_time(args),
        exchange_transport=args.exchange_transport,
        qsm_transport=args.qsm_transport,
    )
    report = run_simulation(config)
    report["config"]["topology_path"] = os.path.abspath(args.topology)
    write_report_files(report, args.out)
    total_events = sum(w["events_executed"] for w in report["workers"])
    print(f"run complete: {total_events} events, "
          f"{report['epoch_count']} epochs, digest {report['digest'][:16]}")
    return 0


def cmd_sweep(args) -> int:
    topo = Topology.load(args.topology)
    counts = sorted({int(c) for c in args.workers.split(",")})
    if any(c < 1 for c in counts):
        raise ConfigError("worker counts must be positive")
    os.makedirs(args.out, exist_ok=True)
    summary = {
        "topology": os.path.abspath(args.topology),
        "topology_digest": topology_digest(topo),
        "seed": args.seed if args.seed is not None else topo.seed,
        "worker_counts": counts,
        "runs": [],
    }
    digests = set()
    for count in counts:
        part = _make_partition(topo, args, count)
        config = RunConfig(
            topology=topo,
            partition=part,
            seed=summary["seed"],
            stop_time=_stop_time(args),
            exchange_transport=args.exchange_transport,
            qsm_transport=("socket" if args.exchange_transport == "socket"
                           else args.qsm_transport),
        )
        report = run_simulation(config)
        report["config"]["topology_path"] = summary["topology"]
        run_dir = os.path.join(args.out, f"k{count:03d}")
        write_report_files(report, run_dir)
        digests.add(report["digest"])
        summary["runs"].append({
            "num_workers": count,
            "dir": run_dir,
            "digest": report["digest"],
            "max_loop_wall_ns": max(w["loop_wall_ns"] for w in report["workers"]),
            "wall_ns": report["wall_ns"],
        })
        print(f"k={count}: digest {report['digest'][:16]} "
              f"wall {report['wall_ns'] / 1e6:.1f} ms")
    summary["digests_identical"] = len(digests) == 1
    with open(os.path.join(args.out, "sweep.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"sweep digests identical: {summary['digests_identical']}")
    return 0


def _load_sweep_reports(sweep_dir: str) -> list[dict]:
    with open(os.path.join(sweep_dir, "sweep.json")) as fh:
        summary = json.load(fh)
    reports = []
    for run in summary["runs"]:
        with open(os.path.join(run["dir"], "report.json")) as fh:
            reports.append(json.load(fh))
    return reports


def cmd_report(args) -> int:
    reports = _load_sweep_reports(args.sweep)
    rows = breakdown_rows(reports, args.mode)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, f"breakdown_{args.mode}.csv")
    write_csv(csv_path, rows, list(rows[0]) if rows else ["num_workers"])
    table = format_table(rows)
    txt_path = os.path.join(args.out, f"breakdown_{args.mode}.txt")
    with open(txt_path, "w") as fh:
        fh.write(table)
    sys.stdout.write(table)
    if args.collapse:
        for report in reports:
            k = report["config"]["num_workers"]
            rows = aggregate_trace(report["epochs"], args.collapse)
            write_csv(os.path.join(args.out, f"trace_k{k:03d}.csv"), rows,
                      ["worker", "group", "epoch_start", "compute_ns",
                       "events_executed"])
    return 0


# -- parser ---------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--topology", required=True)
    p.add_argument("--partition", help="partition JSON (default: generated)")
    p.add_argument("--partition-mode", default="roundrobin",
                   choices=["roundrobin", "anneal", "group-isolate"])
    p.add_argument("--partition-seed", type=int, default=0)
    p.add_argument("--energy", default=CROSS_QCHANNELS, choices=ENERGY_KINDS)
    p.add_argument("--t0", type=float, default=10.0)
    p.add_argument("--alpha", type=float, default=0.995)
    p.add_argument("--iterations", type=int, default=50_000)
    p.add_argument("--seed", type=int, default=None,
                   help="run seed (default: topology seed)")
    p.add_argument("--stop-time", type=int, default=None,
                   help="simulated picoseconds (default: run to completion)")
    p.add_argument("--exchange-transport", default="inproc",
                   choices=["inproc", "socket"])
    p.add_argument("--qsm-transport", default="inproc",
                   choices=["inproc", "socket"])
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parqnet",
        description="Parallel discrete-event quantum network simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-topology", help="generate a topology file")
    g.add_argument("kind", choices=["linear", "as"])
    g.add_argument("--routers", type=int, default=16,
                   help="router count (linear)")
    g.add_argument("--groups", type=int, default=4, help="group count (as)")
    g.add_argument("--group-size", type=int, default=4)
    g.add_argument("--session-density", type=float, default=0.3)
    g.add_argument("--hot-group-sessions", type=int, default=0)
    g.add_argument("--link-km", type=float, default=1.0)
    g.add_argument("--backbone-km", type=float, default=2.0)
    g.add_argument("--attenuation", type=float, default=0.2,
                   help="dB per km")
    g.add_argument("--period-ps", type=int, default=10_000_000)
    g.add_argument("--target-bits", type=int, default=16)
    g.add_argument("--memories", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_topology)

    p = sub.add_parser("partition", help="anneal a router partition")
    p.add_argument("--topology", required=True)
    p.add_argument("--workers", type=int, required=True)
    p.add_argument("--energy", default=CROSS_QCHANNELS, choices=ENERGY_KINDS)
    p.add_argument("--t0", type=float, default=10.0)
    p.add_argument("--alpha", type=float, default=0.995)
    p.add_argument("--iterations", type=int, default=50_000)
    p.add_argument("--partition-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    r = sub.add_parser("run", help="run one simulation")
    _add_run_flags(r)
    r.add_argument("--workers", type=int, required=True)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="strong-scaling sweep over worker counts")
    _add_run_flags(s)
    s.add_argument("--workers", required=True,
                   help="comma-separated counts, e.g. 1,2,4,8")
    s.set_defaults(func=cmd_sweep)

    t = sub.add_parser("report", help="timing breakdown tables from a sweep")
    t.add_argument("--sweep", required=True, help="sweep output directory")
    t.add_argument("--mode", default="split", choices=BREAKDOWN_MODES)
    t.add_argument("--collapse", type=int, default=None,
                   help="collapse factor for per-epoch compute traces")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SimulationError as err:
        print(f"error [{err.code}]: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
