"""Command line: record, replay, query, list actions, diff, verify, simulate and export traces."""

from __future__ import annotations

import argparse
import logging
import re
import sys
from datetime import timezone
from pathlib import Path

from dateutil import parser as date_parser

from . import config
from .actions import REGISTRY_KINDS
from .errors import InvalidStamp, TraceSignalsError
from .history import ABSENT
from .logging_config import logger
from .netsim import Partition, SimConfig, assert_converged, run
from .rdf import FORMATS, export_provenance, extension_for
from .replica import Replica
from .stamps import VersionStamp
from .trace import read_trace, replay, replay_trace, verify_trace, write_trace
from .values import render_value
from .workloads import demo_session, generate_workload

LOG_LEVELS = ("debug", "info", "warning", "error")


def parse_time(text: str) -> int:
    """Integer milliseconds since the epoch, or an ISO-8601 datetime (UTC when no offset is given)."""
    if re.fullmatch(r"-?[0-9]+", text):
        return int(text)
    try:
        moment = date_parser.isoparse(text)
    except ValueError as e:
        raise InvalidStamp(f"expected milliseconds or an ISO-8601 datetime, got {text!r}") from e
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return round(moment.timestamp() * 1000)


def _render(value) -> str:
    return "absent" if value is ABSENT else render_value(value)


def _print_values(replica: Replica) -> None:
    for signal in replica.signals():
        print(f"{signal} = {render_value(replica.get(signal))}")


def cli_demo(args) -> int:
    replica = demo_session(args.seed, args.actions)
    out = Path(args.out) if args.out else Path(config.OUTPUT_DIRECTORY) / f"demo-{args.seed}.trace"
    write_trace(replica, out)
    print(f"wrote {out} ({len(replica.journal)} records, {len(replica.history)} entries)")
    return 0


def cli_replay(args) -> int:
    replica = replay(read_trace(args.trace), upto=args.at)
    if args.at:
        print(f"state at {args.at} on branch {replica.current_branch}")
    _print_values(replica)
    return 0


def cli_query(args) -> int:
    replica = replay_trace(args.trace)
    if args.at:
        print(render_value(replica.value_at(args.signal, VersionStamp.parse(args.at), args.branch)))
    elif args.time is not None:
        print(render_value(replica.value_at(args.signal, parse_time(args.time), args.branch)))
    else:
        for entry in replica.history_of(args.signal, args.branch):
            print(f"{entry.stamp}\t{entry.wall_time}\t{entry.origin.value}\t{entry.action}\t{render_value(entry.value)}")
    return 0


def _tree_entry_count(replica: Replica, action) -> int:
    block = replica.get_action(action)
    return len(block.entries) + sum(_tree_entry_count(replica, child) for child in block.children)


def cli_actions(args) -> int:
    replica = replay_trace(args.trace)
    blocks = replica.actions(kind=args.kind, label=args.label, top_level=not args.all, fuzzy=args.fuzzy)
    if not args.all and args.kind is None:
        blocks = [b for b in blocks if not (b.implicit and b.kind in REGISTRY_KINDS)]
    for block in blocks:
        depth = 0
        parent = block.parent
        while parent is not None:
            depth += 1
            parent = replica.get_action(parent).parent
        origin = "" if block.origin_replica == replica.id else f"\tfrom replica {block.origin_replica}"
        print(
            f"{'  ' * depth}{block.id}\t{block.kind}\t{block.label}\t"
            f"{_tree_entry_count(replica, block.id)} entries\t{block.opened}..{block.closed}{origin}"
        )
    print(f"{len(blocks)} actions")
    return 0


def cli_diff(args) -> int:
    replica = replay_trace(args.trace)
    changes = replica.diff(args.from_cp, args.to_cp)
    for change in changes:
        print(f"{change.signal}: {_render(change.before)} -> {_render(change.after)}")
    if not changes:
        print("no differences")
    return 0


def cli_verify(args) -> int:
    print(verify_trace(args.trace).summary())
    return 0


def cli_simulate(args) -> int:
    sim_config = SimConfig(
        replica_count=args.replicas,
        seed=args.seed,
        delay_min=args.delay_min,
        delay_max=args.delay_max,
        duplicate_prob=args.duplicate,
        reorder=not args.fifo,
        partitions=[Partition.parse(text) for text in args.partition],
    )
    report = run(sim_config, generate_workload(sim_config, args.ops))
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(report.to_bytes())
    if args.trace_dir:
        for replica_id, replica in sorted(report.replicas.items()):
            write_trace(replica, Path(args.trace_dir) / f"replica-{replica_id}.trace")
    converged, detail = assert_converged(report)
    stats = report.stats
    print(f"{'converged' if converged else 'diverged'}: {detail}")
    print(f"shared action log: {report.shared_log_length} actions")
    print(
        f"messages: {stats.messages} sent, {stats.duplicates} duplicated, {stats.delivered} delivered, "
        f"{stats.buffered} buffered, max buffer depth {stats.max_buffer_depth}, ticks {stats.ticks}"
    )
    if not converged:
        logger.error(f"Simulation with seed {args.seed} diverged: {detail}")
        return 1
    return 0


def cli_export(args) -> int:
    replica = replay_trace(args.trace)
    if args.out:
        export_provenance(replica, args.format, args.out)
        print(f"wrote {args.out}")
    elif args.out_dir:
        out = Path(args.out_dir) / f"{Path(args.trace).stem}.{extension_for(args.format)}"
        export_provenance(replica, args.format, out)
        print(f"wrote {out}")
    else:
        sys.stdout.buffer.write(export_provenance(replica, args.format))
        sys.stdout.flush()
    return 0


def build_parser(prog: str = "trace-signals") -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=prog, description="Record, replay and replicate semantic traces of reactive state")
    parser.add_argument("--log-level", choices=LOG_LEVELS, default=None, help="Override the configured log level")
    sub = parser.add_subparsers(dest="cmd", required=True)

    pd = sub.add_parser("demo", help="Record a scripted single-replica session")
    pd.add_argument("--seed", type=int, required=True)
    pd.add_argument("--out", help=f"Trace file (default {config.OUTPUT_DIRECTORY}/demo-SEED.trace)")
    pd.add_argument("--actions", type=int, default=config.DEMO_ACTIONS)

    pr = sub.add_parser("replay", help="Print signal values at the end of a trace or at a stamp")
    pr.add_argument("--trace", required=True)
    pr.add_argument("--at", help="Stop after this lamport@replica stamp")

    pq = sub.add_parser("query", help="Print a signal's history or its value at a stamp or time")
    pq.add_argument("--trace", required=True)
    pq.add_argument("--signal", required=True)
    pq.add_argument("--branch", default=None)
    when = pq.add_mutually_exclusive_group()
    when.add_argument("--at", help="lamport@replica stamp")
    when.add_argument("--time", help="Milliseconds since the epoch or an ISO-8601 datetime")

    pa = sub.add_parser("actions", help="List the semantic action log")
    pa.add_argument("--trace", required=True)
    pa.add_argument("--kind")
    pa.add_argument("--label")
    pa.add_argument("--fuzzy", action="store_true", help="Match --label fuzzily")
    pa.add_argument("--all", action="store_true", help="Include nested and bookkeeping actions")

    pdf = sub.add_parser("diff", help="Signals whose values differ between two checkpoints")
    pdf.add_argument("--trace", required=True)
    pdf.add_argument("--from", dest="from_cp", required=True)
    pdf.add_argument("--to", dest="to_cp", required=True)

    pv = sub.add_parser("verify", help="Replay, re-serialize and check every invariant")
    pv.add_argument("--trace", required=True)

    ps = sub.add_parser("simulate", help="Run replicas over the simulated network and check convergence")
    ps.add_argument("--replicas", type=int, required=True)
    ps.add_argument("--seed", type=int, required=True)
    ps.add_argument("--ops", type=int, required=True)
    ps.add_argument("--duplicate", type=float, default=config.SIM_DUPLICATE_PROB)
    ps.add_argument("--partition", action="append", default=[], help="START:END:R1,R2 (repeatable)")
    ps.add_argument("--delay-min", dest="delay_min", type=int, default=config.SIM_DELAY_MIN)
    ps.add_argument("--delay-max", dest="delay_max", type=int, default=config.SIM_DELAY_MAX)
    ps.add_argument("--fifo", action="store_true", help="Deliver in send order per channel")
    ps.add_argument("--report", help="Write the simulation report here")
    ps.add_argument("--trace-dir", dest="trace_dir", help="Write each replica's trace into this directory")

    pe = sub.add_parser("export", help="Export the provenance graph of a trace")
    pe.add_argument("--trace", required=True)
    pe.add_argument("--format", choices=sorted(FORMATS), default="trig")
    target = pe.add_mutually_exclusive_group()
    target.add_argument("--out")
    target.add_argument("--out-dir", dest="out_dir")

    return parser


COMMANDS = {
    "demo": cli_demo,
    "replay": cli_replay,
    "query": cli_query,
    "actions": cli_actions,
    "diff": cli_diff,
    "verify": cli_verify,
    "simulate": cli_simulate,
    "export": cli_export,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        logger.setLevel(getattr(logging, args.log_level.upper()))
    try:
        return COMMANDS[args.cmd](args)
    except TraceSignalsError as e:
        logger.error(f"{args.cmd} failed: {type(e).__name__}: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
