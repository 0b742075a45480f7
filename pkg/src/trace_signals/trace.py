"""Trace files: one canonical JSON record per line, header first, hash-chained.

A closing ``end`` record counts the records before it, so truncation is caught too.
Each record carries ``chain``: the first 16 hex digits of
SHA-256(previous chain + canonical record without ``chain``), starting from
the empty string at the header. Editing, removing or reordering any line
breaks the chain from that line on.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    InvalidStamp,
    InvalidValue,
    InvariantViolation,
    IoFailure,
    MalformedTrace,
    UnknownStamp,
    UnsupportedVersion,
)
from .invariants import check_invariants
from .logging_config import logger
from .replica import EVENT_TYPES, TRACE_FORMAT, TRACE_VERSION, Replica
from .signals import ComputeRegistry
from .stamps import VersionStamp
from .values import canonical_json

CHAIN_DIGITS = 16
END_RECORD = "end"


def chain_digest(previous: str, record: dict) -> str:
    return hashlib.sha256((previous + canonical_json(record)).encode("utf-8")).hexdigest()[:CHAIN_DIGITS]


def check_header(record: dict) -> dict:
    if record.get("type") != "header":
        raise MalformedTrace("first record must be the trace header", line=1)
    if record.get("format") != TRACE_FORMAT:
        raise MalformedTrace(f"unknown trace format {record.get('format')!r}", line=1)
    version = record.get("version")
    if not isinstance(version, int) or isinstance(version, bool) or version < 1:
        raise MalformedTrace(f"bad trace version {version!r}", line=1)
    if version > TRACE_VERSION:
        raise UnsupportedVersion(f"trace version {version} is newer than the supported version {TRACE_VERSION}")
    replica = record.get("replica")
    if not isinstance(replica, int) or isinstance(replica, bool) or replica < 0:
        raise MalformedTrace(f"bad replica id {replica!r} in header", line=1)
    if not isinstance(record.get("shared"), bool):
        raise MalformedTrace("header must say whether the replica is shared", line=1)
    return record


def dumps_trace(events: Iterable[dict]) -> str:
    lines = []
    previous = ""
    events = list(events)
    for event in [*events, {"type": END_RECORD, "records": len(events)}]:
        record = {key: value for key, value in event.items() if key != "chain"}
        previous = chain_digest(previous, record)
        lines.append(canonical_json({**record, "chain": previous}))
    return "\n".join(lines) + "\n"


def loads_trace(text: str) -> list[dict]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedTrace("trace is empty, a header record is required", line=1)
    events = []
    previous = ""
    for number, line in enumerate(lines, start=1):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedTrace(f"not a JSON record ({e.msg})", line=number) from e
        if not isinstance(record, dict):
            raise MalformedTrace("record is not an object", line=number)
        last = number == len(lines)
        if number == 1:
            check_header(record)
        elif record.get("type") == END_RECORD and last:
            pass
        elif record.get("type") not in EVENT_TYPES:
            raise MalformedTrace(f"unknown record type {record.get('type')!r}", line=number)
        chain = record.pop("chain", None)
        if chain != chain_digest(previous, record):
            raise MalformedTrace("hash chain broken: a record was edited, removed or reordered here", line=number)
        if canonical_json({**record, "chain": chain}) != line:
            raise MalformedTrace("record is not in canonical form", line=number)
        previous = chain
        if record.get("type") == END_RECORD:
            if record.get("records") != len(events):
                raise MalformedTrace(f"end record counts {record.get('records')} records, found {len(events)}", line=number)
            return events
        events.append(record)
    raise MalformedTrace("trace is truncated: the closing end record is missing", line=len(lines) + 1)


def write_trace(source: Replica | Sequence[dict], path: str | Path) -> Path:
    events = source.journal if isinstance(source, Replica) else list(source)
    text = dumps_trace(events)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise IoFailure(f"cannot write trace {path}: {e}") from e
    logger.info(f"Trace written to {path} ({len(events)} records)")
    return path


def _read_text(path: str | Path) -> str:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            return f.read()
    except (OSError, UnicodeDecodeError) as e:
        raise IoFailure(f"cannot read trace {path}: {e}") from e


def read_trace(path: str | Path) -> list[dict]:
    return loads_trace(_read_text(path))


def replay(events: Sequence[dict], registry: ComputeRegistry | None = None, upto: VersionStamp | str | None = None) -> Replica:
    """Fold ``events`` into a fresh replica, stopping after the last event at or before ``upto``."""
    events = list(events)
    if not events:
        raise MalformedTrace("trace is empty, a header record is required", line=1)
    header = check_header(events[0])
    if isinstance(upto, str):
        upto = VersionStamp.parse(upto)
    # a cut is a position in this replica's log: remote entry stamps are recorded at later local stamps
    if upto is not None and str(upto) not in {event.get("at") for event in events[1:]}:
        raise UnknownStamp(f"no event of this trace is recorded at {upto}")
    replica = Replica.from_header(header, registry)
    for number, event in enumerate(events[1:], start=2):
        try:
            if upto is not None and VersionStamp.parse(event["at"]) > upto:
                break
            replica.replay_event(event)
        except (KeyError, TypeError, ValueError, AttributeError, InvalidStamp, InvalidValue) as e:
            raise MalformedTrace(f"{type(e).__name__}: {e}", line=number) from e
        except InvariantViolation as e:
            raise InvariantViolation(f"line {number}: {e}") from e
    logger.debug(f"Replayed {len(events)} records into replica {replica.id}" + (f" up to {upto}" if upto else ""))
    return replica


def replay_trace(path: str | Path, registry: ComputeRegistry | None = None, upto: VersionStamp | str | None = None) -> Replica:
    replica = replay(read_trace(path), registry, upto)
    logger.info(f"Replayed {path} ({len(replica.history)} entries)")
    return replica


@dataclass
class VerifyReport:
    records: int
    signals: int
    entries: int
    actions: int
    checkpoints: int
    transactions: int
    replica: Replica = field(repr=False)

    def summary(self) -> str:
        return (
            f"ok: {self.records} records, {self.signals} signals, {self.entries} entries, "
            f"{self.actions} top-level actions, {self.checkpoints} checkpoints, {self.transactions} transactions"
        )


def verify_trace(path: str | Path, registry: ComputeRegistry | None = None) -> VerifyReport:
    """Replay, re-serialize byte for byte and check every module invariant."""
    text = _read_text(path)
    events = loads_trace(text)
    replica = replay(events, registry)
    rewritten = dumps_trace(replica.journal)
    if rewritten != text:
        for number, (old, new) in enumerate(zip(text.split("\n"), rewritten.split("\n")), start=1):
            if old != new:
                raise InvariantViolation(f"line {number}: re-serialized trace differs from the file")
        raise InvariantViolation("re-serialized trace differs from the file in length")
    problems = check_invariants(replica)
    if problems:
        for problem in problems:
            logger.debug(f"Invariant violated in {path}: {problem}")
        raise InvariantViolation(f"{len(problems)} invariant violations, first: {problems[0]}")
    return VerifyReport(
        records=len(events),
        signals=len(replica.graph),
        entries=len(replica.history),
        actions=len(replica.actions(top_level=True)),
        checkpoints=len(replica.checkpoints()),
        transactions=len(replica.shared_action_log()),
        replica=replica,
    )
