"""Operation-based replication types: clocks, ops, transactions and their canonical encoding.

Wire format: one format-version byte followed by canonical UTF-8 JSON
(sorted keys, no whitespace). Values use the tagged encoding from
``values.py`` so floats keep their exact 64-bit pattern.
"""

from __future__ import annotations

import json
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar, Union

from .errors import InvalidStamp, InvalidValue, MalformedTransaction
from .stamps import ActionId, TxnId, VersionStamp
from .values import Value, canonical_json, decode_value, encode_value

FORMAT_VERSION = 1


class Merge(str, Enum):
    keep = "keep"
    replace = "replace"


def last_writer_wins(existing: VersionStamp | None, incoming: VersionStamp) -> Merge:
    """Replace iff ``incoming`` is lexicographically greater on (lamport, replica)."""
    if existing is None or incoming > existing:
        return Merge.replace
    return Merge.keep


@dataclass
class VectorClock:
    counters: dict[int, int] = field(default_factory=dict)

    def get(self, replica: int) -> int:
        return self.counters.get(replica, 0)

    def advance(self, replica: int, seq: int) -> None:
        if seq > self.get(replica):
            self.counters[replica] = seq

    def merge(self, other: VectorClock) -> None:
        for replica, seq in other.counters.items():
            self.advance(replica, seq)

    def dominates(self, other: VectorClock) -> bool:
        return all(self.get(replica) >= seq for replica, seq in other.counters.items())

    def happens_before(self, other: VectorClock) -> bool:
        replicas = set(self.counters) | set(other.counters)
        return other.dominates(self) and any(self.get(r) < other.get(r) for r in replicas)

    def concurrent_with(self, other: VectorClock) -> bool:
        return not self.happens_before(other) and not other.happens_before(self) and self != other

    def copy(self, exclude: int | None = None) -> VectorClock:
        return VectorClock({r: s for r, s in self.counters.items() if r != exclude and s > 0})

    def to_dict(self) -> dict[str, int]:
        return {str(replica): seq for replica, seq in sorted(self.counters.items()) if seq > 0}

    @classmethod
    def from_dict(cls, data: Mapping[str, int]) -> VectorClock:
        counters = {}
        for replica, seq in data.items():
            if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
                raise ValueError(f"bad clock counter {seq!r}")
            counters[int(replica)] = seq
        return cls(counters)

    def __str__(self) -> str:
        return "{" + ", ".join(f"{r}:{s}" for r, s in sorted(self.counters.items())) + "}"


# --- ops ---
@dataclass(frozen=True)
class DeclareSource:
    op: ClassVar[str] = "declare_source"
    signal: str
    initial: Value
    stamp: VersionStamp
    wall_time: int
    action: ActionId

    def to_dict(self) -> dict:
        return {"op": self.op, "signal": self.signal, "initial": encode_value(self.initial),
                "stamp": str(self.stamp), "wall_time": self.wall_time, "action": str(self.action)}


@dataclass(frozen=True)
class DeclareDerived:
    op: ClassVar[str] = "declare_derived"
    signal: str
    deps: tuple[str, ...]
    compute: str
    stamp: VersionStamp
    wall_time: int
    action: ActionId

    def to_dict(self) -> dict:
        return {"op": self.op, "signal": self.signal, "deps": list(self.deps), "compute": self.compute,
                "stamp": str(self.stamp), "wall_time": self.wall_time, "action": str(self.action)}


@dataclass(frozen=True)
class SetValue:
    op: ClassVar[str] = "set_value"
    signal: str
    value: Value
    stamp: VersionStamp
    wall_time: int
    action: ActionId

    def to_dict(self) -> dict:
        return {"op": self.op, "signal": self.signal, "value": encode_value(self.value),
                "stamp": str(self.stamp), "wall_time": self.wall_time, "action": str(self.action)}


@dataclass(frozen=True)
class DeclareCheckpoint:
    op: ClassVar[str] = "declare_checkpoint"
    checkpoint: str
    label: str
    frontier: Mapping[str, VersionStamp]
    branch: str
    stamp: VersionStamp
    wall_time: int
    action: ActionId

    def to_dict(self) -> dict:
        return {"op": self.op, "checkpoint": self.checkpoint, "label": self.label,
                "frontier": {s: str(v) for s, v in sorted(self.frontier.items())}, "branch": self.branch,
                "stamp": str(self.stamp), "wall_time": self.wall_time, "action": str(self.action)}


@dataclass(frozen=True)
class PathEvent:
    op: ClassVar[str] = "path_event"
    event: str  # "create" | "append"
    path: str
    label: str | None
    checkpoint: str | None
    stamp: VersionStamp
    wall_time: int
    action: ActionId

    def to_dict(self) -> dict:
        return {"op": self.op, "event": self.event, "path": self.path, "label": self.label,
                "checkpoint": self.checkpoint, "stamp": str(self.stamp), "wall_time": self.wall_time,
                "action": str(self.action)}


Op = Union[DeclareSource, DeclareDerived, SetValue, DeclareCheckpoint, PathEvent]


def _str(data: Mapping, key: str) -> str:
    value = data[key]
    if not isinstance(value, str):
        raise ValueError(f"{key} must be a string")
    return value


def _int(data: Mapping, key: str) -> int:
    value = data[key]
    if not isinstance(value, int) or isinstance(value, bool):
        raise ValueError(f"{key} must be an integer")
    return value


def op_from_dict(data: Mapping) -> Op:
    kind = data["op"]
    stamp = VersionStamp.parse(data["stamp"])
    wall_time = _int(data, "wall_time")
    action = ActionId.parse(data["action"])
    if kind == DeclareSource.op:
        return DeclareSource(_str(data, "signal"), decode_value(data["initial"]), stamp, wall_time, action)
    if kind == DeclareDerived.op:
        deps = data["deps"]
        if not isinstance(deps, list) or not all(isinstance(d, str) for d in deps):
            raise ValueError("deps must be a list of signal ids")
        return DeclareDerived(_str(data, "signal"), tuple(deps), _str(data, "compute"), stamp, wall_time, action)
    if kind == SetValue.op:
        return SetValue(_str(data, "signal"), decode_value(data["value"]), stamp, wall_time, action)
    if kind == DeclareCheckpoint.op:
        frontier = {str(s): VersionStamp.parse(v) for s, v in data["frontier"].items()}
        return DeclareCheckpoint(_str(data, "checkpoint"), _str(data, "label"), frontier, _str(data, "branch"),
                                 stamp, wall_time, action)
    if kind == PathEvent.op:
        event = _str(data, "event")
        if event not in ("create", "append"):
            raise ValueError(f"unknown path event {event!r}")
        return PathEvent(event, _str(data, "path"), data.get("label"), data.get("checkpoint"), stamp, wall_time, action)
    raise ValueError(f"unknown op {kind!r}")


@dataclass(frozen=True)
class ActionDescriptor:
    """The semantic action travelling with a transaction; nested children fold into the tree."""

    id: ActionId
    label: str
    kind: str
    implicit: bool
    started_at: int
    ended_at: int
    opened: VersionStamp
    closed: VersionStamp
    inverse_of: ActionId | None = None
    redo_of: ActionId | None = None
    children: tuple[ActionDescriptor, ...] = ()

    def walk(self, parent: ActionId | None = None) -> Iterator[tuple[ActionDescriptor, ActionId | None]]:
        """Post-order (children close before their parent), with each node's parent id."""
        for child in self.children:
            yield from child.walk(self.id)
        yield self, parent

    def ids(self) -> set[ActionId]:
        return {node.id for node, _ in self.walk()}

    def to_dict(self) -> dict:
        return {
            "id": str(self.id),
            "label": self.label,
            "kind": self.kind,
            "implicit": self.implicit,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "opened": str(self.opened),
            "closed": str(self.closed),
            "inverse_of": str(self.inverse_of) if self.inverse_of else None,
            "redo_of": str(self.redo_of) if self.redo_of else None,
            "children": [child.to_dict() for child in self.children],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> ActionDescriptor:
        implicit = data["implicit"]
        if not isinstance(implicit, bool):
            raise ValueError("implicit must be a boolean")
        return cls(
            id=ActionId.parse(data["id"]),
            label=_str(data, "label"),
            kind=_str(data, "kind"),
            implicit=implicit,
            started_at=_int(data, "started_at"),
            ended_at=_int(data, "ended_at"),
            opened=VersionStamp.parse(data["opened"]),
            closed=VersionStamp.parse(data["closed"]),
            inverse_of=ActionId.parse(data["inverse_of"]) if data["inverse_of"] else None,
            redo_of=ActionId.parse(data["redo_of"]) if data["redo_of"] else None,
            children=tuple(cls.from_dict(child) for child in data["children"]),
        )


@dataclass(frozen=True)
class Transaction:
    txn_id: TxnId
    lamport: int
    deps: VectorClock
    ops: tuple[Op, ...]
    action: ActionDescriptor

    @property
    def sender(self) -> int:
        return self.txn_id.replica

    @property
    def stamp(self) -> VersionStamp:
        return VersionStamp(self.lamport, self.txn_id.replica)

    def to_dict(self) -> dict:
        return {
            "id": str(self.txn_id),
            "lamport": self.lamport,
            "deps": self.deps.to_dict(),
            "ops": [op.to_dict() for op in self.ops],
            "action": self.action.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> Transaction:
        try:
            txn_id = TxnId.parse(data["id"])
            lamport = _int(data, "lamport")
            if txn_id.seq < 1 or lamport < 1:
                raise ValueError("sequence numbers and lamports start at 1")
            deps = VectorClock.from_dict(data["deps"])
            action = ActionDescriptor.from_dict(data["action"])
            ops = tuple(op_from_dict(op) for op in data["ops"])
        except (KeyError, TypeError, ValueError, AttributeError, InvalidStamp, InvalidValue) as e:
            raise MalformedTransaction(f"malformed transaction: {e!r}") from e
        if action.id.replica != txn_id.replica:
            raise MalformedTransaction(f"transaction {txn_id} carries action {action.id} of another replica")
        known = action.ids()
        for op in ops:
            if op.action not in known:
                raise MalformedTransaction(f"op on {getattr(op, 'signal', op.op)} references action {op.action} outside the transaction")
            if op.stamp.replica != txn_id.replica or op.stamp.lamport >= lamport:
                raise MalformedTransaction(f"op stamp {op.stamp} is not an earlier stamp of replica {txn_id.replica}")
        return cls(txn_id, lamport, deps, ops, action)


def encode(txn: Transaction) -> bytes:
    return bytes([FORMAT_VERSION]) + canonical_json(txn.to_dict()).encode("utf-8")


def decode(data: bytes) -> Transaction:
    if not isinstance(data, (bytes, bytearray)) or len(data) < 2:
        raise MalformedTransaction("transaction bytes are empty or truncated")
    if data[0] != FORMAT_VERSION:
        raise MalformedTransaction(f"unsupported transaction format version {data[0]}")
    try:
        payload = json.loads(bytes(data[1:]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedTransaction(f"transaction payload is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise MalformedTransaction("transaction payload must be an object")
    return Transaction.from_dict(payload)
