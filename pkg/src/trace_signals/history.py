"""Persistent histories and the coarse trace structure (checkpoints, branches, paths).

The global, stamp-ordered log is authoritative; the per-signal index is derived
from it. Entries are never mutated or removed. Remote entries may land in the
middle of the order (a losing concurrent write still belongs to the history).
"""

from __future__ import annotations

import bisect
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import InvariantViolation, UnknownBranch
from .signals import SignalKind
from .stamps import ActionId, VersionStamp
from .values import Value, encode_value

MAIN_BRANCH = "main"

# branch id -> inclusive stamp bound (None: the branch's own entries, unbounded)
Visibility = Mapping[str, VersionStamp | None]


class _Absent:
    def __repr__(self) -> str:
        return "ABSENT"

    def __bool__(self) -> bool:
        return False


ABSENT = _Absent()


@dataclass(frozen=True)
class HistoryEntry:
    signal: str
    stamp: VersionStamp
    value: Value
    wall_time: int
    action: ActionId
    origin: SignalKind
    branch: str

    def to_dict(self) -> dict:
        return {
            "signal": self.signal,
            "stamp": str(self.stamp),
            "value": encode_value(self.value),
            "wall_time": self.wall_time,
            "action": str(self.action),
            "origin": self.origin.value,
            "branch": self.branch,
        }


@dataclass
class Checkpoint:
    id: str
    label: str
    frontier: dict[str, VersionStamp]
    branch: str
    created_at: int
    at: VersionStamp

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "frontier": {signal: str(stamp) for signal, stamp in sorted(self.frontier.items())},
            "branch": self.branch,
            "created_at": self.created_at,
            "at": str(self.at),
        }


@dataclass
class Branch:
    id: str
    label: str
    parent: tuple[str, str] | None = None
    fork_at: VersionStamp | None = None
    created_at: int = 0
    tip: dict[str, HistoryEntry] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "parent": list(self.parent) if self.parent else None,
            "fork_at": str(self.fork_at) if self.fork_at else None,
            "created_at": self.created_at,
            "tip": {signal: str(entry.stamp) for signal, entry in sorted(self.tip.items())},
        }


@dataclass
class ExplorationPath:
    """Ordered checkpoint visits; steps are kept in stamp order so concurrent appends converge."""

    id: str
    label: str
    created: VersionStamp
    created_at: int = 0
    steps: list[str] = field(default_factory=list)
    step_stamps: list[VersionStamp] = field(default_factory=list)

    def add_step(self, checkpoint: str, stamp: VersionStamp) -> None:
        index = bisect.bisect_right(self.step_stamps, stamp)
        self.step_stamps.insert(index, stamp)
        self.steps.insert(index, checkpoint)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "created": str(self.created),
            "created_at": self.created_at,
            "steps": [{"checkpoint": cp, "stamp": str(stamp)} for cp, stamp in zip(self.steps, self.step_stamps)],
        }


class SignalDiff(NamedTuple):
    signal: str
    before: Value | _Absent
    after: Value | _Absent


def lineage(branches: Mapping[str, Branch], branch_id: str) -> dict[str, VersionStamp | None]:
    """Visibility of every ancestor branch from ``branch_id``: entries up to the tightest fork bound."""
    if branch_id not in branches:
        raise UnknownBranch(f"unknown branch {branch_id!r}")
    visibility: dict[str, VersionStamp | None] = {branch_id: None}
    bound: VersionStamp | None = None
    branch = branches[branch_id]
    while branch.parent is not None:
        parent_id, _checkpoint = branch.parent
        bound = branch.fork_at if bound is None else min(bound, branch.fork_at)
        visibility[parent_id] = bound
        branch = branches[parent_id]
    return visibility


def is_visible(entry: HistoryEntry, visibility: Visibility) -> bool:
    if entry.branch not in visibility:
        return False
    bound = visibility[entry.branch]
    return bound is None or entry.stamp <= bound


class History:
    def __init__(self):
        self._log: list[HistoryEntry] = []
        self._index: dict[str, list[HistoryEntry]] = {}
        self._by_stamp: dict[VersionStamp, HistoryEntry] = {}

    def add(self, entry: HistoryEntry) -> None:
        if entry.stamp in self._by_stamp:
            raise InvariantViolation(f"stamp {entry.stamp} is already used by an entry of {self._by_stamp[entry.stamp].signal!r}")
        self._by_stamp[entry.stamp] = entry
        bisect.insort(self._log, entry, key=lambda e: e.stamp)
        bisect.insort(self._index.setdefault(entry.signal, []), entry, key=lambda e: e.stamp)

    def __len__(self) -> int:
        return len(self._log)

    def __iter__(self) -> Iterator[HistoryEntry]:
        return iter(list(self._log))

    def get(self, stamp: VersionStamp) -> HistoryEntry | None:
        return self._by_stamp.get(stamp)

    def signals(self) -> list[str]:
        return list(self._index)

    def entries(self, signal: str, visibility: Visibility | None = None) -> list[HistoryEntry]:
        entries = self._index.get(signal, [])
        if visibility is None:
            return list(entries)
        return [e for e in entries if is_visible(e, visibility)]

    def latest(self, signal: str, visibility: Visibility, at: VersionStamp | None = None) -> HistoryEntry | None:
        entries = self._index.get(signal, [])
        end = len(entries) if at is None else bisect.bisect_right(entries, at, key=lambda e: e.stamp)
        for entry in reversed(entries[:end]):
            if is_visible(entry, visibility):
                return entry
        return None

    def latest_before(self, signal: str, visibility: Visibility, stamp: VersionStamp) -> HistoryEntry | None:
        entries = self._index.get(signal, [])
        end = bisect.bisect_left(entries, stamp, key=lambda e: e.stamp)
        for entry in reversed(entries[:end]):
            if is_visible(entry, visibility):
                return entry
        return None

    def latest_by_time(self, signal: str, visibility: Visibility, wall_time: int) -> HistoryEntry | None:
        best = None
        for entry in self._index.get(signal, []):
            if entry.wall_time <= wall_time and is_visible(entry, visibility):
                if best is None or (entry.wall_time, entry.stamp) > (best.wall_time, best.stamp):
                    best = entry
        return best
