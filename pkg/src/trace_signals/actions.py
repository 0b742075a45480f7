"""Semantic action blocks and per-replica undo/redo stacks."""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field

from rapidfuzz import fuzz

from .stamps import ActionId, TxnId, VersionStamp

# implicit kinds that wrap user edits; registry-only implicit blocks are not undoable
UNDOABLE_IMPLICIT_KINDS = frozenset({"edit", "batch"})
REGISTRY_KINDS = frozenset({"declare", "checkpoint", "path"})
UNDO_KIND = "undo"
REDO_KIND = "redo"


@dataclass
class ActionBlock:
    id: ActionId
    label: str
    kind: str
    parent: ActionId | None
    started_at: int
    opened: VersionStamp
    origin_replica: int
    implicit: bool = False
    inverse_of: ActionId | None = None
    redo_of: ActionId | None = None
    ended_at: int | None = None
    closed: VersionStamp | None = None
    entries: list[VersionStamp] = field(default_factory=list)
    children: list[ActionId] = field(default_factory=list)
    txn: TxnId | None = None

    @property
    def is_open(self) -> bool:
        return self.closed is None

    @property
    def top_level(self) -> bool:
        return self.parent is None

    @property
    def undoable(self) -> bool:
        if self.kind in (UNDO_KIND, REDO_KIND) and (self.inverse_of or self.redo_of):
            return False
        return not self.implicit or self.kind in UNDOABLE_IMPLICIT_KINDS

    def to_dict(self) -> dict:
        return {
            "id": str(self.id),
            "label": self.label,
            "kind": self.kind,
            "parent": str(self.parent) if self.parent else None,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "opened": str(self.opened),
            "closed": str(self.closed) if self.closed else None,
            "origin_replica": self.origin_replica,
            "implicit": self.implicit,
            "inverse_of": str(self.inverse_of) if self.inverse_of else None,
            "redo_of": str(self.redo_of) if self.redo_of else None,
            "entries": [str(stamp) for stamp in self.entries],
            "children": [str(child) for child in self.children],
            "txn": str(self.txn) if self.txn else None,
        }


def filter_blocks(
    blocks: Iterable[ActionBlock],
    kind: str | None = None,
    label: str | None = None,
    since: int | None = None,
    until: int | None = None,
    top_level: bool = False,
    implicit: bool | None = None,
    fuzzy: bool = False,
    threshold: int = 90,
) -> list[ActionBlock]:
    selected = []
    for block in blocks:
        if kind is not None and block.kind != kind:
            continue
        if label is not None:
            if fuzzy:
                if fuzz.ratio(block.label.lower(), label.lower()) < threshold:
                    continue
            elif block.label != label:
                continue
        if since is not None and block.started_at < since:
            continue
        if until is not None and (block.ended_at is None or block.ended_at > until):
            continue
        if top_level and not block.top_level:
            continue
        if implicit is not None and block.implicit != implicit:
            continue
        selected.append(block)
    return selected


@dataclass
class UndoStacks:
    """Linear undo/redo over locally-originated top-level actions."""

    undo: list[ActionId] = field(default_factory=list)
    redo: list[ActionId] = field(default_factory=list)

    def push_fresh(self, action: ActionId) -> None:
        self.undo.append(action)
        self.redo.clear()

    def undone(self, target: ActionId) -> None:
        if self.undo and self.undo[-1] == target:
            self.undo.pop()
        elif target in self.undo:
            self.undo.remove(target)
        self.redo.append(target)

    def redone(self, target: ActionId) -> None:
        if self.redo and self.redo[-1] == target:
            self.redo.pop()
        elif target in self.redo:
            self.redo.remove(target)
        self.undo.append(target)

    def to_dict(self) -> dict:
        return {"undo": [str(a) for a in self.undo], "redo": [str(a) for a in self.redo]}
