"""Replica: the event-sourced facade over signals, histories, actions and replication.

Every state change is a journal event (a plain dict) applied through ``_apply``.
Live operations build fully specified events and run them through the same
handlers that replay uses, so the journal is the trace.
"""

from __future__ import annotations

import bisect
import copy
import time
from collections.abc import Callable, Iterable, Iterator, Mapping
from contextlib import contextmanager
from enum import Enum
from typing import Any

from . import replication
from .actions import REDO_KIND, UNDO_KIND, ActionBlock, UndoStacks, filter_blocks
from .config import FUZZY_THRESHOLD
from .errors import (
    BeforeFirstEntry,
    BranchingNotSupportedInSharedMode,
    ComputeFailed,
    DerivedNotSettable,
    DuplicateName,
    InvalidStamp,
    InvalidValue,
    InvariantViolation,
    MalformedTrace,
    NestedBatch,
    NotInnermost,
    NotShared,
    OpenScope,
    UnknownAction,
    UnknownBranch,
    UnknownCheckpoint,
    UnknownPath,
    UnknownSignal,
)
from .history import (
    ABSENT,
    MAIN_BRANCH,
    Branch,
    Checkpoint,
    ExplorationPath,
    History,
    HistoryEntry,
    SignalDiff,
    lineage,
)
from .logging_config import logger
from .replication import (
    ActionDescriptor,
    DeclareCheckpoint,
    DeclareDerived,
    DeclareSource,
    Merge,
    Op,
    PathEvent,
    SetValue,
    Transaction,
    VectorClock,
    decode,
    encode,
)
from .signals import ComputeFn, ComputeRegistry, SignalGraph, SignalKind, SignalNode, default_registry
from .stamps import ActionId, TxnId, VersionStamp
from .values import Value, canonical_json, check_value, copy_value, decode_value, encode_value, render_value, values_equal

TRACE_FORMAT = "trace-signals"
TRACE_VERSION = 1

EVENT_TYPES = frozenset({
    "declare_source", "declare_derived", "entry", "action_begin", "action_end", "batch",
    "checkpoint", "branch", "path", "txn_commit", "txn_deliver",
})


class ApplyResult(str, Enum):
    applied = "applied"
    buffered = "buffered"
    duplicate = "duplicate"


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


class Replica:
    def __init__(
        self,
        replica_id: int = 1,
        shared: bool = False,
        registry: ComputeRegistry | None = None,
        clock: Callable[[], int] | None = None,
    ):
        if not isinstance(replica_id, int) or isinstance(replica_id, bool) or replica_id < 0:
            raise ValueError(f"replica ids are non-negative integers, got {replica_id!r}")
        self.id = replica_id
        self.shared = bool(shared)
        self.registry = registry if registry is not None else default_registry.copy()
        self._clock = clock or wall_clock_ms

        self.graph = SignalGraph(self.registry)
        self.history = History()
        self.lamport = 0
        self.current_branch = MAIN_BRANCH
        self._branches: dict[str, Branch] = {MAIN_BRANCH: Branch(MAIN_BRANCH, MAIN_BRANCH)}
        self._checkpoints: dict[str, Checkpoint] = {}
        self._paths: dict[str, ExplorationPath] = {}

        self._blocks: dict[ActionId, ActionBlock] = {}
        self._open: list[ActionId] = []
        self._batch: dict | None = None
        self._stacks: dict[str, UndoStacks] = {}
        self._action_seq = 0

        self.vector_clock = VectorClock()
        self._pending: list[Op] = []
        self._txns: dict[TxnId, Transaction] = {}
        self._shared_log: list[TxnId] = []
        self._buffer: dict[TxnId, Transaction] = {}
        self._outbox: list[bytes] = []

        self._journal: list[dict] = [self.header()]
        self._last_at: VersionStamp | None = None
        self._replaying = False

    def __repr__(self) -> str:
        mode = "shared" if self.shared else "local"
        return f"Replica(id={self.id}, {mode}, signals={len(self.graph)}, entries={len(self.history)})"

    def header(self) -> dict:
        return {"type": "header", "format": TRACE_FORMAT, "version": TRACE_VERSION, "replica": self.id, "shared": self.shared}

    @classmethod
    def from_header(cls, header: Mapping, registry: ComputeRegistry | None = None) -> Replica:
        """Fresh replica in replay mode: events are fed in with ``replay_event``."""
        replica = cls(header["replica"], header["shared"], registry=registry, clock=lambda: 0)
        replica._replaying = True
        return replica

    # --- journal ---
    @property
    def journal(self) -> list[dict]:
        return copy.deepcopy(self._journal)

    def replay_event(self, event: dict) -> Any:
        if not self._replaying:
            raise InvariantViolation("events can only be replayed into a replica built from a trace header")
        return self._emit(copy.deepcopy(event))

    def _now(self) -> int:
        wall = self._clock()
        if not isinstance(wall, int) or isinstance(wall, bool):
            raise InvalidValue(f"wall clock must return integer milliseconds, got {wall!r}")
        return wall

    def _tick(self) -> VersionStamp:
        self.lamport += 1
        return VersionStamp(self.lamport, self.id)

    def _emit(self, event: dict) -> Any:
        result = self._apply(event)
        self._journal.append(event)
        return result

    def _apply(self, event: dict) -> Any:
        kind = event.get("type")
        if kind not in EVENT_TYPES:
            raise MalformedTrace(f"unknown event type {kind!r}")
        at = VersionStamp.parse(event["at"])
        if self._last_at is not None and at < self._last_at:
            raise InvariantViolation(f"event at {at} is recorded after an event at {self._last_at}")
        self._last_at = at
        self.lamport = max(self.lamport, at.lamport)
        return getattr(self, f"_on_{kind}")(event, at)

    # --- event handlers ---
    def _on_declare_source(self, event: dict, at: VersionStamp) -> None:
        signal = event["signal"]
        stamp = VersionStamp.parse(event["stamp"])
        action = ActionId.parse(event["action"])
        branch = self._branch(event["branch"]).id
        initial = decode_value(event["initial"])
        self.graph.add_source(signal, stamp, branch)
        self._record(HistoryEntry(signal, stamp, initial, event["wall_time"], action, SignalKind.source, branch))
        if self.shared:
            self._pending.append(DeclareSource(signal, initial, stamp, event["wall_time"], action))

    def _on_declare_derived(self, event: dict, at: VersionStamp) -> None:
        signal = event["signal"]
        stamp = VersionStamp.parse(event["stamp"])
        action = ActionId.parse(event["action"])
        self.get_action(action)
        deps = tuple(event["deps"])
        self.graph.add_derived(signal, deps, event["compute"], stamp, self._branch(event["branch"]).id)
        if self.shared:
            self._pending.append(DeclareDerived(signal, deps, event["compute"], stamp, event["wall_time"], action))

    def _on_entry(self, event: dict, at: VersionStamp) -> bool:
        entry = HistoryEntry(
            signal=event["signal"],
            stamp=VersionStamp.parse(event["stamp"]),
            value=decode_value(event["value"]),
            wall_time=event["wall_time"],
            action=ActionId.parse(event["action"]),
            origin=SignalKind(event["origin"]),
            branch=event["branch"],
        )
        node = self.graph.node(entry.signal)
        local = entry.stamp.replica == self.id
        # remote writes to a name that lost its source declaration are kept but never become current
        if node.kind is not entry.origin and (local or entry.origin is SignalKind.derived):
            raise InvariantViolation(f"entry {entry.stamp} marks {entry.signal!r} as {entry.origin.value}, it is {node.kind.value}")
        if local and entry.stamp != at:
            raise InvariantViolation(f"local entry {entry.stamp} is recorded at {at}")
        if self._replaying and entry.origin is SignalKind.derived:
            expected = self.graph.evaluate(node, self._values(entry.branch))
            if not values_equal(expected, entry.value):
                raise InvariantViolation(
                    f"derived {entry.signal!r} recorded {render_value(entry.value)} at {entry.stamp} "
                    f"but recomputes to {render_value(expected)}"
                )
        if local and entry.origin is SignalKind.source and self._batch is not None:
            if entry.signal not in self._batch["changed"]:
                self._batch["changed"].append(entry.signal)
                current = self._branch(entry.branch).tip.get(entry.signal)
                if current is not None:
                    self._batch["before"][entry.signal] = current.value
        replaced = self._record(entry)
        if local and entry.origin is SignalKind.source:
            if self.shared:
                self._pending.append(SetValue(entry.signal, entry.value, entry.stamp, entry.wall_time, entry.action))
        return replaced

    def _on_action_begin(self, event: dict, at: VersionStamp) -> ActionId:
        action = ActionId.parse(event["action"])
        parent = ActionId.parse(event["parent"]) if event["parent"] else None
        innermost = self._open[-1] if self._open else None
        if parent != innermost:
            raise InvariantViolation(f"action {action} names parent {parent}, innermost open action is {innermost}")
        if action in self._blocks or action.replica != self.id:
            raise InvariantViolation(f"action id {action} is not a fresh local id")
        block = ActionBlock(
            id=action,
            label=event["label"],
            kind=event["kind"],
            parent=parent,
            started_at=event["wall_time"],
            opened=at,
            origin_replica=self.id,
            implicit=bool(event["implicit"]),
            inverse_of=ActionId.parse(event["inverse_of"]) if event["inverse_of"] else None,
            redo_of=ActionId.parse(event["redo_of"]) if event["redo_of"] else None,
        )
        self._blocks[action] = block
        if parent is not None:
            self._blocks[parent].children.append(action)
        self._open.append(action)
        self._action_seq = max(self._action_seq, action.seq)
        if self._batch is not None and block.implicit and block.kind == "batch":
            self._batch["action"] = action
        return action

    def _on_action_end(self, event: dict, at: VersionStamp) -> ActionBlock:
        action = ActionId.parse(event["action"])
        if not self._open or self._open[-1] != action:
            raise InvariantViolation(f"action {action} is closed but is not the innermost open action")
        block = self._blocks[action]
        listed = [VersionStamp.parse(stamp) for stamp in event["entries"]]
        if listed != block.entries:
            raise InvariantViolation(
                f"action {action} lists {len(listed)} entries but {len(block.entries)} were recorded inside it"
            )
        block.ended_at = event["wall_time"]
        block.closed = at
        self._open.pop()
        if block.top_level:
            stacks = self._stacks.setdefault(self.current_branch, UndoStacks())
            if block.inverse_of is not None:
                stacks.undone(block.inverse_of)
            elif block.redo_of is not None:
                stacks.redone(block.redo_of)
            elif block.undoable:
                stacks.push_fresh(action)
        return block

    def _on_batch(self, event: dict, at: VersionStamp) -> None:
        if event["op"] == "open":
            if self._batch is not None:
                raise NestedBatch("batches do not nest")
            self._batch = {"depth": len(self._open), "action": None, "changed": [], "before": {}}
        elif event["op"] == "close":
            if self._batch is None:
                raise InvariantViolation("batch closed without being opened")
            self._batch = None
        else:
            raise MalformedTrace(f"unknown batch op {event['op']!r}")

    def _on_checkpoint(self, event: dict, at: VersionStamp) -> Checkpoint:
        checkpoint_id = event["checkpoint"]
        if checkpoint_id in self._checkpoints:
            raise DuplicateName(f"checkpoint {checkpoint_id!r} already exists")
        action = ActionId.parse(event["action"])
        self.get_action(action)
        frontier = {signal: VersionStamp.parse(stamp) for signal, stamp in event["frontier"].items()}
        for signal, stamp in frontier.items():
            entry = self.history.get(stamp)
            if entry is None or entry.signal != signal:
                raise InvariantViolation(f"checkpoint {checkpoint_id} frontier names {signal}@{stamp} which is not an entry")
        checkpoint = Checkpoint(checkpoint_id, event["label"], frontier, self._branch(event["branch"]).id, event["wall_time"], at)
        self._checkpoints[checkpoint_id] = checkpoint
        if self.shared:
            self._pending.append(
                DeclareCheckpoint(checkpoint_id, checkpoint.label, frontier, checkpoint.branch, at, event["wall_time"], action)
            )
        return checkpoint

    def _on_branch(self, event: dict, at: VersionStamp) -> None:
        op = event["op"]
        if op == "create":
            if self.shared:
                raise BranchingNotSupportedInSharedMode("branches are local to an unshared replica")
            branch_id = event["branch"]
            if branch_id in self._branches:
                raise DuplicateName(f"branch {branch_id!r} already exists")
            parent_branch, checkpoint_id = event["parent"]
            checkpoint = self.get_checkpoint(checkpoint_id)
            if checkpoint.branch != parent_branch or str(checkpoint.at) != event["fork_at"]:
                raise InvariantViolation(f"branch {branch_id} does not fork where checkpoint {checkpoint_id} was taken")
            branch = Branch(branch_id, event["label"], (parent_branch, checkpoint_id), checkpoint.at, event["wall_time"])
            self._branches[branch_id] = branch
            visibility = lineage(self._branches, branch_id)
            for node in self.graph.nodes():
                entry = self.history.latest(node.id, visibility)
                if entry is not None:
                    branch.tip[node.id] = entry
        elif op == "switch":
            self.current_branch = self._branch(event["branch"]).id
        else:
            raise MalformedTrace(f"unknown branch op {op!r}")

    def _on_path(self, event: dict, at: VersionStamp) -> None:
        op = event["op"]
        path_id = event["path"]
        action = ActionId.parse(event["action"])
        self.get_action(action)
        label = checkpoint_id = None
        if op == "create":
            if path_id in self._paths:
                raise DuplicateName(f"path {path_id!r} already exists")
            label = event["label"]
            self._paths[path_id] = ExplorationPath(path_id, label, at, event["wall_time"])
        elif op == "append":
            checkpoint_id = event["checkpoint"]
            self.get_checkpoint(checkpoint_id)
            self._path(path_id).add_step(checkpoint_id, at)
        else:
            raise MalformedTrace(f"unknown path op {op!r}")
        if self.shared:
            self._pending.append(PathEvent(op, path_id, label, checkpoint_id, at, event["wall_time"], action))

    def _on_txn_commit(self, event: dict, at: VersionStamp) -> Transaction:
        txn = Transaction.from_dict(event["txn"])
        if not self.shared or txn.sender != self.id:
            raise InvariantViolation(f"transaction {txn.txn_id} cannot be committed by replica {self.id}")
        if txn.txn_id.seq != self.vector_clock.get(self.id) + 1 or txn.lamport != at.lamport:
            raise InvariantViolation(f"transaction {txn.txn_id} breaks the local sequence or lamport order")
        block = self._blocks.get(txn.action.id)
        if block is None or block.is_open or not block.top_level or block.txn is not None:
            raise InvariantViolation(f"transaction {txn.txn_id} does not close a committed top-level action")
        if txn.action != self._descriptor(block.id):
            raise InvariantViolation(f"transaction {txn.txn_id} carries a descriptor that differs from action {block.id}")
        if [op.to_dict() for op in txn.ops] != [op.to_dict() for op in self._pending]:
            raise InvariantViolation(f"transaction {txn.txn_id} ops differ from the changes recorded in action {block.id}")
        self.vector_clock.advance(self.id, txn.txn_id.seq)
        block.txn = txn.txn_id
        self._register_txn(txn)
        self._pending = []
        if not self._replaying:
            self._outbox.append(encode(txn))
        logger.debug(f"Replica {self.id} committed {txn.txn_id} ({txn.action.label!r}, {len(txn.ops)} ops)")
        return txn

    def _on_txn_deliver(self, event: dict, at: VersionStamp) -> list[str]:
        txn = Transaction.from_dict(event["txn"])
        if not self.shared or txn.sender == self.id:
            raise InvariantViolation(f"transaction {txn.txn_id} cannot be delivered to replica {self.id}")
        if not self._ready(txn) or at.lamport <= txn.lamport:
            raise InvariantViolation(f"transaction {txn.txn_id} is delivered out of causal order")
        self.vector_clock.advance(txn.sender, txn.txn_id.seq)
        for node, parent in txn.action.walk():
            if node.id in self._blocks:
                raise InvariantViolation(f"action {node.id} is delivered twice")
            self._blocks[node.id] = ActionBlock(
                id=node.id,
                label=node.label,
                kind=node.kind,
                parent=parent,
                started_at=node.started_at,
                opened=node.opened,
                origin_replica=node.id.replica,
                implicit=node.implicit,
                inverse_of=node.inverse_of,
                redo_of=node.redo_of,
                ended_at=node.ended_at,
                closed=node.closed,
                children=[child.id for child in node.children],
                txn=txn.txn_id,
            )
        redeclared: list[str] = []
        for op in txn.ops:
            if isinstance(op, (DeclareSource, DeclareDerived)):
                if self._merge_declaration(op):
                    redeclared.append(op.signal)
            elif isinstance(op, DeclareCheckpoint):
                if op.checkpoint not in self._checkpoints:
                    self._checkpoints[op.checkpoint] = Checkpoint(
                        op.checkpoint, op.label, dict(op.frontier), op.branch, op.wall_time, op.stamp
                    )
            elif isinstance(op, PathEvent):
                if op.event == "create":
                    self._paths.setdefault(op.path, ExplorationPath(op.path, op.label or "", op.stamp, op.wall_time))
                else:
                    self._path(op.path).add_step(op.checkpoint, op.stamp)
        self._register_txn(txn)
        return redeclared

    def _merge_declaration(self, op: DeclareSource | DeclareDerived) -> bool:
        """Fold a remote declaration in; the smallest declaration stamp decides what a name is.

        Returns whether an existing node was replaced by the remote declaration.
        """
        if isinstance(op, DeclareSource):
            kind, deps, compute = SignalKind.source, (), None
        else:
            kind, deps, compute = SignalKind.derived, op.deps, op.compute
        if op.signal not in self.graph:
            if kind is SignalKind.source:
                self.graph.add_source(op.signal, op.stamp, MAIN_BRANCH)
            else:
                self.graph.add_derived(op.signal, deps, compute, op.stamp, MAIN_BRANCH)
            return False
        node = self.graph.node(op.signal)
        if node.kind is kind and node.deps == deps and node.compute == compute:
            self.graph.restamp(op.signal, op.stamp)
            return False
        if node.created < op.stamp:
            logger.warning(f"Replica {self.id} keeps {op.signal!r} from {node.created} over the later declaration {op.stamp}")
            return False
        logger.warning(f"Replica {self.id} redeclares {op.signal!r} as {kind.value} from {op.stamp}, replacing {node.created}")
        self.graph.redeclare(op.signal, kind, deps, compute, op.stamp)
        if kind is SignalKind.source:
            writes = [e for e in self.history.entries(op.signal) if e.origin is SignalKind.source and e.branch == MAIN_BRANCH]
            tip = self._branches[MAIN_BRANCH].tip
            if writes:
                tip[op.signal] = writes[-1]
            else:
                tip.pop(op.signal, None)
        return True

    def _record(self, entry: HistoryEntry) -> bool:
        """Add ``entry`` to the log and its action; return whether it became the current value."""
        block = self.get_action(entry.action)
        branch = self._branch(entry.branch)
        self.history.add(entry)
        block.entries.append(entry.stamp)
        current = branch.tip.get(entry.signal)
        if entry.origin is not self.graph.node(entry.signal).kind:
            replace = False
        elif entry.origin is SignalKind.derived:
            replace = True
        else:
            replace = replication.last_writer_wins(current.stamp if current else None, entry.stamp) is Merge.replace
        if replace:
            branch.tip[entry.signal] = entry
        return replace

    def _register_txn(self, txn: Transaction) -> None:
        self._txns[txn.txn_id] = txn
        bisect.insort(self._shared_log, txn.txn_id, key=lambda txn_id: self._txns[txn_id].stamp)

    # --- lookups ---
    def _branch(self, branch_id: str) -> Branch:
        try:
            return self._branches[branch_id]
        except (KeyError, TypeError):
            raise UnknownBranch(f"unknown branch {branch_id!r}") from None

    def _path(self, path_id: str) -> ExplorationPath:
        try:
            return self._paths[path_id]
        except (KeyError, TypeError):
            raise UnknownPath(f"unknown path {path_id!r}") from None

    def get_checkpoint(self, checkpoint_id: str) -> Checkpoint:
        try:
            return self._checkpoints[checkpoint_id]
        except (KeyError, TypeError):
            raise UnknownCheckpoint(f"unknown checkpoint {checkpoint_id!r}") from None

    def get_action(self, action_id: ActionId) -> ActionBlock:
        try:
            return self._blocks[action_id]
        except (KeyError, TypeError):
            raise UnknownAction(f"unknown action {action_id}") from None

    def _tip(self) -> dict[str, HistoryEntry]:
        return self._branches[self.current_branch].tip

    def _values(self, branch_id: str) -> dict[str, Value]:
        return {signal: entry.value for signal, entry in self._branch(branch_id).tip.items()}

    def _node_here(self, signal: str) -> SignalNode:
        node = self.graph.node(signal)
        if signal not in self._tip():
            raise UnknownSignal(f"signal {signal!r} does not exist on branch {self.current_branch!r}")
        return node

    def _fresh_id(self, prefix: str, taken: Mapping[str, Any]) -> str:
        n = len(taken) + 1
        while f"{prefix}-{self.id}-{n}" in taken:
            n += 1
        return f"{prefix}-{self.id}-{n}"

    def _no_scope(self, operation: str, actions: bool = True) -> None:
        if self._batch is not None:
            raise OpenScope(f"{operation} is not allowed while a batch is open")
        if actions and self._open:
            raise OpenScope(f"{operation} is not allowed while action {self._open[-1]} is open")

    # --- event builders ---
    def _entry_event(self, signal: str, stamp: VersionStamp, value: Value, wall: int, action: ActionId,
                     origin: SignalKind, branch: str, at: VersionStamp) -> dict:
        return {
            "type": "entry",
            "at": str(at),
            "signal": signal,
            "stamp": str(stamp),
            "value": encode_value(value),
            "wall_time": wall,
            "action": str(action),
            "origin": origin.value,
            "branch": branch,
        }

    def _begin(self, label: str, kind: str, wall: int, implicit: bool,
               inverse_of: ActionId | None = None, redo_of: ActionId | None = None) -> ActionId:
        at = self._tick()
        return self._emit({
            "type": "action_begin",
            "at": str(at),
            "action": str(ActionId(self.id, self._action_seq + 1)),
            "label": label,
            "kind": kind,
            "parent": str(self._open[-1]) if self._open else None,
            "implicit": implicit,
            "inverse_of": str(inverse_of) if inverse_of else None,
            "redo_of": str(redo_of) if redo_of else None,
            "wall_time": wall,
        })

    def _end(self, action: ActionId, wall: int) -> ActionBlock:
        entries = [str(stamp) for stamp in self._blocks[action].entries]
        at = self._tick()
        block = self._emit({"type": "action_end", "at": str(at), "action": str(action), "entries": entries, "wall_time": wall})
        if block.top_level and self.shared:
            self.commit_local(block)
        return block

    @contextmanager
    def _scope(self, label: str, kind: str, wall: int) -> Iterator[ActionId]:
        """Innermost open action, or a fresh implicit block around the body."""
        if self._open:
            yield self._open[-1]
            return
        action = self._begin(label, kind, wall, implicit=True)
        yield action
        self._end(action, wall)

    def _plan(self, changed: Iterable[str], overrides: Mapping[str, Value] | None = None,
              extra: Iterable[str] = ()) -> list[tuple[SignalNode, Value]]:
        """Evaluate every derived node affected by ``changed`` once, in propagation order."""
        values = self._values(self.current_branch)
        values.update(overrides or {})
        extra = list(extra)
        present = set(self._tip()) | set(extra)
        nodes = {node.id: node for node in self.graph.affected(changed, present)}
        nodes.update((signal, self.graph.node(signal)) for signal in extra)
        plan = []
        for node in sorted(nodes.values(), key=lambda n: n.order):
            value = self.graph.evaluate(node, values)
            values[node.id] = value
            plan.append((node, value))
        return plan

    def _emit_plan(self, plan: list[tuple[SignalNode, Value]], action: ActionId, wall: int) -> None:
        for node, value in plan:
            stamp = self._tick()
            self._emit(self._entry_event(node.id, stamp, value, wall, action, SignalKind.derived, self.current_branch, stamp))

    # --- signal-core ---
    def _new_signal_name(self, name: str | None) -> str:
        if name is None:
            return self._fresh_id("sig", {node.id: node for node in self.graph.nodes()})
        if not isinstance(name, str) or not name:
            raise InvalidValue(f"signal names are non-empty strings, got {name!r}")
        return name

    def create_source(self, initial: Value, name: str | None = None) -> str:
        value = check_value(initial)
        signal = self._new_signal_name(name)
        if signal in self.graph:
            raise DuplicateName(f"signal {signal!r} is already registered")
        wall = self._now()
        with self._scope(f"declare:{signal}", "declare", wall) as action:
            at = self._tick()
            self._emit({
                "type": "declare_source",
                "at": str(at),
                "signal": signal,
                "initial": encode_value(value),
                "stamp": str(at),
                "action": str(action),
                "branch": self.current_branch,
                "wall_time": wall,
            })
        logger.debug(f"Replica {self.id} declared source {signal!r} = {render_value(value)}")
        return signal

    def create_derived(self, deps: Iterable[str], compute: str | ComputeFn, name: str | None = None) -> str:
        self._no_scope("create_derived", actions=False)
        deps = tuple(deps)
        signal = self._new_signal_name(name)
        self.graph.check_derived(signal, deps)
        for dep in deps:
            self._node_here(dep)
        compute_name = self.registry.ensure(compute)
        probe = SignalNode(signal, SignalKind.derived, deps, compute_name, len(self.graph), VersionStamp(0, self.id), self.current_branch)
        value = self.graph.evaluate(probe, self._values(self.current_branch))
        wall = self._now()
        with self._scope(f"declare:{signal}", "declare", wall) as action:
            at = self._tick()
            self._emit({
                "type": "declare_derived",
                "at": str(at),
                "signal": signal,
                "deps": list(deps),
                "compute": compute_name,
                "stamp": str(at),
                "action": str(action),
                "branch": self.current_branch,
                "wall_time": wall,
            })
            stamp = self._tick()
            self._emit(self._entry_event(signal, stamp, value, wall, action, SignalKind.derived, self.current_branch, stamp))
        logger.debug(f"Replica {self.id} declared derived {signal!r} = {compute_name}({', '.join(deps)})")
        return signal

    def set(self, signal: str, value: Value) -> VersionStamp:
        node = self._node_here(signal)
        if node.kind is SignalKind.derived:
            raise DerivedNotSettable(f"{signal!r} is derived and changes only through propagation")
        value = check_value(value)
        wall = self._now()
        if self._batch is not None:
            action = self._open[-1] if self._open else self._begin("batch", "batch", wall, implicit=True)
            stamp = self._tick()
            self._emit(self._entry_event(signal, stamp, value, wall, action, SignalKind.source, self.current_branch, stamp))
            return stamp
        plan = self._plan([signal], overrides={signal: value})
        with self._scope(f"set:{signal}", "edit", wall) as action:
            stamp = self._tick()
            self._emit(self._entry_event(signal, stamp, value, wall, action, SignalKind.source, self.current_branch, stamp))
            self._emit_plan(plan, action, wall)
        logger.debug(f"Replica {self.id} set {signal!r} = {render_value(value)} at {stamp}")
        return stamp

    def get(self, signal: str) -> Value:
        self._node_here(signal)
        return copy_value(self._tip()[signal].value)

    def signals(self) -> list[str]:
        tip = self._tip()
        return [node.id for node in self.graph.nodes() if node.id in tip]

    def signal_node(self, signal: str) -> SignalNode:
        return self._node_here(signal)

    @contextmanager
    def batch(self) -> Iterator[Replica]:
        """Group sets so each affected derived signal recomputes once, when the batch closes."""
        if self._batch is not None:
            raise NestedBatch("batches do not nest")
        at = self._tick()
        self._emit({"type": "batch", "op": "open", "at": str(at), "wall_time": self._now()})
        try:
            yield self
        finally:
            self._close_batch()

    def _close_batch(self) -> None:
        batch = self._batch
        if len(self._open) > batch["depth"] + (1 if batch["action"] else 0):
            raise OpenScope(f"action {self._open[-1]} begun inside the batch is still open")
        wall = self._now()
        failure = None
        if batch["changed"]:
            if batch["action"] is None and not self._open:
                self._begin("batch", "batch", wall, implicit=True)
            action = batch["action"] or self._open[-1]
            try:
                plan = self._plan(batch["changed"])
            except ComputeFailed as e:
                failure = e
                self._roll_back(batch, action, wall)
            else:
                self._emit_plan(plan, action, wall)
        implicit = batch["action"]
        at = self._tick()
        self._emit({"type": "batch", "op": "close", "at": str(at), "wall_time": wall})
        if implicit is not None:
            self._end(implicit, wall)
        if failure is not None:
            raise failure

    def _roll_back(self, batch: dict, action: ActionId, wall: int) -> None:
        """Write every source the batch touched back to its value from before the batch."""
        logger.warning(f"Replica {self.id} rolls back a batch over {', '.join(batch['before'])}: propagation failed")
        for signal, value in list(batch["before"].items()):
            stamp = self._tick()
            self._emit(self._entry_event(signal, stamp, value, wall, action, SignalKind.source, self.current_branch, stamp))

    # --- history ---
    def history_of(self, signal: str, branch: str | None = None) -> list[HistoryEntry]:
        self.graph.node(signal)
        return self.history.entries(signal, lineage(self._branches, branch or self.current_branch))

    def value_at(self, signal: str, at: VersionStamp | int, branch: str | None = None) -> Value:
        self.graph.node(signal)
        visibility = lineage(self._branches, branch or self.current_branch)
        if isinstance(at, VersionStamp):
            entry = self.history.latest(signal, visibility, at)
        elif isinstance(at, int) and not isinstance(at, bool):
            entry = self.history.latest_by_time(signal, visibility, at)
        else:
            raise InvalidStamp(f"expected a version stamp or wall time in ms, got {at!r}")
        if entry is None:
            raise BeforeFirstEntry(f"{signal!r} has no entry at or before {at}")
        return copy_value(entry.value)

    def checkpoint(self, label: str) -> str:
        self._no_scope("checkpoint")
        wall = self._now()
        checkpoint_id = self._fresh_id("cp", self._checkpoints)
        frontier = {
            signal: str(entry.stamp)
            for signal, entry in self._tip().items()
            if entry.origin is SignalKind.source
        }
        with self._scope(f"checkpoint:{label}", "checkpoint", wall) as action:
            at = self._tick()
            self._emit({
                "type": "checkpoint",
                "at": str(at),
                "checkpoint": checkpoint_id,
                "label": label,
                "frontier": frontier,
                "branch": self.current_branch,
                "action": str(action),
                "wall_time": wall,
            })
        logger.info(f"Replica {self.id} checkpoint {checkpoint_id} {label!r} on {self.current_branch}")
        return checkpoint_id

    def checkpoints(self) -> list[Checkpoint]:
        return sorted(self._checkpoints.values(), key=lambda cp: cp.at)

    def checkpoint_values(self, checkpoint_id: str) -> dict[str, Value]:
        """Source values of the frontier plus every derived signal recomputed from them."""
        checkpoint = self.get_checkpoint(checkpoint_id)
        sources = {signal: self.history.get(stamp).value for signal, stamp in checkpoint.frontier.items()}
        if checkpoint.branch in self._branches:
            visibility = lineage(self._branches, checkpoint.branch)
        else:
            visibility = {checkpoint.branch: None}

        def existed(node: SignalNode) -> bool:
            if node.branch not in visibility or node.created > checkpoint.at:
                return False
            bound = visibility[node.branch]
            return bound is None or node.created <= bound

        values = self.graph.evaluate_all(sources, existed)
        return {signal: copy_value(value) for signal, value in values.items()}

    def diff(self, a: str, b: str) -> list[SignalDiff]:
        before = self.checkpoint_values(a)
        after = self.checkpoint_values(b)
        changed = []
        for signal in sorted(set(before) | set(after)):
            left = before.get(signal, ABSENT)
            right = after.get(signal, ABSENT)
            if left is ABSENT or right is ABSENT or not values_equal(left, right):
                changed.append(SignalDiff(signal, left, right))
        return changed

    def branch_from(self, checkpoint_id: str, label: str) -> str:
        if self.shared:
            raise BranchingNotSupportedInSharedMode("branching is only available on an unshared replica")
        checkpoint = self.get_checkpoint(checkpoint_id)
        self._no_scope("branch_from")
        wall = self._now()
        branch_id = self._fresh_id("br", self._branches)
        at = self._tick()
        self._emit({
            "type": "branch",
            "op": "create",
            "at": str(at),
            "branch": branch_id,
            "label": label,
            "parent": [checkpoint.branch, checkpoint.id],
            "fork_at": str(checkpoint.at),
            "wall_time": wall,
        })
        at = self._tick()
        self._emit({"type": "branch", "op": "switch", "at": str(at), "branch": branch_id, "wall_time": wall})
        logger.info(f"Replica {self.id} branched {branch_id} {label!r} from {checkpoint.id}")
        return branch_id

    def switch_branch(self, branch_id: str) -> None:
        self._branch(branch_id)
        self._no_scope("switch_branch")
        if branch_id == self.current_branch:
            return
        at = self._tick()
        self._emit({"type": "branch", "op": "switch", "at": str(at), "branch": branch_id, "wall_time": self._now()})
        logger.info(f"Replica {self.id} switched to branch {branch_id}")

    def branches(self) -> list[Branch]:
        return list(self._branches.values())

    def restore(self, checkpoint_id: str) -> ActionId:
        """Bring every source signal of the checkpoint back to its value there, as one undoable action."""
        checkpoint = self.get_checkpoint(checkpoint_id)
        self._no_scope("restore")
        tip = self._tip()
        changes = {}
        for signal, stamp in checkpoint.frontier.items():
            value = self.history.get(stamp).value
            if signal in tip and not values_equal(tip[signal].value, value):
                changes[signal] = value
        action = self._restoring_block(f"restore:{checkpoint.label}", "restore", changes, self._now())
        logger.info(f"Replica {self.id} restored {len(changes)} signals from {checkpoint.id}")
        return action

    def create_path(self, label: str) -> str:
        wall = self._now()
        path_id = self._fresh_id("path", self._paths)
        with self._scope(f"path:{label}", "path", wall) as action:
            at = self._tick()
            self._emit({
                "type": "path", "op": "create", "at": str(at), "path": path_id, "label": label,
                "action": str(action), "wall_time": wall,
            })
        return path_id

    def append_step(self, path_id: str, checkpoint_id: str) -> None:
        path = self._path(path_id)
        self.get_checkpoint(checkpoint_id)
        wall = self._now()
        with self._scope(f"path:{path.label}", "path", wall) as action:
            at = self._tick()
            self._emit({
                "type": "path", "op": "append", "at": str(at), "path": path_id, "checkpoint": checkpoint_id,
                "action": str(action), "wall_time": wall,
            })

    def list_paths(self) -> list[ExplorationPath]:
        return sorted(self._paths.values(), key=lambda path: path.created)

    # --- actions ---
    def begin_action(self, label: str, kind: str = "action") -> ActionId:
        if not isinstance(label, str) or not isinstance(kind, str):
            raise InvalidValue("action label and kind are strings")
        return self._begin(label, kind, self._now(), implicit=False)

    def end_action(self, action: ActionId) -> ActionBlock:
        if action not in self._open:
            raise UnknownAction(f"action {action} is not open")
        if self._open[-1] != action:
            raise NotInnermost(f"action {action} is not the innermost open action ({self._open[-1]} is)")
        if self._batch is not None and (self._open.index(action) < self._batch["depth"] or action == self._batch["action"]):
            raise OpenScope(f"close the batch opened inside action {action} first")
        return self._end(action, self._now())

    @contextmanager
    def action(self, label: str, kind: str = "action") -> Iterator[ActionId]:
        action_id = self.begin_action(label, kind)
        try:
            yield action_id
        finally:
            if self._open and self._open[-1] == action_id:
                self.end_action(action_id)

    def actions(
        self,
        kind: str | None = None,
        label: str | None = None,
        since: int | None = None,
        until: int | None = None,
        top_level: bool = False,
        implicit: bool | None = None,
        fuzzy: bool = False,
    ) -> list[ActionBlock]:
        closed = [block for block in self.blocks() if not block.is_open]
        return filter_blocks(closed, kind, label, since, until, top_level, implicit, fuzzy, FUZZY_THRESHOLD)

    def blocks(self) -> list[ActionBlock]:
        """Every block this replica knows, open ones included, in opening order."""
        return sorted(self._blocks.values(), key=lambda b: b.opened)

    @property
    def batch_open(self) -> bool:
        return self._batch is not None

    @property
    def open_actions(self) -> list[ActionId]:
        return list(self._open)

    def _tree_entries(self, action: ActionId) -> list[HistoryEntry]:
        entries = []
        pending = [action]
        while pending:
            block = self._blocks[pending.pop()]
            entries.extend(self.history.get(stamp) for stamp in block.entries)
            pending.extend(block.children)
        return sorted((e for e in entries if e.origin is SignalKind.source), key=lambda e: e.stamp)

    def _settable(self, signal: str) -> bool:
        return self.graph.node(signal).kind is SignalKind.source

    def _ordered(self, changes: Mapping[str, Value]) -> dict[str, Value]:
        return {signal: changes[signal] for signal in sorted(changes, key=lambda s: self.graph.node(s).order)}

    def _restoring_block(self, label: str, kind: str, changes: Mapping[str, Value], wall: int,
                         inverse_of: ActionId | None = None, redo_of: ActionId | None = None) -> ActionId:
        changes = self._ordered(changes)
        plan = self._plan(changes, overrides=changes)
        action = self._begin(label, kind, wall, implicit=False, inverse_of=inverse_of, redo_of=redo_of)
        for signal, value in changes.items():
            stamp = self._tick()
            self._emit(self._entry_event(signal, stamp, value, wall, action, SignalKind.source, self.current_branch, stamp))
        self._emit_plan(plan, action, wall)
        self._end(action, wall)
        return action

    def can_undo(self) -> bool:
        stacks = self._stacks.get(self.current_branch)
        return bool(stacks and stacks.undo)

    def can_redo(self) -> bool:
        stacks = self._stacks.get(self.current_branch)
        return bool(stacks and stacks.redo)

    def undo(self) -> ActionId | None:
        self._no_scope("undo")
        if not self.can_undo():
            return None
        target = self._stacks[self.current_branch].undo[-1]
        block = self._blocks[target]
        entries = self._tree_entries(target)
        tip = self._tip()
        visibility = lineage(self._branches, self.current_branch)
        changes: dict[str, Value] = {}
        if entries:
            first = entries[0].stamp
            for entry in entries:
                if entry.signal in changes or entry.signal not in tip or not self._settable(entry.signal):
                    continue
                before = self.history.latest_before(entry.signal, visibility, first)
                if before is not None:
                    changes[entry.signal] = before.value
        self._restoring_block(f"undo:{block.label}", UNDO_KIND, changes, self._now(), inverse_of=target)
        logger.info(f"Replica {self.id} undid {target} {block.label!r} ({len(changes)} signals restored)")
        return target

    def redo(self) -> ActionId | None:
        self._no_scope("redo")
        if not self.can_redo():
            return None
        target = self._stacks[self.current_branch].redo[-1]
        block = self._blocks[target]
        tip = self._tip()
        changes = {
            entry.signal: entry.value for entry in self._tree_entries(target)
            if entry.signal in tip and self._settable(entry.signal)
        }
        self._restoring_block(f"redo:{block.label}", REDO_KIND, changes, self._now(), redo_of=target)
        logger.info(f"Replica {self.id} redid {target} {block.label!r}")
        return target

    # --- replication ---
    def _descriptor(self, action: ActionId) -> ActionDescriptor:
        block = self._blocks[action]
        return ActionDescriptor(
            id=block.id,
            label=block.label,
            kind=block.kind,
            implicit=block.implicit,
            started_at=block.started_at,
            ended_at=block.ended_at,
            opened=block.opened,
            closed=block.closed,
            inverse_of=block.inverse_of,
            redo_of=block.redo_of,
            children=tuple(self._descriptor(child) for child in block.children),
        )

    def commit_local(self, block: ActionBlock | ActionId) -> Transaction:
        """Transaction of a closed local top-level action; closing one in shared mode commits it."""
        if not self.shared:
            raise NotShared(f"replica {self.id} is not shared")
        block = self.get_action(block.id if isinstance(block, ActionBlock) else block)
        if block.is_open:
            raise OpenScope(f"action {block.id} is still open")
        if block.origin_replica != self.id or not block.top_level:
            raise UnknownAction(f"action {block.id} is not a local top-level action")
        if block.txn is not None:
            return self._txns[block.txn]
        at = self._tick()
        txn = Transaction(
            txn_id=TxnId(self.id, self.vector_clock.get(self.id) + 1),
            lamport=at.lamport,
            deps=self.vector_clock.copy(exclude=self.id),
            ops=tuple(self._pending),
            action=self._descriptor(block.id),
        )
        return self._emit({"type": "txn_commit", "at": str(at), "txn": txn.to_dict()})

    def _ready(self, txn: Transaction) -> bool:
        if txn.txn_id.seq != self.vector_clock.get(txn.sender) + 1:
            return False
        return all(self.vector_clock.get(r) >= seq for r, seq in txn.deps.counters.items() if r != txn.sender)

    def apply_remote(self, txn: Transaction | bytes) -> ApplyResult:
        if isinstance(txn, (bytes, bytearray)):
            txn = decode(txn)
        if not self.shared:
            raise NotShared(f"replica {self.id} is not shared")
        self._no_scope("apply_remote", actions=False)
        if txn.sender == self.id or txn.txn_id.seq <= self.vector_clock.get(txn.sender):
            logger.debug(f"Replica {self.id} dropped duplicate {txn.txn_id}")
            return ApplyResult.duplicate
        if txn.txn_id in self._buffer:
            return ApplyResult.buffered
        if not self._ready(txn):
            self._buffer[txn.txn_id] = txn
            logger.debug(f"Replica {self.id} buffered {txn.txn_id} (clock {self.vector_clock}, deps {txn.deps})")
            return ApplyResult.buffered
        self._deliver(txn)
        self._drain()
        return ApplyResult.applied

    def _deliver(self, txn: Transaction) -> None:
        wall = self._now()
        self.lamport = max(self.lamport, txn.lamport)
        at = self._tick()
        redeclared = self._emit({"type": "txn_deliver", "at": str(at), "txn": txn.to_dict()})
        changed = list(redeclared)
        for op in txn.ops:
            if not isinstance(op, (DeclareSource, SetValue)):
                continue
            value = op.initial if isinstance(op, DeclareSource) else op.value
            replaced = self._emit(
                self._entry_event(op.signal, op.stamp, value, op.wall_time, op.action, SignalKind.source, MAIN_BRANCH, at)
            )
            if replaced and op.signal not in changed:
                changed.append(op.signal)
        tip = self._branches[MAIN_BRANCH].tip
        fresh = [
            node.id for node in self.graph.nodes()
            if node.kind is SignalKind.derived and (node.id not in tip or node.id in redeclared)
        ]
        self._emit_plan(self._plan(changed, extra=fresh), txn.action.id, wall)
        logger.debug(f"Replica {self.id} applied {txn.txn_id} ({txn.action.label!r}, {len(txn.ops)} ops)")

    def _drain(self) -> None:
        progress = True
        while progress:
            progress = False
            for txn_id in sorted(self._buffer):
                txn = self._buffer[txn_id]
                if txn_id.seq <= self.vector_clock.get(txn.sender):
                    del self._buffer[txn_id]
                    continue
                if self._ready(txn):
                    del self._buffer[txn_id]
                    self._deliver(txn)
                    progress = True
                    break

    def buffered_count(self) -> int:
        return len(self._buffer)

    def take_outbox(self) -> list[bytes]:
        outbox, self._outbox = self._outbox, []
        return outbox

    def shared_action_log(self) -> list[tuple[TxnId, ActionDescriptor]]:
        return [(txn_id, self._txns[txn_id].action) for txn_id in self._shared_log]

    def transactions(self) -> list[Transaction]:
        return [self._txns[txn_id] for txn_id in self._shared_log]

    # --- state ---
    def snapshot(self) -> dict:
        nodes = self.graph.nodes()
        return {
            "replica": self.id,
            "shared": self.shared,
            "lamport": self.lamport,
            "current_branch": self.current_branch,
            "signal_order": [node.id for node in nodes],
            "signals": {node.id: node.to_dict() for node in nodes},
            "branches": {branch.id: branch.to_dict() for branch in self._branches.values()},
            "history": [entry.to_dict() for entry in self.history],
            "actions": [block.to_dict() for block in self.blocks()],
            "open_actions": [str(action) for action in self._open],
            "batch": None if self._batch is None else {
                "depth": self._batch["depth"],
                "action": str(self._batch["action"]) if self._batch["action"] else None,
                "changed": list(self._batch["changed"]),
                "before": {signal: encode_value(value) for signal, value in self._batch["before"].items()},
            },
            "undo": {branch: stacks.to_dict() for branch, stacks in sorted(self._stacks.items())},
            "checkpoints": {cp.id: cp.to_dict() for cp in self._checkpoints.values()},
            "paths": {path.id: path.to_dict() for path in self._paths.values()},
            "clock": self.vector_clock.to_dict(),
            "pending": [op.to_dict() for op in self._pending],
            "shared_log": [str(txn_id) for txn_id in self._shared_log],
        }

    def serialize(self) -> bytes:
        return canonical_json(self.snapshot()).encode("utf-8")

    def convergent_state(self) -> dict:
        """The projection every replica agrees on once it has delivered the same transactions."""
        main = self._branches[MAIN_BRANCH].tip
        nodes = self.graph.nodes()
        return {
            "signals": {
                node.id: {"kind": node.kind.value, "deps": list(node.deps), "compute": node.compute, "created": str(node.created)}
                for node in nodes
            },
            "values": {signal: encode_value(entry.value) for signal, entry in sorted(main.items())},
            "histories": {
                node.id: [entry.to_dict() for entry in self.history.entries(node.id) if entry.origin is SignalKind.source]
                for node in nodes
                if node.kind is SignalKind.source
            },
            "checkpoints": {cp.id: cp.to_dict() for cp in self._checkpoints.values()},
            "paths": {path.id: path.to_dict() for path in self._paths.values()},
            "shared_log": [
                {"txn": str(txn_id), "stamp": str(self._txns[txn_id].stamp), "action": self._txns[txn_id].action.to_dict()}
                for txn_id in self._shared_log
            ],
        }
