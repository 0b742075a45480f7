"""Module invariants checked by ``verify`` and the test suites."""

from __future__ import annotations

from collections import Counter

from .history import MAIN_BRANCH
from .replica import Replica
from .signals import SignalKind
from .values import render_value, values_equal


def check_invariants(replica: Replica) -> list[str]:
    """Return a description of every violated invariant; empty when the replica is sound."""
    problems: list[str] = []
    problems += _graph_problems(replica)
    problems += _history_problems(replica)
    problems += _action_problems(replica)
    problems += _structure_problems(replica)
    return problems


def _graph_problems(replica: Replica) -> list[str]:
    problems = []
    order = {}
    for node in replica.graph.nodes():
        for dep in node.deps:
            if dep not in order:
                problems.append(f"signal {node.id!r} depends on {dep!r} which is not registered before it")
        order[node.id] = node.order
    if replica.batch_open:
        return problems
    for branch in replica.branches():
        values = {signal: entry.value for signal, entry in branch.tip.items()}
        for node in replica.graph.nodes():
            if node.kind is not SignalKind.derived or node.id not in branch.tip:
                continue
            if not all(dep in values for dep in node.deps):
                problems.append(f"derived {node.id!r} on {branch.id} has dependencies missing from that branch")
                continue
            expected = replica.graph.evaluate(node, values)
            if not values_equal(expected, values[node.id]):
                problems.append(
                    f"derived {node.id!r} on {branch.id} holds {render_value(values[node.id])}, "
                    f"its dependencies give {render_value(expected)}"
                )
    return problems


def _history_problems(replica: Replica) -> list[str]:
    problems = []
    for signal in replica.history.signals():
        entries = replica.history.entries(signal)
        for before, after in zip(entries, entries[1:]):
            if not before.stamp < after.stamp:
                problems.append(f"history of {signal!r} is not strictly ordered at {after.stamp}")
        if signal not in replica.graph:
            problems.append(f"history holds entries for unregistered signal {signal!r}")
    return problems


def _action_problems(replica: Replica) -> list[str]:
    problems = []
    owners: Counter = Counter()
    blocks = {block.id: block for block in replica.blocks()}
    for block in blocks.values():
        for stamp in block.entries:
            owners[stamp] += 1
            entry = replica.history.get(stamp)
            if entry is None:
                problems.append(f"action {block.id} references missing entry {stamp}")
                continue
            if entry.action != block.id:
                problems.append(f"entry {stamp} is listed by action {block.id} but names {entry.action}")
            if entry.stamp.replica == block.origin_replica and not block.is_open:
                if not block.opened < entry.stamp < block.closed:
                    problems.append(f"entry {stamp} of action {block.id} lies outside {block.opened}..{block.closed}")
        if block.parent is not None:
            parent = blocks.get(block.parent)
            if parent is None:
                problems.append(f"action {block.id} has unknown parent {block.parent}")
            elif block.id not in parent.children:
                problems.append(f"action {block.id} is missing from its parent's children")
            elif not parent.opened < block.opened:
                problems.append(f"action {block.id} opens before its parent {parent.id}")
            elif block.closed is not None and parent.closed is not None and not block.closed < parent.closed:
                problems.append(f"action {block.id} closes after its parent {parent.id}")
    for entry in replica.history:
        if owners[entry.stamp] != 1:
            problems.append(f"entry {entry.stamp} of {entry.signal!r} belongs to {owners[entry.stamp]} actions")
    return problems


def _structure_problems(replica: Replica) -> list[str]:
    problems = []
    branch_ids = {branch.id for branch in replica.branches()}
    for branch in replica.branches():
        if branch.parent is None and branch.id != MAIN_BRANCH:
            problems.append(f"branch {branch.id} has no parent")
        if branch.parent is not None and branch.parent[0] not in branch_ids:
            problems.append(f"branch {branch.id} forks from unknown branch {branch.parent[0]}")
    for branch in replica.branches():
        seen = {branch.id}
        current = branch
        while current.parent is not None:
            parent_id = current.parent[0]
            if parent_id in seen or parent_id not in branch_ids:
                problems.append(f"branch {branch.id} has a cyclic or broken ancestry")
                break
            seen.add(parent_id)
            current = next(b for b in replica.branches() if b.id == parent_id)
    checkpoint_ids = {cp.id for cp in replica.checkpoints()}
    for checkpoint in replica.checkpoints():
        for signal, stamp in checkpoint.frontier.items():
            entry = replica.history.get(stamp)
            if entry is None or entry.signal != signal:
                problems.append(f"checkpoint {checkpoint.id} frontier {signal}@{stamp} does not resolve")
        if replica.diff(checkpoint.id, checkpoint.id):
            problems.append(f"checkpoint {checkpoint.id} differs from itself")
    for path in replica.list_paths():
        for step in path.steps:
            if step not in checkpoint_ids:
                problems.append(f"path {path.id} steps through unknown checkpoint {step}")
    return problems
