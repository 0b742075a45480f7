import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_replica
from trace_signals.errors import NotInnermost, OpenScope, UnknownAction
from trace_signals.invariants import check_invariants
from trace_signals.stamps import ActionId


def test_action_groups_its_entries(replica):
    replica.create_source({"px": 0, "py": 0}, "pos")
    with replica.action("drag", "transform") as action:
        for step in range(3):
            replica.set("pos", {"px": step, "py": step})
    block = replica.get_action(action)
    assert (block.label, block.kind, block.implicit) == ("drag", "transform", False)
    assert len(block.entries) == 3
    assert block.opened < block.entries[0] and block.entries[-1] < block.closed
    assert all(entry.action == action for entry in replica.history_of("pos")[1:])


def test_lone_set_gets_an_implicit_block(replica):
    replica.create_source(1, "x")
    stamp = replica.set("x", 2)
    block = replica.get_action(replica.history.get(stamp).action)
    assert (block.label, block.kind, block.implicit) == ("set:x", "edit", True)


def test_declarations_get_registry_blocks(replica):
    replica.create_source(1, "x")
    block = replica.get_action(replica.history_of("x")[0].action)
    assert (block.label, block.kind, block.implicit) == ("declare:x", "declare", True)
    assert not replica.can_undo()


def test_nested_actions(replica):
    replica.create_source(0, "x")
    outer = replica.begin_action("draw", "generate")
    inner = replica.begin_action("stroke", "generate")
    replica.set("x", 1)
    with pytest.raises(NotInnermost):
        replica.end_action(outer)
    replica.end_action(inner)
    replica.end_action(outer)
    outer_block = replica.get_action(outer)
    inner_block = replica.get_action(inner)
    assert inner_block.parent == outer and outer_block.children == [inner]
    assert outer_block.opened < inner_block.opened < inner_block.closed < outer_block.closed
    assert [b.id for b in replica.actions(top_level=True, implicit=False)] == [outer]
    assert check_invariants(replica) == []


def test_end_unknown_action(replica):
    with pytest.raises(UnknownAction):
        replica.end_action(ActionId(1, 42))


def test_end_action_with_open_batch(replica):
    replica.create_source(0, "x")
    action = replica.begin_action("resize")
    with replica.batch():
        replica.set("x", 3)
        with pytest.raises(OpenScope):
            replica.end_action(action)
    replica.end_action(action)
    assert replica.get_action(action).closed is not None


def test_filters(replica):
    replica.create_source(0, "x")
    replica.create_source("gray", "color")
    with replica.action("drag", "transform"):
        replica.set("x", 1)
    with replica.action("recolor", "style"):
        replica.set("color", "red")
    assert [b.label for b in replica.actions(kind="style")] == ["recolor"]
    assert replica.actions(label="recolour") == []
    assert [b.label for b in replica.actions(label="recolour", fuzzy=True)] == ["recolor"]
    assert [b.label for b in replica.actions(implicit=True)] == ["declare:x", "declare:color"]
    drag = replica.actions(label="drag")[0]
    assert replica.actions(label="drag", since=drag.started_at + 1) == []
    assert replica.actions(label="drag", until=drag.ended_at) == [drag]


def test_undo_restores_pre_action_values(replica):
    replica.create_source(1, "x")
    replica.create_source(1, "y")
    replica.create_derived(["x", "y"], "sum", "total")
    with replica.action("drag") as drag:
        replica.set("x", 5)
        replica.set("x", 6)
        replica.set("y", 2)
    length = len(replica.history)
    assert replica.undo() == drag
    assert (replica.get("x"), replica.get("y"), replica.get("total")) == (1, 1, 2)
    assert len(replica.history) > length
    undo_block = replica.actions(kind="undo")[0]
    assert undo_block.inverse_of == drag and undo_block.label == "undo:drag"
    assert replica.redo() == drag
    assert (replica.get("x"), replica.get("y"), replica.get("total")) == (6, 2, 8)
    assert replica.actions(kind="redo")[0].redo_of == drag


def test_undo_with_nothing_to_undo(replica):
    replica.create_source(1, "x")
    assert replica.undo() is None
    assert replica.redo() is None


def test_new_action_clears_redo(replica):
    replica.create_source(1, "x")
    replica.set("x", 2)
    replica.undo()
    assert replica.can_redo()
    replica.set("x", 3)
    assert not replica.can_redo()


def test_undo_skips_signals_declared_inside_the_action(replica):
    with replica.action("setup"):
        replica.create_source(1, "x")
        replica.set("x", 2)
    replica.undo()
    assert replica.get("x") == 2


def test_undo_needs_closed_scopes(replica):
    replica.create_source(1, "x")
    replica.set("x", 2)
    with replica.action("drag"):
        with pytest.raises(OpenScope):
            replica.undo()


def run_interleaving(replica, steps, rng):
    """Drive do/undo/redo steps against a model of linear undo; returns the number of checks made."""
    signals = ["a", "b", "c"]
    done, undone = [], []
    checks = 0
    for step in steps:
        length = len(replica.history)
        if step == "do":
            touched = rng.sample(signals, rng.randint(1, 3))
            before = {s: replica.get(s) for s in signals}
            with replica.action("edit-run"):
                for signal in touched:
                    replica.set(signal, rng.randint(0, 9))
            after = {s: replica.get(s) for s in signals}
            done.append((touched, before, after))
            undone.clear()
            assert len(replica.history) > length
        elif step == "undo" and done:
            touched, before, after = done.pop()
            replica.undo()
            assert {s: replica.get(s) for s in touched} == {s: before[s] for s in touched}
            undone.append((touched, before, after))
            assert len(replica.history) > length
            checks += 1
        elif step == "redo" and undone:
            touched, before, after = undone.pop()
            replica.redo()
            assert {s: replica.get(s) for s in touched} == {s: after[s] for s in touched}
            done.append((touched, before, after))
            assert len(replica.history) > length
            checks += 1
        else:
            assert replica.can_undo() == bool(done) and replica.can_redo() == bool(undone)
        assert replica.get("total") == sum(replica.get(s) for s in signals)
    return checks


def fresh_abc():
    replica = make_replica()
    for signal in ("a", "b", "c"):
        replica.create_source(0, signal)
    replica.create_derived(["a", "b", "c"], "sum", "total")
    return replica


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["do", "undo", "redo"]), max_size=30), st.integers(0, 2**32))
def test_random_do_undo_redo(steps, seed):
    replica = fresh_abc()
    run_interleaving(replica, steps, random.Random(seed))
    assert check_invariants(replica) == []


def test_five_hundred_interleavings():
    rng = random.Random(2024)
    for _ in range(500):
        replica = fresh_abc()
        steps = [rng.choice(["do", "do", "undo", "redo"]) for _ in range(12)]
        run_interleaving(replica, steps, rng)
