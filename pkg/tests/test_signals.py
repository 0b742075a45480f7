from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_replica
from trace_signals.errors import (
    ComputeFailed,
    CycleDetected,
    DerivedNotSettable,
    DuplicateName,
    MissingComputeFunction,
    NestedBatch,
    OpenScope,
    UnknownSignal,
)
from trace_signals.invariants import check_invariants
from trace_signals.signals import ComputeRegistry, SignalKind


def values_of(replica, signal):
    return [entry.value for entry in replica.history_of(signal)]


def test_create_source_and_get(replica):
    assert replica.create_source(1, "x") == "x"
    assert replica.get("x") == 1


def test_duplicate_name(replica):
    replica.create_source(1, "x")
    with pytest.raises(DuplicateName):
        replica.create_source(1, "x")


def test_composite_value_round_trips(replica):
    replica.create_source({"px": 0, "py": 0}, "pos")
    assert replica.get("pos") == {"px": 0, "py": 0}
    replica.get("pos")["px"] = 99
    assert replica.get("pos") == {"px": 0, "py": 0}


def test_generated_names_are_unique(replica):
    first = replica.create_source(0)
    second = replica.create_source(0)
    assert first == "sig-1-1"
    assert second == "sig-1-2"


def test_derived_sum(replica):
    replica.create_source(2, "a")
    replica.create_source(3, "b")
    replica.create_derived(["a", "b"], "sum", "d")
    assert replica.get("d") == 5
    assert replica.signal_node("d").kind is SignalKind.derived
    assert values_of(replica, "d") == [5]


def test_derived_depending_on_itself(replica):
    replica.create_source(1, "a")
    with pytest.raises(CycleDetected):
        replica.create_derived(["a", "d"], "sum", "d")


def test_unknown_dependency(replica):
    with pytest.raises(UnknownSignal):
        replica.create_derived(["nope"], "sum", "d")


def test_unregistered_compute_name(replica):
    replica.create_source(1, "a")
    with pytest.raises(MissingComputeFunction):
        replica.create_derived(["a"], "no-such-function", "d")


def test_failing_compute_registers_nothing(replica):
    replica.create_source("text", "a")
    with pytest.raises(ComputeFailed):
        replica.create_derived(["a"], "sum", "d")
    assert "d" not in replica.graph
    assert replica.signals() == ["a"]


def test_diamond_recomputes_once():
    replica = make_replica()
    calls = Counter()

    def double(v):
        calls["b"] += 1
        return v * 2

    def increment(v):
        calls["c"] += 1
        return v + 1

    def add(b, c):
        calls["d"] += 1
        return b + c

    replica.create_source(1, "a")
    replica.create_derived(["a"], double, "b")
    replica.create_derived(["a"], increment, "c")
    replica.create_derived(["b", "c"], add, "d")
    calls.clear()
    replica.set("a", 5)
    assert calls == Counter({"b": 1, "c": 1, "d": 1})
    assert replica.get("d") == 16
    assert values_of(replica, "d") == [4, 16]


def test_set_appends_history_in_order(replica):
    replica.create_source(1, "x")
    first = replica.set("x", 5)
    second = replica.set("x", 9)
    assert first < second
    assert values_of(replica, "x") == [1, 5, 9]


def test_set_on_derived(replica):
    replica.create_source(1, "a")
    replica.create_derived(["a"], "sum", "d")
    with pytest.raises(DerivedNotSettable):
        replica.set("d", 3)


def test_equal_value_still_recorded(replica):
    replica.create_source(5, "x")
    replica.set("x", 5)
    assert values_of(replica, "x") == [5, 5]


def test_unknown_signal(replica):
    with pytest.raises(UnknownSignal):
        replica.get("ghost")
    with pytest.raises(UnknownSignal):
        replica.set("ghost", 1)


def test_batch_propagates_once(replica):
    replica.create_source(0, "a")
    replica.create_source(0, "b")
    replica.create_derived(["a", "b"], "sum", "d")
    with replica.batch():
        replica.set("a", 1)
        replica.set("b", 2)
        assert replica.batch_open
    assert values_of(replica, "d") == [0, 3]
    assert replica.get("d") == 3
    batch_block = replica.actions(kind="batch")[0]
    assert batch_block.implicit
    assert len(batch_block.entries) == 3


def test_empty_batch_records_nothing(replica):
    replica.create_source(0, "a")
    replica.create_derived(["a"], "sum", "d")
    before = len(replica.history)
    recomputed = replica.graph.recomputations["d"]
    with replica.batch():
        pass
    assert len(replica.history) == before
    assert replica.graph.recomputations["d"] == recomputed
    assert replica.actions(kind="batch") == []


def test_batches_do_not_nest(replica):
    replica.create_source(0, "a")
    with pytest.raises(NestedBatch):
        with replica.batch():
            with replica.batch():
                pass
    assert not replica.batch_open


def test_batch_inside_action_uses_the_action(replica):
    replica.create_source(0, "a")
    replica.create_derived(["a"], "sum", "d")
    with replica.action("resize", "transform") as action:
        with replica.batch():
            replica.set("a", 4)
    block = replica.get_action(action)
    assert len(block.entries) == 2
    assert replica.actions(kind="batch") == []


def test_create_derived_inside_batch(replica):
    replica.create_source(0, "a")
    with replica.batch():
        with pytest.raises(OpenScope):
            replica.create_derived(["a"], "sum", "d")


def test_failed_batch_rolls_back(replica):
    replica.create_source(1, "a")
    replica.create_source(2, "b")
    replica.create_derived(["a", "b"], "sum", "d")
    with pytest.raises(ComputeFailed):
        with replica.batch():
            replica.set("b", 5)
            replica.set("a", "text")
            replica.set("a", "more text")
    assert not replica.batch_open
    assert replica.open_actions == []
    assert (replica.get("a"), replica.get("b"), replica.get("d")) == (1, 2, 3)
    assert values_of(replica, "a") == [1, "text", "more text", 1]
    assert values_of(replica, "b") == [2, 5, 2]
    assert check_invariants(replica) == []

    with replica.batch():
        replica.set("a", 4)
    assert replica.get("d") == 6
    replica.checkpoint("after the failure")
    replica.undo()
    assert replica.get("a") == 1


def test_failed_batch_inside_action(replica):
    replica.create_source(1, "a")
    replica.create_derived(["a"], "sum", "d")
    with pytest.raises(ComputeFailed):
        with replica.action("paste", "edit") as action:
            with replica.batch():
                replica.set("a", [1])
    block = replica.get_action(action)
    assert not block.is_open
    assert [replica.history.get(stamp).value for stamp in block.entries] == [[1], 1]
    assert replica.get("a") == 1
    assert check_invariants(replica) == []


def test_same_calls_give_identical_serialization():
    def session():
        replica = make_replica()
        replica.create_source(1, "x")
        replica.create_source({"px": 0.5}, "pos")
        replica.create_derived(["x"], "sum", "total")
        with replica.batch():
            replica.set("x", 4)
            replica.set("pos", {"px": 1.25})
        replica.set("x", 7)
        return replica.serialize()

    assert session() == session()


def test_registry_decorator_forms():
    registry = ComputeRegistry()

    @registry.register("twice")
    def twice(v):
        return 2 * v

    @registry.register
    def half(v):
        return v / 2

    assert registry.names() == ["half", "twice"]
    assert registry.ensure(twice) == "twice"
    with pytest.raises(DuplicateName):
        registry.register("twice", half)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_batch_recomputes_each_derived_at_most_once(data):
    replica = make_replica()
    calls = Counter()
    sources = [replica.create_source(data.draw(st.integers(-100, 100)), f"s{i}") for i in range(data.draw(st.integers(1, 4)))]
    signals = list(sources)
    for i in range(data.draw(st.integers(1, 6))):
        deps = data.draw(st.lists(st.sampled_from(signals), min_size=1, max_size=3))
        name = f"d{i}"

        def counted(*values, name=name):
            calls[name] += 1
            return sum(values)

        replica.registry.register(name, counted)
        signals.append(replica.create_derived(deps, name, name))
    writes = data.draw(st.lists(st.tuples(st.sampled_from(sources), st.integers(-100, 100)), max_size=6))
    calls.clear()
    with replica.batch():
        for signal, value in writes:
            replica.set(signal, value)
    assert all(count == 1 for count in calls.values())
    assert check_invariants(replica) == []
