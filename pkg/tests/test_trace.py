import json

import pytest

from conftest import exchange, make_replica
from trace_signals.errors import (
    InvariantViolation,
    IoFailure,
    MalformedTrace,
    MissingComputeFunction,
    UnknownStamp,
    UnsupportedVersion,
)
from trace_signals.replica import Replica
from trace_signals.signals import default_registry
from trace_signals.stamps import VersionStamp
from trace_signals.trace import (
    dumps_trace,
    loads_trace,
    read_trace,
    replay,
    replay_trace,
    verify_trace,
    write_trace,
)
from trace_signals.values import encode_value
from trace_signals.workloads import demo_session


@pytest.fixture(scope="module")
def demo_text():
    return dumps_trace(demo_session(1).journal)


def test_round_trip_is_byte_identical(demo_text):
    replica = replay(loads_trace(demo_text))
    assert dumps_trace(replica.journal) == demo_text
    assert replica.serialize() == demo_session(1).serialize()


def test_write_and_read(tmp_path):
    original = demo_session(2)
    path = write_trace(original, tmp_path / "nested" / "demo.trace")
    assert path.read_text(encoding="utf-8").endswith("\n")
    assert read_trace(path) == original.journal
    replayed = replay_trace(path)
    assert {s: replayed.get(s) for s in replayed.signals()} == {s: original.get(s) for s in original.signals()}


def test_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        read_trace(tmp_path / "absent.trace")


def test_header_is_required(demo_text):
    events = loads_trace(demo_text)
    with pytest.raises(MalformedTrace) as info:
        loads_trace(dumps_trace(events[1:]))
    assert info.value.line == 1


def test_newer_version_is_rejected():
    header = Replica().header()
    header["version"] = 2
    with pytest.raises(UnsupportedVersion):
        loads_trace(dumps_trace([header]))


def tamper(text, how):
    lines = text.split("\n")[:-1]
    if how == "deleted":
        del lines[3]
    elif how == "swapped":
        lines[3], lines[4] = lines[4], lines[3]
    elif how == "edited":
        lines[5] = lines[5].replace('"wall_time":', '"wall_time":1', 1)
    elif how == "whitespace":
        lines[2] = lines[2].replace(",", ", ", 1)
    elif how == "duplicated":
        lines.insert(4, lines[3])
    elif how == "truncated":
        lines = lines[:-1]
    elif how == "garbage":
        lines.append("garbage")
    elif how == "header":
        lines[0] = lines[0].replace('"replica":1', '"replica":3')
    elif how == "empty":
        return ""
    elif how == "chain":
        record = json.loads(lines[6])
        record["chain"] = "0" * 16 if record["chain"] != "0" * 16 else "1" * 16
        lines[6] = json.dumps(record, sort_keys=True, separators=(",", ":"))
    return "\n".join(lines) + "\n"


@pytest.mark.parametrize(
    "how", ["deleted", "swapped", "edited", "whitespace", "duplicated", "truncated", "garbage", "header", "empty", "chain"]
)
def test_tampering_is_detected(demo_text, tmp_path, how):
    path = tmp_path / "tampered.trace"
    path.write_text(tamper(demo_text, how), encoding="utf-8")
    with pytest.raises(MalformedTrace):
        verify_trace(path)


def test_replay_up_to_a_stamp(demo_text):
    events = loads_trace(demo_text)
    entries = [event for event in events if event["type"] == "entry"]
    middle = entries[len(entries) // 2]["stamp"]
    replica = replay(events, upto=middle)
    assert max(entry.stamp for entry in replica.history) == VersionStamp.parse(middle)
    assert all(entry.stamp <= VersionStamp.parse(middle) for entry in replica.history)
    assert len(replica.history) < len(replay(events).history)
    with pytest.raises(UnknownStamp):
        replay(events, upto="999@9")


def test_replay_up_to_a_stamp_of_a_shared_trace(pair):
    a, b = pair
    a.create_source(1, "x")
    exchange(a, b)
    remote = a.set("x", 5)
    exchange(a, b)
    events = b.journal
    assert b.value_at("x", remote) == 5
    with pytest.raises(UnknownStamp):
        replay(events, upto=remote)
    delivery = max(i for i, event in enumerate(events) if event["type"] == "txn_deliver")
    assert replay(events, upto=events[delivery]["at"]).get("x") == 5
    assert replay(events, upto=events[delivery - 1]["at"]).get("x") == 1


def test_replay_needs_the_compute_functions():
    registry = default_registry.copy()

    @registry.register("double")
    def double(x):
        return 2 * x

    replica = Replica(registry=registry)
    replica.create_source(2, "x")
    replica.create_derived(["x"], "double", "twice")
    replica.set("x", 4)
    events = replica.journal
    with pytest.raises(MissingComputeFunction):
        replay(events)
    assert replay(events, registry).get("twice") == 8


def test_forged_derived_value(tmp_path):
    replica = make_replica()
    replica.create_source(1, "x")
    replica.create_derived(["x"], "sum", "total")
    replica.set("x", 5)
    events = replica.journal
    forged = [e for e in events if e["type"] == "entry" and e["origin"] == "derived"][-1]
    forged["value"] = encode_value(999)
    path = tmp_path / "forged.trace"
    path.write_text(dumps_trace(events), encoding="utf-8")
    with pytest.raises(InvariantViolation):
        verify_trace(path)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_demo_traces_verify(tmp_path, seed):
    path = write_trace(demo_session(seed), tmp_path / f"demo-{seed}.trace")
    report = verify_trace(path)
    assert report.summary().startswith("ok: ")
    assert report.checkpoints >= 4


def test_shared_replica_traces_verify(tmp_path):
    a, b = make_replica(1, shared=True), make_replica(2, shared=True)
    a.create_source(1, "x")
    a.create_derived(["x"], "sum", "total")
    exchange(a, b)
    with b.action("drag"):
        b.set("x", 3)
    a.set("x", 4)
    exchange(a, b)
    for replica in (a, b):
        report = verify_trace(write_trace(replica, tmp_path / f"replica-{replica.id}.trace"))
        assert report.transactions == 4
        assert report.replica.convergent_state() == replica.convergent_state()
