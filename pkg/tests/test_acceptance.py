"""End-to-end sweeps over randomized sessions, simulated networks and traces."""

import random
from collections import Counter

import pytest

from conftest import exchange, fake_clock, make_replica
from trace_signals.actions import REGISTRY_KINDS
from trace_signals.cli import main
from trace_signals.errors import BeforeFirstEntry
from trace_signals.invariants import check_invariants
from trace_signals.netsim import Partition, SimConfig, assert_converged, exhaustive_delivery_check, run
from trace_signals.replica import Replica
from trace_signals.replication import SetValue
from trace_signals.signals import SignalKind
from trace_signals.stamps import VersionStamp
from trace_signals.trace import dumps_trace, loads_trace, replay, verify_trace, write_trace
from trace_signals.values import canonical_json, decode_value
from trace_signals.workloads import demo_session, generate_workload

SESSION_SEEDS = range(20)
SESSION_OPS = 1_000
SIM_SEEDS = range(50)
SOURCES = ("a", "b", "c", "d")


def random_session(seed):
    """Sets, actions, nested actions and batches; no undo so source histories count sets exactly."""
    rng = random.Random(seed)
    replica = Replica(1, clock=fake_clock())
    for name in SOURCES:
        replica.create_source(0, name)
    replica.create_derived(["a", "b"], "sum", "ab")
    replica.create_derived(["ab", "c"], "sum", "abc")
    replica.create_derived(["abc", "d"], "max", "top")
    sets = Counter()

    def write():
        signal = rng.choice(SOURCES)
        replica.set(signal, rng.randint(-100, 100))
        sets[signal] += 1

    done = 0
    while done < SESSION_OPS:
        shape = rng.choice(("set", "action", "nested", "batch"))
        if shape == "set":
            write()
            done += 1
        elif shape == "action":
            with replica.action(rng.choice(("drag", "resize", "type")), "edit"):
                for _ in range(rng.randint(1, 3)):
                    write()
                    done += 1
        elif shape == "nested":
            with replica.action("draw", "generate"):
                for _ in range(rng.randint(1, 2)):
                    with replica.action("stroke", "generate"):
                        write()
                        done += 1
        else:
            with replica.batch():
                for _ in range(rng.randint(1, 3)):
                    write()
                    done += 1
    return replica, sets


def prefix_oracle(journal, at):
    """Latest value per signal from replaying the journal prefix up to ``at``."""
    values = {}
    for event in journal[1:]:
        if VersionStamp.parse(event["at"]) > at:
            break
        if event["type"] == "declare_source":
            values[event["signal"]] = decode_value(event["initial"])
        elif event["type"] == "entry":
            values[event["signal"]] = decode_value(event["value"])
    return values


@pytest.fixture(scope="module")
def sessions():
    return [random_session(seed) for seed in SESSION_SEEDS]


def test_history_is_complete(sessions):
    for replica, sets in sessions:
        recomputed = Counter(replica.graph.recomputations)
        for node in replica.graph.nodes():
            history = replica.history_of(node.id)
            if node.kind is SignalKind.source:
                assert len(history) == 1 + sets[node.id]
            else:
                assert len(history) == recomputed[node.id]


def test_value_at_matches_prefix_replay(sessions):
    for seed, (replica, _) in zip(SESSION_SEEDS, sessions):
        rng = random.Random(seed)
        journal = replica.journal
        for _ in range(50):
            at = VersionStamp(rng.randint(1, replica.lamport), 1)
            expected = prefix_oracle(journal, at)
            for signal in replica.signals():
                if signal in expected:
                    assert replica.value_at(signal, at) == expected[signal]
                else:
                    with pytest.raises(BeforeFirstEntry):
                        replica.value_at(signal, at)


def test_blocks_partition_the_log(sessions):
    for replica, _ in sessions:
        owners = Counter(stamp for block in replica.blocks() for stamp in block.entries)
        assert sorted(owners) == sorted(entry.stamp for entry in replica.history)
        assert set(owners.values()) == {1}
        for block in replica.blocks():
            assert not block.is_open
            if block.parent is not None:
                parent = replica.get_action(block.parent)
                assert parent.opened < block.opened < block.closed < parent.closed
        assert check_invariants(replica) == []


@pytest.fixture(scope="module")
def sim_reports():
    reports = []
    for seed in SIM_SEEDS:
        sim_config = SimConfig(
            replica_count=3,
            seed=seed,
            duplicate_prob=0.2,
            reorder=True,
            partitions=[Partition.parse("10:25:1")],
        )
        reports.append(run(sim_config, generate_workload(sim_config, 200)))
    return reports


def test_simulations_converge(sim_reports):
    for report in sim_reports:
        converged, detail = assert_converged(report)
        assert converged, f"seed {report.config.seed}: {detail}"
        states = {canonical_json(state) for state in report.states.values()}
        assert len(states) == 1


def test_shared_action_logs_agree(sim_reports):
    for report in sim_reports:
        logs = {
            tuple(
                (d.label, d.kind, d.id.replica, str(report.replicas[r].get_action(d.id).opened), str(txn_id))
                for txn_id, d in report.replicas[r].shared_action_log()
            )
            for r in report.replicas
        }
        assert len(logs) == 1


@pytest.mark.parametrize("seed", SIM_SEEDS[:10])
def test_action_listing_counts_actions_not_ops(sim_reports, tmp_path, capsys, seed):
    report = sim_reports[seed]
    replica = report.replicas[1 + seed % 3]
    path = write_trace(replica, tmp_path / "replica.trace")
    assert main(["actions", "--trace", str(path)]) == 0
    listed = int(capsys.readouterr().out.splitlines()[-1].split()[0])
    committed = [d for _, d in replica.shared_action_log() if not (d.implicit and d.kind in REGISTRY_KINDS)]
    writes = sum(isinstance(op, SetValue) for txn in replica.transactions() for op in txn.ops)
    assert listed == len(committed)
    assert listed < writes


@pytest.mark.parametrize("seed", SIM_SEEDS[:10])
def test_simulation_traces_replay_and_verify(sim_reports, tmp_path, seed):
    for replica_id, replica in sorted(sim_reports[seed].replicas.items()):
        text = dumps_trace(replica.journal)
        assert dumps_trace(replay(loads_trace(text)).journal) == text
        path = tmp_path / f"replica-{replica_id}.trace"
        path.write_text(text, encoding="utf-8")
        assert verify_trace(path).transactions == sim_reports[seed].stats.transactions


@pytest.mark.parametrize("seed", range(1, 6))
def test_demo_traces_replay_and_verify(tmp_path, seed):
    original = demo_session(seed)
    text = dumps_trace(original.journal)
    assert dumps_trace(replay(loads_trace(text)).journal) == text
    assert verify_trace(write_trace(original, tmp_path / "demo.trace")).summary().startswith("ok: ")


@pytest.mark.parametrize("seed", range(10))
def test_concurrent_transactions_commute(seed):
    rng = random.Random(seed)
    replicas = [make_replica(r, shared=True) for r in (1, 2, 3)]
    replicas[0].create_source(0, "x")
    replicas[0].create_source(0, "y")
    replicas[0].create_derived(["x", "y"], "sum", "total")
    exchange(*replicas)
    for _ in range(2):
        writer = rng.choice(replicas)
        with writer.action("edit-run"):
            for signal in rng.sample(["x", "y"], rng.randint(1, 2)):
                writer.set(signal, rng.randint(0, 9))
    txns = [txn for replica in replicas for txn in replica.transactions() if txn.sender == replica.id]
    assert len(txns) <= 5
    assert exhaustive_delivery_check(txns)


@pytest.mark.parametrize("seed", range(5))
def test_five_concurrent_writes_commute_at_every_replica(seed):
    rng = random.Random(seed)
    replicas = [make_replica(r, shared=True) for r in (1, 2, 3)]
    with replicas[0].action("setup", "declare"):
        for name in ("x", "y", "z"):
            replicas[0].create_source(0, name)
        replicas[0].create_derived(["x", "y", "z"], "sum", "total")
    exchange(*replicas)
    writers = [replicas[i % 3] for i in range(5)]
    rng.shuffle(writers)
    for writer in writers:
        writer.set(rng.choice(["x", "y", "z"]), rng.randint(-9, 9))
    setup = replicas[0].transactions()[0]
    writes = [txn for replica in replicas for txn in replica.transactions() if txn.sender == replica.id and txn != setup]
    assert len(writes) == 5
    for txn in writes:
        assert all(txn.deps.get(r) == (1 if r == 1 else 0) for r in (1, 2, 3) if r != txn.sender)
    assert exhaustive_delivery_check([setup] + writes, replicas=replicas)
