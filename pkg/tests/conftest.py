import itertools

import pytest

from trace_signals import replication
from trace_signals.replica import Replica
from trace_signals.replication import Merge


def fake_clock(start: int = 1_000_000, step: int = 10):
    counter = itertools.count(start, step)
    return lambda: next(counter)


def make_replica(replica_id: int = 1, shared: bool = False) -> Replica:
    return Replica(replica_id, shared=shared, clock=fake_clock())


def exchange(*replicas: Replica) -> int:
    """Broadcast every outbox until nothing is left in flight; returns the number of deliveries."""
    delivered = 0
    while True:
        batches = [(replica, replica.take_outbox()) for replica in replicas]
        if not any(payloads for _, payloads in batches):
            return delivered
        for sender, payloads in batches:
            for payload in payloads:
                for receiver in replicas:
                    if receiver is not sender:
                        receiver.apply_remote(payload)
                        delivered += 1


@pytest.fixture
def replica():
    return make_replica()


@pytest.fixture
def pair():
    return make_replica(1, shared=True), make_replica(2, shared=True)


@pytest.fixture
def mis_merge(monkeypatch):
    """Every incoming write wins, so the outcome depends on delivery order."""
    monkeypatch.setattr(replication, "last_writer_wins", lambda existing, incoming: Merge.replace)
