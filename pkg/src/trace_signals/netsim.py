"""Deterministic in-process network for shared replicas.

Messages are delayed, duplicated, reordered or held back by partitions, never
lost. Events are processed in (deliver_at, insertion order); all randomness
comes from one ``random.Random(seed)``.
"""

from __future__ import annotations

import copy
import heapq
import itertools
import random
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field

from . import config
from .errors import InvalidWorkload, SimNotDrained, TooManyTransactions, TraceSignalsError
from .logging_config import logger
from .replica import ApplyResult, Replica
from .replication import Transaction, VectorClock, decode
from .signals import ComputeRegistry
from .values import canonical_json

Script = Callable[[Replica], object]

SEED_MIN = -(2**63)
SEED_MAX = 2**64 - 1


@dataclass(frozen=True)
class Partition:
    """Replicas in ``replicas`` cannot exchange messages with the rest during [start, end)."""

    start: int
    end: int
    replicas: frozenset[int]

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise InvalidWorkload(f"partition interval {self.start}..{self.end} is empty or negative")
        if not self.replicas:
            raise InvalidWorkload("a partition isolates at least one replica")

    @classmethod
    def parse(cls, text: str) -> Partition:
        try:
            start, end, members = text.split(":")
            return cls(int(start), int(end), frozenset(int(r) for r in members.split(",") if r.strip()))
        except ValueError as e:
            raise InvalidWorkload(f"partition must look like START:END:R1,R2 ({text!r}): {e}") from e

    def separates(self, a: int, b: int) -> bool:
        return (a in self.replicas) != (b in self.replicas)

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "replicas": sorted(self.replicas)}


@dataclass
class SimConfig:
    replica_count: int = 3
    seed: int = 0
    delay_min: int = config.SIM_DELAY_MIN
    delay_max: int = config.SIM_DELAY_MAX
    duplicate_prob: float = config.SIM_DUPLICATE_PROB
    reorder: bool = config.SIM_REORDER
    partitions: list[Partition] = field(default_factory=list)
    tick_ms: int = config.SIM_TICK_MS
    max_ticks: int = config.SIM_MAX_TICKS

    def validate(self) -> None:
        if self.replica_count < 1:
            raise InvalidWorkload(f"replica_count must be at least 1, got {self.replica_count}")
        if not SEED_MIN <= self.seed <= SEED_MAX:
            raise InvalidWorkload(f"seed {self.seed} is not a 64-bit integer")
        if self.delay_min < 1 or self.delay_max < self.delay_min:
            raise InvalidWorkload(f"delays must satisfy 1 <= min <= max, got {self.delay_min}..{self.delay_max}")
        if not 0.0 <= self.duplicate_prob <= 1.0:
            raise InvalidWorkload(f"duplicate_prob must lie in [0, 1], got {self.duplicate_prob}")
        for partition in self.partitions:
            outside = [r for r in partition.replicas if not 1 <= r <= self.replica_count]
            if outside:
                raise InvalidWorkload(f"partition names unknown replicas {outside}")

    def to_dict(self) -> dict:
        return {
            "replica_count": self.replica_count,
            "seed": self.seed,
            "delay_min": self.delay_min,
            "delay_max": self.delay_max,
            "duplicate_prob": self.duplicate_prob,
            "reorder": self.reorder,
            "partitions": [p.to_dict() for p in self.partitions],
            "tick_ms": self.tick_ms,
        }


@dataclass(frozen=True)
class WorkloadStep:
    tick: int
    replica: int
    script: Script
    label: str = ""


@dataclass(order=True)
class SimEvent:
    deliver_at: int
    seq: int
    sender: int = field(compare=False)
    receiver: int = field(compare=False)
    payload: bytes = field(compare=False, repr=False)
    copy_index: int = field(compare=False, default=0)


@dataclass
class SimStats:
    messages: int = 0
    duplicates: int = 0
    delivered: int = 0
    duplicate_deliveries: int = 0
    buffered: int = 0
    max_buffer_depth: int = 0
    held_by_partition: int = 0
    transactions: int = 0
    ticks: int = 0


@dataclass
class SimReport:
    config: SimConfig
    states: dict[int, dict]
    stats: SimStats
    drained: bool
    replicas: dict[int, Replica] = field(default_factory=dict, repr=False, compare=False)

    @property
    def shared_log_length(self) -> int:
        return max((len(state["shared_log"]) for state in self.states.values()), default=0)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "stats": asdict(self.stats),
            "drained": self.drained,
            "states": {str(replica): state for replica, state in sorted(self.states.items())},
        }

    def to_lines(self) -> list[str]:
        header = {"type": "sim_report", "config": self.config.to_dict(), "stats": asdict(self.stats), "drained": self.drained}
        lines = [canonical_json(header)]
        for replica, state in sorted(self.states.items()):
            lines.append(canonical_json({"type": "replica_state", "replica": replica, "state": state}))
        return lines

    def to_bytes(self) -> bytes:
        return ("\n".join(self.to_lines()) + "\n").encode("utf-8")


class Simulator:
    def __init__(self, sim_config: SimConfig, registry: ComputeRegistry | None = None):
        sim_config.validate()
        self.config = sim_config
        self.rng = random.Random(sim_config.seed)
        self.tick = 0
        self.queue: list[SimEvent] = []
        self.stats = SimStats()
        self._seq = itertools.count()
        self._channel_tail: dict[tuple[int, int], int] = {}
        self.replicas = {
            replica_id: Replica(
                replica_id,
                shared=True,
                registry=registry.copy() if registry is not None else None,
                clock=self._wall_time,
            )
            for replica_id in range(1, sim_config.replica_count + 1)
        }

    def _wall_time(self) -> int:
        return self.tick * self.config.tick_ms

    def _hold(self, sender: int, receiver: int, sent: int, deliver_at: int) -> int:
        """Push delivery past every partition the message would cross while in flight."""
        moved = True
        while moved:
            moved = False
            for partition in self.config.partitions:
                if partition.separates(sender, receiver) and sent < partition.end and deliver_at >= partition.start:
                    if deliver_at < partition.end:
                        deliver_at = partition.end
                        self.stats.held_by_partition += 1
                        moved = True
        return deliver_at

    def broadcast(self, sender: int, payloads: Iterable[bytes]) -> None:
        for payload in payloads:
            self.stats.transactions += 1
            for receiver in sorted(self.replicas):
                if receiver == sender:
                    continue
                copies = 2 if self.rng.random() < self.config.duplicate_prob else 1
                for copy_index in range(copies):
                    delay = self.rng.randint(self.config.delay_min, self.config.delay_max)
                    deliver_at = self._hold(sender, receiver, self.tick, self.tick + delay)
                    if not self.config.reorder:
                        deliver_at = max(deliver_at, self._channel_tail.get((sender, receiver), 0))
                        self._channel_tail[(sender, receiver)] = deliver_at
                    heapq.heappush(self.queue, SimEvent(deliver_at, next(self._seq), sender, receiver, payload, copy_index))
                    self.stats.messages += 1
                    if copy_index:
                        self.stats.duplicates += 1

    def deliver(self, event: SimEvent) -> ApplyResult:
        replica = self.replicas[event.receiver]
        result = replica.apply_remote(event.payload)
        self.stats.delivered += 1
        if result is ApplyResult.duplicate:
            self.stats.duplicate_deliveries += 1
        elif result is ApplyResult.buffered:
            self.stats.buffered += 1
        self.stats.max_buffer_depth = max(self.stats.max_buffer_depth, replica.buffered_count())
        return result

    def _check(self, workload: Sequence[WorkloadStep]) -> list[WorkloadStep]:
        for step in workload:
            if step.replica not in self.replicas:
                raise InvalidWorkload(f"workload step {step.label!r} names unknown replica {step.replica}")
            if not isinstance(step.tick, int) or step.tick < 0:
                raise InvalidWorkload(f"workload step {step.label!r} has bad tick {step.tick!r}")
            if not callable(step.script):
                raise InvalidWorkload(f"workload step {step.label!r} has no script")
        return [step for _, step in sorted(enumerate(workload), key=lambda pair: (pair[1].tick, pair[0]))]

    def run(self, workload: Sequence[WorkloadStep]) -> SimReport:
        steps = self._check(workload)
        logger.info(f"Simulation started: {self.config.replica_count} replicas, seed {self.config.seed}, {len(steps)} steps")
        index = 0
        while index < len(steps) or self.queue:
            upcoming = [steps[index].tick] if index < len(steps) else []
            if self.queue:
                upcoming.append(self.queue[0].deliver_at)
            self.tick = min(upcoming)
            if self.tick > self.config.max_ticks:
                logger.warning(f"Simulation stopped at tick {self.tick} (max_ticks {self.config.max_ticks})")
                break
            while self.queue and self.queue[0].deliver_at == self.tick:
                self.deliver(heapq.heappop(self.queue))
            while index < len(steps) and steps[index].tick == self.tick:
                step = steps[index]
                index += 1
                replica = self.replicas[step.replica]
                try:
                    step.script(replica)
                except TraceSignalsError as e:
                    raise InvalidWorkload(f"step {step.label!r} at tick {step.tick} on replica {step.replica} failed: {e}") from e
                self.broadcast(step.replica, replica.take_outbox())
        self.stats.ticks = self.tick
        drained = index == len(steps) and not self.queue and all(r.buffered_count() == 0 for r in self.replicas.values())
        report = SimReport(
            config=self.config,
            states={replica_id: replica.convergent_state() for replica_id, replica in self.replicas.items()},
            stats=self.stats,
            drained=drained,
            replicas=self.replicas,
        )
        logger.info(
            f"Simulation finished at tick {self.tick}: {self.stats.messages} messages, "
            f"{self.stats.duplicates} duplicates, max buffer depth {self.stats.max_buffer_depth}, drained={drained}"
        )
        return report


def run(sim_config: SimConfig, workload: Sequence[WorkloadStep], registry: ComputeRegistry | None = None) -> SimReport:
    return Simulator(sim_config, registry).run(workload)


def _first_difference(a: dict, b: dict) -> str | None:
    for signal in sorted(set(a["signals"]) | set(b["signals"])):
        if a["signals"].get(signal) != b["signals"].get(signal):
            return f"signal {signal!r} is declared differently"
    for signal in sorted(set(a["values"]) | set(b["values"])):
        left, right = a["values"].get(signal), b["values"].get(signal)
        if left != right:
            return f"signal {signal!r} has value {canonical_json(left)} vs {canonical_json(right)}"
    for signal in sorted(set(a["histories"]) | set(b["histories"])):
        left, right = a["histories"].get(signal, []), b["histories"].get(signal, [])
        if left != right:
            position = next((i for i, (x, y) in enumerate(zip(left, right)) if x != y), min(len(left), len(right)))
            return f"history of {signal!r} differs at position {position}"
    left, right = a["shared_log"], b["shared_log"]
    if left != right:
        position = next((i for i, (x, y) in enumerate(zip(left, right)) if x != y), min(len(left), len(right)))
        return f"shared action log differs at position {position}"
    for key in ("checkpoints", "paths"):
        for item in sorted(set(a[key]) | set(b[key])):
            if a[key].get(item) != b[key].get(item):
                return f"{key[:-1]} {item!r} differs"
    return None


def assert_converged(report: SimReport) -> tuple[bool, str]:
    """Compare every replica's convergent state with the lowest replica id's."""
    if not report.drained:
        raise SimNotDrained("the simulation still has undelivered or buffered messages")
    ids = sorted(report.states)
    base = ids[0]
    for other in ids[1:]:
        difference = _first_difference(report.states[base], report.states[other])
        if difference is not None:
            return False, f"replicas {base} and {other} diverge: {difference}"
    state = report.states[base]
    return True, f"{len(ids)} replicas converged on {len(state['values'])} signals and {len(state['shared_log'])} shared actions"


def _causally_legal(order: Sequence[Transaction]) -> bool:
    clock = VectorClock()
    for txn in order:
        if txn.txn_id.seq != clock.get(txn.sender) + 1:
            return False
        if any(clock.get(r) < seq for r, seq in txn.deps.counters.items()):
            return False
        clock.advance(txn.sender, txn.txn_id.seq)
    return True


def exhaustive_delivery_check(
    transactions: Sequence[Transaction | bytes],
    registry: ComputeRegistry | None = None,
    max_transactions: int = config.EXHAUSTIVE_MAX_TRANSACTIONS,
    replicas: Sequence[Replica] = (),
) -> bool:
    """Deliver every causally legal permutation and compare the end states.

    Each order goes to a fresh observer replica and to a copy of every replica in
    ``replicas``, which skips its own transactions and drops the ones it already holds.
    """
    txns = [decode(t) if isinstance(t, (bytes, bytearray)) else t for t in transactions]
    if len(txns) > max_transactions:
        raise TooManyTransactions(f"{len(txns)} transactions exceed the exhaustive limit of {max_transactions}")
    observer = max([txn.sender for txn in txns] + [replica.id for replica in replicas], default=0) + 1
    reference = None
    orders = 0
    for order in itertools.permutations(txns):
        if not _causally_legal(order):
            continue
        targets = [Replica(observer, shared=True, registry=registry.copy() if registry is not None else None, clock=lambda: 0)]
        targets += [copy.deepcopy(replica) for replica in replicas]
        orders += 1
        for target in targets:
            for txn in order:
                if txn.sender != target.id:
                    target.apply_remote(txn)
            state = canonical_json(target.convergent_state())
            if reference is None:
                reference = state
            elif state != reference:
                logger.warning(
                    f"Delivery order {[str(t.txn_id) for t in order]} ends in a different state at replica {target.id}"
                )
                return False
    if txns and orders == 0:
        raise InvalidWorkload("no causally legal delivery order exists; a dependency is missing from the set")
    logger.info(f"{orders} causally legal delivery orders of {len(txns)} transactions agree")
    return True
