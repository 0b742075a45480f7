"""Deterministic sessions for the ``demo`` and ``simulate`` commands."""

from __future__ import annotations

import itertools
import random
from collections.abc import Callable

from . import config
from .errors import InvalidWorkload
from .history import MAIN_BRANCH
from .netsim import SimConfig, WorkloadStep
from .replica import Replica
from .signals import ComputeRegistry

DEMO_EPOCH_MS = 1_700_000_000_000
DEMO_STEP_MS = 250
COLORS = ("gray", "red", "teal", "amber", "violet")
LABELS = (("drag", "transform"), ("recolor", "style"), ("resize", "transform"), ("type", "edit"), ("generate", "generate"))

UNDO_CHANCE = 0.15
CHECKPOINT_CHANCE = 0.10


def demo_clock(start: int = DEMO_EPOCH_MS, step: int = DEMO_STEP_MS) -> Callable[[], int]:
    """Fake wall clock advancing ``step`` ms per reading."""
    counter = itertools.count(start, step)
    return lambda: next(counter)


def demo_session(
    seed: int,
    actions: int = config.DEMO_ACTIONS,
    replica_id: int = 1,
    registry: ComputeRegistry | None = None,
) -> Replica:
    """Scripted single-replica design session: drags, recolors, nested strokes, checkpoints, undo/redo, a branch and a path."""
    rng = random.Random(seed)
    replica = Replica(replica_id, registry=registry, clock=demo_clock())
    replica.create_source(rng.randint(0, 9), "x")
    replica.create_source(rng.randint(0, 9), "y")
    replica.create_source("gray", "color")
    replica.create_source({"px": 0, "py": 0}, "pos")
    replica.create_derived(["x", "y"], "sum", "total")
    replica.create_derived(["color", "total"], "concat", "caption")

    checkpoints: list[str] = []
    for i in range(actions):
        step = rng.choice(("drag", "recolor", "resize", "draw", "edit"))
        if step == "drag":
            with replica.action("drag", "transform"):
                for _ in range(3):
                    replica.set("pos", {"px": rng.randint(-50, 50), "py": rng.randint(-50, 50)})
        elif step == "recolor":
            with replica.action("recolor", "style"):
                replica.set("color", rng.choice(COLORS))
        elif step == "resize":
            with replica.action("resize", "transform"):
                with replica.batch():
                    replica.set("x", rng.randint(0, 99))
                    replica.set("y", rng.randint(0, 99))
        elif step == "draw":
            with replica.action("draw", "generate"):
                with replica.action("stroke", "generate"):
                    replica.set("pos", {"px": rng.randint(-50, 50), "py": rng.randint(-50, 50)})
                with replica.action("stroke", "generate"):
                    replica.set("color", rng.choice(COLORS))
        else:
            replica.set("x", rng.randint(0, 99))
        if actions >= 4 and i == actions // 2:
            replica.undo()
            replica.redo()
        if i % 3 == 2:
            checkpoints.append(replica.checkpoint(f"v{len(checkpoints) + 1}"))

    if actions >= 4:
        replica.branch_from(checkpoints[0], "alternative")
        with replica.action("explore", "generate"):
            replica.set("color", rng.choice(COLORS))
            replica.set("x", rng.randint(100, 199))
        alternative = replica.checkpoint("alternative")
        replica.switch_branch(MAIN_BRANCH)
        path = replica.create_path("progression")
        for checkpoint in [*checkpoints, alternative]:
            replica.append_step(path, checkpoint)
    return replica


def _declare(names: list[str]) -> Callable[[Replica], None]:
    def script(replica: Replica) -> None:
        for name in names:
            replica.create_source(0, name)
        replica.create_derived(names, "sum", "total")

    return script


def _act(label: str, kind: str, writes: list[tuple[str, int]]) -> Callable[[Replica], None]:
    def script(replica: Replica) -> None:
        with replica.action(label, kind):
            for signal, value in writes:
                replica.set(signal, value)

    return script


def _undo(replica: Replica) -> None:
    replica.undo()


def _checkpoint(label: str) -> Callable[[Replica], None]:
    def script(replica: Replica) -> None:
        replica.checkpoint(label)

    return script


def generate_workload(
    sim_config: SimConfig,
    ops: int,
    signals: int = config.SIM_SIGNALS,
    actions_per_ops: int = config.SIM_ACTIONS_PER_OPS,
) -> list[WorkloadStep]:
    """Random sets grouped into labelled actions, with occasional undos and checkpoints.

    Every replica declares the same sources ``s0..`` and ``total = sum(...)`` at tick 0.
    """
    if ops < 0 or signals < 1 or actions_per_ops < 1:
        raise InvalidWorkload(f"ops must be non-negative, signals and actions_per_ops positive (got {ops}, {signals}, {actions_per_ops})")
    rng = random.Random(sim_config.seed)
    names = [f"s{i}" for i in range(signals)]
    steps = [WorkloadStep(0, r, _declare(names), "declare") for r in range(1, sim_config.replica_count + 1)]
    action_count = -(-ops // actions_per_ops) if ops else 0
    tick = 1
    for n in range(action_count):
        size = ops // action_count + (1 if n < ops % action_count else 0)
        tick += rng.randint(0, 2)
        replica = rng.randint(1, sim_config.replica_count)
        label, kind = rng.choice(LABELS)
        writes = [(rng.choice(names), rng.randint(0, 999)) for _ in range(size)]
        steps.append(WorkloadStep(tick, replica, _act(label, kind, writes), label))
        roll = rng.random()
        if roll < UNDO_CHANCE:
            steps.append(WorkloadStep(tick + rng.randint(1, 3), replica, _undo, "undo"))
        elif roll < UNDO_CHANCE + CHECKPOINT_CHANCE:
            steps.append(WorkloadStep(tick + 1, replica, _checkpoint(f"cp{n}"), "checkpoint"))
    return steps
