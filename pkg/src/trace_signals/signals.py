"""Reactive signal graph: source and derived nodes plus glitch-free propagation order.

Derived compute functions live in a ``ComputeRegistry`` and are referenced by
name so traces and remote replicas can rewire the same graph.
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Callable, Container, Iterable, Mapping
from dataclasses import dataclass, replace
from enum import Enum
from graphlib import CycleError, TopologicalSorter

from .errors import ComputeFailed, CycleDetected, DuplicateName, InvalidValue, MissingComputeFunction, UnknownSignal
from .logging_config import logger
from .stamps import VersionStamp
from .values import Value, check_value, copy_value, render_value

ComputeFn = Callable[..., Value]


class SignalKind(str, Enum):
    source = "source"
    derived = "derived"


class ComputeRegistry:
    def __init__(self, functions: Mapping[str, ComputeFn] | None = None):
        self._functions: dict[str, ComputeFn] = dict(functions or {})

    def register(self, name: str | ComputeFn | None = None, fn: ComputeFn | None = None):
        """Register ``fn`` under ``name``; usable as ``@registry.register("sum")`` or bare ``@registry.register``."""
        if fn is None and callable(name):
            fn, name = name, None

        def decorator(f: ComputeFn) -> ComputeFn:
            key = name or f.__name__
            existing = self._functions.get(key)
            if existing is not None and existing is not f:
                raise DuplicateName(f"compute function {key!r} is already registered")
            self._functions[key] = f
            return f

        return decorator(fn) if fn is not None else decorator

    def resolve(self, name: str) -> ComputeFn:
        try:
            return self._functions[name]
        except KeyError:
            raise MissingComputeFunction(f"no compute function registered as {name!r}") from None

    def name_of(self, fn: ComputeFn) -> str | None:
        for key, registered in self._functions.items():
            if registered is fn:
                return key
        return None

    def ensure(self, compute: str | ComputeFn) -> str:
        """Return the registered name for ``compute``, registering a new callable under its ``__name__``."""
        if isinstance(compute, str):
            self.resolve(compute)
            return compute
        name = self.name_of(compute)
        if name is None:
            self.register(compute)
            name = compute.__name__
        return name

    def names(self) -> list[str]:
        return sorted(self._functions)

    def copy(self) -> ComputeRegistry:
        return ComputeRegistry(self._functions)

    def __contains__(self, name: object) -> bool:
        return name in self._functions


default_registry = ComputeRegistry()


def _numbers(values: Iterable[Value]) -> list[int | float]:
    numbers = []
    for value in values:
        if value is None:
            continue
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"expected a number, got {render_value(value)}")
        numbers.append(value)
    return numbers


@default_registry.register("sum")
def compute_sum(*values: Value) -> Value:
    return sum(_numbers(values))


@default_registry.register("concat")
def compute_concat(*values: Value) -> Value:
    return "".join(v if isinstance(v, str) else render_value(v) for v in values)


@default_registry.register("count")
def compute_count(*values: Value) -> Value:
    return sum(len(v) if isinstance(v, (list, dict, str)) else int(v is not None) for v in values)


@default_registry.register("max")
def compute_max(*values: Value) -> Value:
    numbers = _numbers(values)
    return max(numbers) if numbers else None


@default_registry.register("min")
def compute_min(*values: Value) -> Value:
    numbers = _numbers(values)
    return min(numbers) if numbers else None


@dataclass(frozen=True)
class SignalNode:
    id: str
    kind: SignalKind
    deps: tuple[str, ...]
    compute: str | None
    order: int
    created: VersionStamp
    branch: str

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "deps": list(self.deps),
            "compute": self.compute,
            "created": str(self.created),
            "branch": self.branch,
        }


class SignalGraph:
    """Registry of signal nodes; registration order is a topological order of the DAG."""

    def __init__(self, registry: ComputeRegistry):
        self.registry = registry
        self._nodes: dict[str, SignalNode] = {}
        self._dependents: dict[str, list[str]] = {}
        self.recomputations: Counter[str] = Counter()

    def __contains__(self, signal: object) -> bool:
        return signal in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def node(self, signal: str) -> SignalNode:
        try:
            return self._nodes[signal]
        except KeyError:
            raise UnknownSignal(f"unknown signal {signal!r}") from None

    def nodes(self) -> list[SignalNode]:
        return list(self._nodes.values())

    def add_source(self, signal: str, created: VersionStamp, branch: str) -> SignalNode:
        if signal in self._nodes:
            raise DuplicateName(f"signal {signal!r} is already registered")
        node = SignalNode(signal, SignalKind.source, (), None, len(self._nodes), created, branch)
        self._nodes[signal] = node
        self._dependents[signal] = []
        return node

    def check_derived(self, signal: str, deps: Iterable[str]) -> tuple[str, ...]:
        deps = tuple(deps)
        if signal in deps:
            raise CycleDetected(f"derived signal {signal!r} depends on itself")
        if signal in self._nodes:
            raise DuplicateName(f"signal {signal!r} is already registered")
        for dep in deps:
            if dep not in self._nodes:
                raise UnknownSignal(f"unknown dependency {dep!r} for {signal!r}")
        graph = {signal: set(deps)}
        pending = list(deps)
        while pending:
            current = pending.pop()
            if current in graph:
                continue
            graph[current] = set(self._nodes[current].deps)
            pending.extend(graph[current])
        try:
            TopologicalSorter(graph).prepare()
        except CycleError as e:
            raise CycleDetected(f"adding {signal!r} would create a cycle: {e.args[1]}") from e
        return deps

    def add_derived(self, signal: str, deps: Iterable[str], compute: str, created: VersionStamp, branch: str) -> SignalNode:
        deps = self.check_derived(signal, deps)
        self.registry.resolve(compute)
        node = SignalNode(signal, SignalKind.derived, deps, compute, len(self._nodes), created, branch)
        self._nodes[signal] = node
        self._dependents[signal] = []
        for dep in dict.fromkeys(deps):
            self._dependents[dep].append(signal)
        return node

    def restamp(self, signal: str, created: VersionStamp) -> None:
        node = self._nodes[signal]
        if created < node.created:
            self._nodes[signal] = replace(node, created=created)

    def downstream(self, signal: str) -> set[str]:
        seen: set[str] = set()
        pending = [signal]
        while pending:
            for dependent in self._dependents.get(pending.pop(), ()):
                if dependent not in seen:
                    seen.add(dependent)
                    pending.append(dependent)
        return seen

    def redeclare(self, signal: str, kind: SignalKind, deps: Iterable[str], compute: str | None,
                  created: VersionStamp) -> SignalNode:
        """Swap the declaration behind ``signal`` in place; dependents keep pointing at it."""
        old = self.node(signal)
        deps = tuple(deps)
        if kind is SignalKind.derived:
            self.registry.resolve(compute)
            for dep in deps:
                self.node(dep)
            loop = set(deps) & (self.downstream(signal) | {signal})
            if loop:
                raise CycleDetected(f"redeclaring {signal!r} over {sorted(loop)} would create a cycle")
        for dep in dict.fromkeys(old.deps):
            self._dependents[dep].remove(signal)
        for dep in dict.fromkeys(deps):
            self._dependents[dep].append(signal)
        node = SignalNode(signal, kind, deps, compute, old.order, created, old.branch)
        self._nodes[signal] = node
        self._reorder()
        return self._nodes[signal]

    def _reorder(self) -> None:
        """Renumber nodes so every dependency precedes its dependents, keeping prior order otherwise."""
        ordered: list[str] = []
        placed: set[str] = set()

        def place(signal: str) -> None:
            if signal in placed:
                return
            placed.add(signal)
            for dep in self._nodes[signal].deps:
                place(dep)
            ordered.append(signal)

        for node in sorted(self._nodes.values(), key=lambda n: n.order):
            place(node.id)
        self._nodes = {signal: replace(self._nodes[signal], order=i) for i, signal in enumerate(ordered)}

    def affected(self, changed: Iterable[str], present: Container[str]) -> list[SignalNode]:
        """Derived nodes downstream of ``changed``, in propagation order, restricted to ``present``."""
        seen: set[str] = set()
        for signal in changed:
            seen |= self.downstream(signal)
        return sorted((self._nodes[s] for s in seen if s in present), key=lambda n: n.order)

    def evaluate(self, node: SignalNode, values: Mapping[str, Value]) -> Value:
        fn = self.registry.resolve(node.compute)
        try:
            args = [copy_value(values[dep]) for dep in node.deps]
        except KeyError as e:
            raise UnknownSignal(f"dependency {e.args[0]!r} of {node.id!r} has no value on this branch") from None
        self.recomputations[node.id] += 1
        try:
            result = fn(*args)
        except Exception as e:
            logger.debug(f"Compute {node.compute!r} failed for {node.id!r}: {e}")
            raise ComputeFailed(f"{node.compute}() failed for {node.id!r}: {e}") from e
        try:
            return check_value(result)
        except InvalidValue as e:
            raise ComputeFailed(f"{node.compute}() returned an invalid value for {node.id!r}: {e}") from e

    def evaluate_all(self, sources: Mapping[str, Value], include: Callable[[SignalNode], bool]) -> dict[str, Value]:
        """Recompute every included derived node from source values alone (checkpoint views)."""
        values = dict(sources)
        for node in self._nodes.values():
            if node.kind is SignalKind.derived and include(node) and all(dep in values for dep in node.deps):
                values[node.id] = self.evaluate(node, values)
        return values
