class TraceSignalsError(Exception):
    """Base class for every domain error; the CLI maps it to ``exit_code``."""

    exit_code = 1


# --- values and stamps ---
class InvalidValue(TraceSignalsError):
    pass


class InvalidStamp(TraceSignalsError):
    pass


# --- signal-core ---
class UnknownSignal(TraceSignalsError):
    pass


class DuplicateName(TraceSignalsError):
    pass


class CycleDetected(TraceSignalsError):
    pass


class DerivedNotSettable(TraceSignalsError):
    pass


class NestedBatch(TraceSignalsError):
    pass


class ComputeFailed(TraceSignalsError):
    pass


class MissingComputeFunction(TraceSignalsError):
    pass


# --- history ---
class BeforeFirstEntry(TraceSignalsError):
    pass


class UnknownStamp(TraceSignalsError):
    pass


class OpenScope(TraceSignalsError):
    pass


class UnknownCheckpoint(TraceSignalsError):
    pass


class UnknownBranch(TraceSignalsError):
    pass


class BranchingNotSupportedInSharedMode(TraceSignalsError):
    pass


class UnknownPath(TraceSignalsError):
    pass


# --- actions ---
class NotInnermost(TraceSignalsError):
    pass


class UnknownAction(TraceSignalsError):
    pass


# --- replication ---
class NotShared(TraceSignalsError):
    pass


class MalformedTransaction(TraceSignalsError):
    pass


# --- netsim ---
class InvalidWorkload(TraceSignalsError):
    pass


class SimNotDrained(TraceSignalsError):
    pass


class TooManyTransactions(TraceSignalsError):
    pass


# --- trace io ---
class MalformedTrace(TraceSignalsError):
    def __init__(self, reason: str, line: int | None = None):
        self.reason = reason
        self.line = line
        super().__init__(f"line {line}: {reason}" if line is not None else reason)


class UnsupportedVersion(TraceSignalsError):
    pass


class IoFailure(TraceSignalsError):
    pass


class InvariantViolation(TraceSignalsError):
    pass


class InvalidConfig(TraceSignalsError):
    pass
