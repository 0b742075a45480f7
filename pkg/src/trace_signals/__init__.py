"""Reactive signals with persistent histories, semantic action blocks and op-based replication."""

from .errors import TraceSignalsError
from .history import ABSENT, MAIN_BRANCH, SignalDiff
from .netsim import Partition, SimConfig, WorkloadStep, assert_converged, exhaustive_delivery_check, run
from .replica import ApplyResult, Replica
from .replication import Transaction, VectorClock, decode, encode
from .signals import ComputeRegistry, default_registry
from .stamps import ActionId, TxnId, VersionStamp
from .trace import read_trace, replay, replay_trace, verify_trace, write_trace

__version__ = "0.1.0"
