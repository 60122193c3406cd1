"""churncomm: fault-tolerant collective communications for unreliable networks.

A lightweight coordinator tracks peer membership and commits every group
state transition through unanimous micro-consensus votes, while peers run
pipelined, abortable ring all-reduce directly over TCP and keep their
shared training state bit-identical via deterministic content hashing.
"""

from .client import (
    AsyncHandle,
    CommError,
    Communicator,
    ConnectError,
    MasterLostError,
    OperationError,
    UsageError,
    connect,
)
from .collective import ReduceOp
from .config import ClientConfig, load_config
from .sharedstate import SharedStateEntry, SyncOutcomeResult, simplehash, simplehash_reference
from .wire import PROTOCOL_VERSION, SyncStrategy

__all__ = [
    "AsyncHandle",
    "ClientConfig",
    "CommError",
    "Communicator",
    "ConnectError",
    "MasterLostError",
    "OperationError",
    "PROTOCOL_VERSION",
    "ReduceOp",
    "SharedStateEntry",
    "SyncOutcomeResult",
    "SyncStrategy",
    "UsageError",
    "connect",
    "load_config",
    "simplehash",
    "simplehash_reference",
]

__version__ = "0.1.0"
