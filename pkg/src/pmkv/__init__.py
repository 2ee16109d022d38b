"""Key-value storage engine over an emulated persistent-memory pool."""

from .errors import (
    AllocError,
    InjectedCrash,
    PmkvError,
    PoolError,
    ProtocolError,
    StoreError,
    TxError,
)
from .pool import CrashPolicy, DurableSnapshot, Pool
from .store import (
    Mode,
    RecoveryReport,
    SnapshotPolicy,
    Store,
    StoreConfig,
    Strategy,
    fixup_address,
    hash64,
)
from .txn import UndoLog

__version__ = "0.1.0"

__all__ = [
    "AllocError",
    "CrashPolicy",
    "DurableSnapshot",
    "InjectedCrash",
    "Mode",
    "PmkvError",
    "Pool",
    "PoolError",
    "ProtocolError",
    "RecoveryReport",
    "SnapshotPolicy",
    "Store",
    "StoreConfig",
    "StoreError",
    "Strategy",
    "TxError",
    "UndoLog",
    "fixup_address",
    "hash64",
    "__version__",
]
