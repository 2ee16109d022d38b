"""Exception hierarchy shared across the engine."""


class PmkvError(Exception):
    """Base class for all engine errors."""


class PoolError(PmkvError):
    pass


class SizeTooSmall(PoolError):
    pass


class BadMagic(PoolError):
    pass


class VersionMismatch(PoolError):
    pass


class OutOfBounds(PoolError):
    pass


class MisalignedOffset(PoolError):
    pass


class PoolInvalidated(PoolError):
    """The pool was crashed or closed; no further access is allowed."""


class InjectedCrash(PmkvError):
    """Raised from inside flush/fence when a scheduled crash point fires."""


class TxError(PmkvError):
    pass


class LogRegionFull(TxError):
    pass


class CorruptLog(TxError):
    """Undo-log checksum mismatch on recovery; we fail stop rather than guess."""


class AllocError(PmkvError):
    pass


class OutOfMemory(AllocError):
    pass


class DoubleFree(AllocError):
    pass


class StaleHandle(AllocError):
    pass


class CorruptBitmap(AllocError):
    pass


class StoreError(PmkvError):
    pass


class CorruptPool(StoreError):
    pass


class ModeMismatch(StoreError):
    pass


class KeyTooLarge(StoreError):
    pass


class ValueTooLarge(StoreError):
    pass


class AddressOutOfPool(StoreError):
    pass


class SnapshotRegionOverflow(StoreError):
    pass


class ProtocolError(PmkvError):
    """Malformed wire frame; carries the offending token in args."""
