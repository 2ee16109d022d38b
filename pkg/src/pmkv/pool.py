"""Emulated persistent-memory pool over an ordinary file.

The pool keeps two byte images: ``working`` (what loads/stores see) and
``durable`` (what survives a crash).  Writes stay volatile until the touched
cache lines are flushed *and* a fence is issued; ``fence`` copies every
pending line from the working image into the durable image.  The backing
file holds the durable image and is rewritten only at create/close/crash
boundaries, so reopening observes exactly what a real power loss would have
preserved.

Each open assigns a fresh randomized mapping base address so that any code
storing absolute addresses durably is forced to translate them on recovery.
"""

from __future__ import annotations

import os
import random
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Optional

from .errors import (
    BadMagic,
    InjectedCrash,
    MisalignedOffset,
    OutOfBounds,
    PoolInvalidated,
    SizeTooSmall,
    VersionMismatch,
)

LINE = 64  # cache-line granularity of flush/fence; fixed, not configurable

MAGIC = b"PMKVPOOL"
VERSION = 1

MIN_POOL_SIZE = 1 << 20
DEFAULT_POOL_SIZE = 256 << 20
DEFAULT_LOG_SIZE = 4 << 20

HEADER_OFFSET = 0
ROOT_OFFSET = 4096
ROOT_RESERVED = 4096
ALLOC_TABLE_OFFSET = ROOT_OFFSET + ROOT_RESERVED
ALLOC_TABLE_RESERVED = 64
LOG_REGION_OFFSET = 12288

# magic 8s | version u32 | pad u32 | pool_size | root | alloc_table | log_off
# | log_size | heap_off, all little-endian u64 past the version word.
_HEADER = struct.Struct("<8sII6Q")


@dataclass(frozen=True)
class PoolHeader:
    pool_size: int
    root_offset: int
    alloc_table_offset: int
    log_region_offset: int
    log_region_size: int
    heap_offset: int

    def pack(self) -> bytes:
        return _HEADER.pack(
            MAGIC,
            VERSION,
            0,
            self.pool_size,
            self.root_offset,
            self.alloc_table_offset,
            self.log_region_offset,
            self.log_region_size,
            self.heap_offset,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "PoolHeader":
        magic, version, _pad, size, root, alloc, log_off, log_size, heap = (
            _HEADER.unpack_from(raw, 0)
        )
        if magic != MAGIC:
            raise BadMagic(f"bad pool magic {magic!r}")
        if version != VERSION:
            raise VersionMismatch(f"pool version {version}, expected {VERSION}")
        hdr = cls(size, root, alloc, log_off, log_size, heap)
        hdr.validate()
        return hdr

    def validate(self) -> None:
        regions = [
            (HEADER_OFFSET, _HEADER.size),
            (self.root_offset, ROOT_RESERVED),
            (self.alloc_table_offset, ALLOC_TABLE_RESERVED),
            (self.log_region_offset, self.log_region_size),
            (self.heap_offset, self.pool_size - self.heap_offset),
        ]
        prev_end = 0
        for off, length in regions:
            if off < prev_end or off + length > self.pool_size or length < 0:
                raise BadMagic("pool header regions overlap or exceed pool size")
            prev_end = off + length


class CrashKind(Enum):
    DROP_ALL_PENDING = "drop-all-pending"
    ADVERSARIAL = "adversarial"


@dataclass(frozen=True)
class CrashPolicy:
    kind: CrashKind = CrashKind.DROP_ALL_PENDING
    rng_seed: int = 0

    @classmethod
    def drop_all(cls) -> "CrashPolicy":
        return cls(CrashKind.DROP_ALL_PENDING)

    @classmethod
    def adversarial(cls, seed: int) -> "CrashPolicy":
        return cls(CrashKind.ADVERSARIAL, seed)


@dataclass(frozen=True)
class DurableSnapshot:
    """The byte image a subsequent open would observe after a crash."""

    image: bytes

    def __len__(self) -> int:
        return len(self.image)


def _default_log_size(pool_size: int) -> int:
    return min(DEFAULT_LOG_SIZE, pool_size // 8)


def _random_base() -> int:
    # 4096-aligned, nonzero, and >= 2**32 so pool offsets (< pool size) can
    # never be mistaken for absolute addresses.
    return random.randrange(1 << 20, 1 << 44) << 12


class Pool:
    """Single-mutator emulated PM pool.

    A Pool may be handed off between threads but must never be accessed by
    two threads concurrently; every higher layer inherits this contract.
    """

    def __init__(
        self,
        header: PoolHeader,
        image: bytes | bytearray,
        path: Optional[str],
        base_address: Optional[int] = None,
        crash_policy: Optional[CrashPolicy] = None,
    ):
        self.header = header
        self.size = header.pool_size
        self.path = path
        self.working = bytearray(image)
        self.durable = bytearray(image)
        self.pending_lines: set[int] = set()
        self.base_address = base_address if base_address is not None else _random_base()
        self.event_counter = 0
        self.flush_count = 0
        self.fence_count = 0
        self.lines_fenced = 0
        self.crash_policy = crash_policy or CrashPolicy.drop_all()
        self._crash_at: Optional[int] = None
        self._event_hook: Optional[Callable[[int], None]] = None
        self._alive = True

    # -- lifecycle -----------------------------------------------------

    @classmethod
    def create(
        cls,
        path: Optional[str],
        size: int = DEFAULT_POOL_SIZE,
        log_size: Optional[int] = None,
        base_address: Optional[int] = None,
        crash_policy: Optional[CrashPolicy] = None,
    ) -> "Pool":
        if size < MIN_POOL_SIZE:
            raise SizeTooSmall(f"pool size {size} below minimum {MIN_POOL_SIZE}")
        log = log_size if log_size is not None else _default_log_size(size)
        header = PoolHeader(
            pool_size=size,
            root_offset=ROOT_OFFSET,
            alloc_table_offset=ALLOC_TABLE_OFFSET,
            log_region_offset=LOG_REGION_OFFSET,
            log_region_size=log,
            heap_offset=LOG_REGION_OFFSET + log,
        )
        header.validate()
        pool = cls(header, bytes(size), path, base_address, crash_policy)
        raw = header.pack()
        pool.store(HEADER_OFFSET, raw)
        pool.flush(HEADER_OFFSET, len(raw))
        pool.fence()
        if path is not None:
            pool._write_file()
        return pool

    @classmethod
    def open(
        cls,
        path: str,
        base_address: Optional[int] = None,
        crash_policy: Optional[CrashPolicy] = None,
    ) -> "Pool":
        with open(path, "rb") as f:
            image = f.read()
        if len(image) < _HEADER.size:
            raise BadMagic("pool file shorter than header")
        header = PoolHeader.unpack(image)
        if header.pool_size != len(image):
            raise BadMagic("pool file length does not match header pool_size")
        return cls(header, image, path, base_address, crash_policy)

    @classmethod
    def from_snapshot(
        cls,
        snapshot: DurableSnapshot,
        base_address: Optional[int] = None,
        crash_policy: Optional[CrashPolicy] = None,
    ) -> "Pool":
        """Reopen from an in-memory crash snapshot, skipping the file."""
        header = PoolHeader.unpack(snapshot.image)
        return cls(header, snapshot.image, None, base_address, crash_policy)

    def close(self) -> None:
        """Persist the durable image to the backing file and invalidate."""
        if not self._alive:
            return
        if self.path is not None:
            self._write_file()
        self._alive = False
        self._release()

    def _release(self) -> None:
        # both images can be tens of MiB; drop them eagerly rather than
        # waiting for cycle collection of the pool/log/allocator graph
        self.working = bytearray()
        self.durable = bytearray()
        self.pending_lines.clear()

    def _write_file(self) -> None:
        tmp = f"{self.path}.tmp"
        with open(tmp, "wb") as f:
            f.write(self.durable)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.path)

    # -- access --------------------------------------------------------

    def _check(self, offset: int, length: int) -> None:
        if not self._alive:
            raise PoolInvalidated("pool was crashed or closed")
        if offset < 0 or length < 0 or offset + length > self.size:
            raise OutOfBounds(f"range [{offset}, {offset + length}) outside pool")

    def store(self, offset: int, data: bytes) -> None:
        self._check(offset, len(data))
        self.working[offset : offset + len(data)] = data

    def load(self, offset: int, length: int) -> bytes:
        self._check(offset, length)
        return bytes(self.working[offset : offset + length])

    def _event(self) -> None:
        # Fires before the event executes: crash "at event k" means events
        # 0..k-1 happened and event k did not.
        if self._event_hook is not None:
            self._event_hook(self.event_counter)
        if self._crash_at is not None and self.event_counter == self._crash_at:
            raise InjectedCrash(self.event_counter)
        self.event_counter += 1

    def flush(self, offset: int, length: int) -> None:
        self._check(offset, length)
        self._event()
        self.flush_count += 1
        if length > 0:
            self.pending_lines.update(range(offset >> 6, (offset + length - 1 >> 6) + 1))

    def fence(self) -> None:
        if not self._alive:
            raise PoolInvalidated("pool was crashed or closed")
        self._event()
        self.fence_count += 1
        w, d = self.working, self.durable
        for line in self.pending_lines:
            off = line << 6
            d[off : off + LINE] = w[off : off + LINE]
        self.lines_fenced += len(self.pending_lines)
        self.pending_lines.clear()

    def durable_store8(self, offset: int, data: bytes) -> None:
        """Store + flush + fence of one 8-byte word; never torn on crash."""
        if offset & 7:
            raise MisalignedOffset(f"offset {offset} not 8-byte aligned")
        if len(data) != 8:
            raise MisalignedOffset("durable_store8 takes exactly 8 bytes")
        self.store(offset, data)
        self.flush(offset, 8)
        self.fence()

    # -- crash machinery -------------------------------------------------

    def schedule_crash(self, event_index: int) -> None:
        """Raise InjectedCrash when event_counter would reach event_index."""
        self._crash_at = event_index

    def set_event_hook(self, hook: Optional[Callable[[int], None]]) -> None:
        self._event_hook = hook

    def post_crash_image(self, policy: Optional[CrashPolicy] = None) -> bytes:
        """Durable bytes after a crash right now, without invalidating.

        Pure function of the event history: DropAllPending keeps exactly the
        durable image; Adversarial independently retains or drops each
        flushed-but-unfenced line, reproducibly from its seed.
        """
        if not self._alive:
            raise PoolInvalidated("pool was crashed or closed")
        policy = policy or self.crash_policy
        image = bytes(self.durable)
        if policy.kind is CrashKind.DROP_ALL_PENDING or not self.pending_lines:
            return image
        rng = random.Random(policy.rng_seed)
        out = bytearray(image)
        for line in sorted(self.pending_lines):
            if rng.getrandbits(1):
                off = line << 6
                out[off : off + LINE] = self.working[off : off + LINE]
        return bytes(out)

    def crash(self, policy: Optional[CrashPolicy] = None) -> DurableSnapshot:
        """Simulate power loss: returns what a subsequent open observes.

        The backing file (if any) is rewritten with the post-crash image and
        the live Pool is invalidated.
        """
        if not self._alive:
            raise PoolInvalidated("pool already crashed or closed")
        image = self.post_crash_image(policy)
        if self.path is not None:
            self.durable = bytearray(image)
            self._write_file()
        self._alive = False
        self._release()
        return DurableSnapshot(image)

    # -- small helpers used by upper layers ------------------------------

    def load_u64(self, offset: int) -> int:
        self._check(offset, 8)
        return int.from_bytes(self.working[offset : offset + 8], "little")

    def store_u64(self, offset: int, value: int) -> None:
        self.store(offset, value.to_bytes(8, "little"))

    def durable_store_u64(self, offset: int, value: int) -> None:
        self.durable_store8(offset, value.to_bytes(8, "little"))


def lines_covering(offset: int, length: int) -> Iterable[int]:
    """Indices of every 64-byte line intersecting [offset, offset+length)."""
    if length <= 0:
        return range(0)
    return range(offset >> 6, ((offset + length - 1) >> 6) + 1)
