"""The key-value engine: three persistence modes over two allocators.

FullyPersistent keeps both the hash table and the records durable.  Table
buckets and entry fields hold absolute addresses (base + offset as mapped at
write time), so reopening at a new base requires a fixup pass that rewrites
every stored address with ``new = old - old_base + new_base`` before the
table is usable.

Hybrid keeps only the records durable.  Every KeyRecord carries the pool
offset of its ValueRecord, making records self-describing; recovery
enumerates them (typed allocation list, or slab walk plus reinsert) and
rebuilds a volatile table from scratch.

SnapshotBaseline keeps everything volatile and periodically serializes the
whole map into one of two pool regions, publishing it with a single atomic
selector store.  Anything acked after the last published snapshot is lost on
crash; it exists to be measured against, not to win.
"""

from __future__ import annotations

import hashlib
import random
import struct
import time
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Optional

from .alloc import HDR_SIZE, ObjAllocator, ObjHandle, SlabAllocator
from .errors import (
    AddressOutOfPool,
    CorruptPool,
    InjectedCrash,
    KeyTooLarge,
    ModeMismatch,
    PoolInvalidated,
    SnapshotRegionOverflow,
    ValueTooLarge,
)
from .pool import Pool
from .txn import UndoLog

MAX_KEY = 64 << 10
MAX_VALUE = 1 << 20

INITIAL_BUCKETS = 16
ARENA_SLACK = 1.5  # entry slots per bucket in a fresh arena

TN_KEY = 1
TN_VALUE = 2
TN_TABLE = 4
TN_ARENA = 5


class Mode(IntEnum):
    FULLY_PERSISTENT = 1
    HYBRID = 2
    SNAPSHOT = 3


class Strategy(IntEnum):
    PER_OBJECT = 1
    SLAB = 2


def hash64(key: bytes, seed: int) -> int:
    h = hashlib.blake2b(key, digest_size=8, key=seed.to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def fixup_address(old_addr: int, old_base: int, new_base: int, pool_size: int) -> int:
    if old_addr < old_base or old_addr - old_base >= pool_size:
        raise AddressOutOfPool(
            f"address {old_addr:#x} not within pool mapped at {old_base:#x}"
        )
    return old_addr - old_base + new_base


# -- durable record layouts ----------------------------------------------------

# KeyRecord payload: klen u32 | val_len_hint u32 | val_record_offset u64 | key
_KEYREC = struct.Struct("<IIQ")
# ValueRecord payload: vlen u32 | bytes
_VALREC = struct.Struct("<I")
# slab item chunk: klen u32 | vlen u32 | key | value
_ITEM = struct.Struct("<II")

# durable Entry (FullyPersistent): key_addr u64 | val_addr u64 | next_addr u64
_ENTRY = struct.Struct("<QQQ")
ENTRY_SIZE = _ENTRY.size


@dataclass
class RecoveryReport:
    mode: str
    strategy: str
    keys_recovered: int = 0
    rolled_back: bool = False
    elapsed_s: float = 0.0
    phase1_s: float = 0.0
    phase2_s: float = 0.0
    volatile_entries_built: int = 0


@dataclass
class SnapshotPolicy:
    period_s: Optional[float] = 3.0
    every_mods: Optional[int] = None


@dataclass
class StoreConfig:
    path: Optional[str] = None
    mode: Mode = Mode.HYBRID
    strategy: Strategy = Strategy.PER_OBJECT
    tx_batch: int = 1
    snapshot_policy: SnapshotPolicy = field(default_factory=SnapshotPolicy)
    pool_size: int = 256 << 20
    base_address: Optional[int] = None
    hash_seed: Optional[int] = None  # None draws a fresh seed at format time


# root record, one field per 8-byte slot so every durable update is atomic
_ROOT = {
    "tags": 0,  # mode u32 | strategy u32
    "hash_seed": 8,
    "ht_base_addr": 16,
    "ht_len": 24,
    "ht0_entries_addr": 32,
    "ht1_entries_addr": 40,
    "old_base_address": 48,
    "fixup_base": 56,
    "kv_count": 64,
    "snap_word": 72,  # bit 0: region selector; bits 1..: generation
}


class Root:
    """Typed accessors over the fixed root record slots."""

    def __init__(self, pool: Pool):
        self.pool = pool
        self.base = pool.header.root_offset

    def offset_of(self, name: str) -> int:
        return self.base + _ROOT[name]

    def load(self, name: str) -> int:
        return self.pool.load_u64(self.offset_of(name))

    def store_atomic(self, name: str, value: int) -> None:
        self.pool.durable_store_u64(self.offset_of(name), value)

    def store_tx(self, log: UndoLog, name: str, value: int) -> None:
        log.store_u64(self.offset_of(name), value)

    @property
    def mode(self) -> int:
        return self.load("tags") & 0xFFFFFFFF

    @property
    def strategy(self) -> int:
        return (self.load("tags") >> 32) & 0xFFFFFFFF

    def set_tags(self, mode: Mode, strategy: Strategy) -> None:
        self.store_atomic("tags", (int(strategy) << 32) | int(mode))


class VolatileEntry:
    __slots__ = ("hash", "key", "key_loc", "val_loc", "next")

    def __init__(self, h, key, key_loc, val_loc, nxt):
        self.hash = h
        self.key = key
        self.key_loc = key_loc  # KeyRecord payload offset, or item chunk offset
        self.val_loc = val_loc  # ValueRecord payload offset (PerObject only)
        self.next = nxt


class VolatileTable:
    """Chained power-of-two table; mirrors the durable resize policy so the
    two modes produce comparable reorganization behavior."""

    def __init__(self, nbuckets: int = INITIAL_BUCKETS):
        self.buckets: list[Optional[VolatileEntry]] = [None] * nbuckets
        self.mask = nbuckets - 1
        self.used = 0

    @classmethod
    def sized_for(cls, n: int) -> "VolatileTable":
        """Bulk-load constructor: large enough that n inserts never resize."""
        size = INITIAL_BUCKETS
        while size <= n:
            size *= 2
        return cls(size)

    def find(self, h: int, key: bytes) -> Optional[VolatileEntry]:
        e = self.buckets[h & self.mask]
        while e is not None:
            if e.hash == h and e.key == key:
                return e
            e = e.next
        return None

    def insert(self, entry: VolatileEntry) -> None:
        i = entry.hash & self.mask
        entry.next = self.buckets[i]
        self.buckets[i] = entry
        self.used += 1

    def remove(self, h: int, key: bytes) -> Optional[VolatileEntry]:
        i = h & self.mask
        e = self.buckets[i]
        prev = None
        while e is not None:
            if e.hash == h and e.key == key:
                if prev is None:
                    self.buckets[i] = e.next
                else:
                    prev.next = e.next
                self.used -= 1
                return e
            prev, e = e, e.next
        return None

    def maybe_resize(self) -> bool:
        if self.used < len(self.buckets):
            return False
        new = [None] * (len(self.buckets) * 2)
        mask = len(new) - 1
        for head in self.buckets:
            e = head
            while e is not None:
                nxt = e.next
                i = e.hash & mask
                e.next = new[i]
                new[i] = e
                e = nxt
        self.buckets = new
        self.mask = mask
        return True

    def __iter__(self) -> Iterator[VolatileEntry]:
        for head in self.buckets:
            e = head
            while e is not None:
                yield e
                e = e.next


class Store:
    """Single-threaded key-value store over one pool."""

    def __init__(self, pool: Pool, config: StoreConfig, fresh: bool):
        self.pool = pool
        self.config = config
        self.mode = config.mode
        self.strategy = config.strategy
        self.log = UndoLog(pool)
        self.root = Root(pool)
        self.table: Optional[VolatileTable] = None
        self.map: Optional[dict[bytes, bytes]] = None
        self.count = 0
        self.committed_ops = 0
        self.resizes = 0
        self.report: Optional[RecoveryReport] = None
        self._batch_ops = 0
        self._mods_since_snapshot = 0
        self._last_snapshot_time: Optional[float] = None
        self.snapshots_written = 0
        self._snap_regions = self._snapshot_geometry()
        if fresh:
            self._build_allocators()
            self._format()
        else:
            rolled_back = self.log.recover()
            self._build_allocators()
            self._recover(rolled_back)

    # -- construction ------------------------------------------------------

    @classmethod
    def create(cls, config: StoreConfig) -> "Store":
        pool = Pool.create(config.path, config.pool_size, base_address=config.base_address)
        return cls(pool, config, fresh=True)

    @classmethod
    def open(cls, config: StoreConfig) -> "Store":
        pool = Pool.open(config.path, base_address=config.base_address)
        return cls(pool, config, fresh=False)

    @classmethod
    def attach(cls, pool: Pool, config: StoreConfig) -> "Store":
        """Adopt an already-opened pool (post-crash snapshots in tests)."""
        return cls(pool, config, fresh=False)

    def _build_allocators(self) -> None:
        self.objs = ObjAllocator(self.pool, self.log)
        uses_slab = self.strategy == Strategy.SLAB and self.mode != Mode.SNAPSHOT
        self.slab = SlabAllocator(self.pool, self.log, self.objs) if uses_slab else None

    def _format(self) -> None:
        root = self.root
        root.set_tags(self.mode, self.strategy)
        seed = self.config.hash_seed
        if seed is None:
            seed = random.getrandbits(64)
        root.store_atomic("hash_seed", seed)
        root.store_atomic("old_base_address", self.pool.base_address)
        self.hash_seed = root.load("hash_seed")
        if self.mode == Mode.FULLY_PERSISTENT:
            with self.log.transaction():
                table_addr, arena_addr = self._alloc_table_and_arena(INITIAL_BUCKETS)
                root.store_tx(self.log, "ht_base_addr", table_addr)
                root.store_tx(self.log, "ht_len", INITIAL_BUCKETS)
                root.store_tx(self.log, "ht0_entries_addr", arena_addr)
        elif self.mode == Mode.HYBRID:
            self.table = VolatileTable()
        else:
            self.map = {}
        self.report = RecoveryReport(self.mode.name, self.strategy.name)

    def _recover(self, rolled_back: bool) -> None:
        t0 = time.perf_counter()
        root = self.root
        if root.mode == 0:
            raise CorruptPool("root record has no mode tag")
        if root.mode != self.mode or (
            self.mode != Mode.SNAPSHOT and root.strategy != self.strategy
        ):
            raise ModeMismatch(
                f"pool created as mode={root.mode} strategy={root.strategy}, "
                f"opened as mode={int(self.mode)} strategy={int(self.strategy)}"
            )
        self.hash_seed = root.load("hash_seed")
        if self.mode == Mode.FULLY_PERSISTENT:
            report = self._recover_fully_persistent()
        elif self.mode == Mode.HYBRID:
            report = self._recover_hybrid()
        else:
            report = self._recover_snapshot()
        report.rolled_back = rolled_back
        report.elapsed_s = time.perf_counter() - t0
        self.report = report

    # -- address translation (FullyPersistent) ----------------------------

    def _abs(self, offset: int) -> int:
        return offset + self.pool.base_address

    def _rel(self, addr: int) -> int:
        off = addr - self.pool.base_address
        if off < 0 or off >= self.pool.size:
            raise AddressOutOfPool(f"address {addr:#x} outside current mapping")
        return off

    # -- durable table plumbing (FullyPersistent) --------------------------

    def _alloc_table_and_arena(self, nbuckets: int) -> tuple[int, int]:
        """Returns absolute addresses of a zeroed bucket array and a fresh
        entry arena sized for it.  Caller is inside a transaction."""
        table = self.objs.alloc(nbuckets * 8, TN_TABLE)
        zeros = b"\x00" * 4096
        off = table.offset
        remaining = nbuckets * 8
        while remaining > 0:
            n = min(remaining, 4096)
            self.log.store_raw(off, zeros[:n])
            off += n
            remaining -= n
        slots = max(INITIAL_BUCKETS, int(nbuckets * ARENA_SLACK))
        arena = self.objs.alloc(8 + slots * ENTRY_SIZE, TN_ARENA)
        self.log.store_raw(arena.offset, (0).to_bytes(8, "little"))
        return self._abs(table.offset), self._abs(arena.offset)

    def _arena_bump(self, arena_off: int) -> int:
        """Carve one entry slot; returns its pool offset, or 0 when full."""
        cursor = self.pool.load_u64(arena_off)
        if 8 + (cursor + 1) * ENTRY_SIZE > self._obj_size(arena_off):
            return 0
        self.log.store_u64(arena_off, cursor + 1)
        return arena_off + 8 + cursor * ENTRY_SIZE

    def _obj_size(self, payload_off: int) -> int:
        return int.from_bytes(self.pool.load(payload_off - HDR_SIZE, 8), "little")

    def _bucket_off(self, index: int) -> int:
        return self._rel(self.root.load("ht_base_addr")) + index * 8

    def _load_entry(self, entry_off: int) -> tuple[int, int, int]:
        return _ENTRY.unpack(self.pool.load(entry_off, ENTRY_SIZE))

    # -- record plumbing ----------------------------------------------------

    def _check_sizes(self, key: bytes, value: bytes) -> None:
        if not key or len(key) > MAX_KEY:
            raise KeyTooLarge(f"key length {len(key)} outside 1..{MAX_KEY}")
        if len(value) > MAX_VALUE:
            raise ValueTooLarge(f"value length {len(value)} exceeds {MAX_VALUE}")

    def _write_value_record(self, value: bytes) -> int:
        h = self.objs.alloc(_VALREC.size + len(value), TN_VALUE)
        self.log.store_raw(h.offset, _VALREC.pack(len(value)) + value)
        return h.offset

    def _write_key_record(self, key: bytes, val_off: int, vlen: int) -> int:
        h = self.objs.alloc(_KEYREC.size + len(key), TN_KEY)
        self.log.store_raw(h.offset, _KEYREC.pack(len(key), vlen, val_off) + key)
        return h.offset

    def _read_key_record(self, off: int) -> tuple[bytes, int, int]:
        klen, vhint, val_off = _KEYREC.unpack(self.pool.load(off, _KEYREC.size))
        heap0 = self.pool.header.heap_offset
        if klen == 0 or klen > MAX_KEY or not heap0 <= val_off < self.pool.size:
            raise CorruptPool(f"implausible KeyRecord at offset {off}")
        return self.pool.load(off + _KEYREC.size, klen), val_off, vhint

    def _read_value_record(self, off: int) -> bytes:
        (vlen,) = _VALREC.unpack(self.pool.load(off, _VALREC.size))
        if vlen > MAX_VALUE or off + _VALREC.size + vlen > self.pool.size:
            raise CorruptPool(f"implausible ValueRecord at offset {off}")
        return self.pool.load(off + _VALREC.size, vlen)

    def _write_item(self, key: bytes, value: bytes) -> int:
        need = _ITEM.size + len(key) + len(value)
        h = self.slab.alloc(self.slab.class_for(need))
        self.log.store_raw(h.offset, _ITEM.pack(len(key), len(value)) + key + value)
        return h.offset

    def _read_item(self, off: int) -> tuple[bytes, bytes]:
        klen, vlen = _ITEM.unpack(self.pool.load(off, _ITEM.size))
        if klen == 0 or klen > MAX_KEY or vlen > MAX_VALUE:
            raise CorruptPool(f"implausible item at offset {off}")
        raw = self.pool.load(off + _ITEM.size, klen + vlen)
        return raw[:klen], raw[klen:]

    def _item_value(self, off: int) -> bytes:
        klen, vlen = _ITEM.unpack(self.pool.load(off, _ITEM.size))
        return self.pool.load(off + _ITEM.size + klen, vlen)

    # -- public operations -------------------------------------------------

    def set(self, key: bytes, value: bytes) -> None:
        self._check_sizes(key, value)
        if self.mode == Mode.SNAPSHOT:
            if key not in self.map:
                self.count += 1
            self.map[key] = value
            self.committed_ops += 1
            self._note_mod()
            return
        self._op_begin()
        try:
            if self.mode == Mode.FULLY_PERSISTENT:
                self._fp_set(key, value)
            else:
                self._hybrid_set(key, value)
        except (InjectedCrash, PoolInvalidated):
            raise  # power loss: leave everything to recovery
        except BaseException:
            self._op_fail()
            raise
        self._op_end()

    def get(self, key: bytes) -> Optional[bytes]:
        if self.mode == Mode.SNAPSHOT:
            return self.map.get(key)
        if self.mode == Mode.FULLY_PERSISTENT:
            return self._fp_get(key)
        e = self.table.find(hash64(key, self.hash_seed), key)
        if e is None:
            return None
        if self.strategy == Strategy.SLAB:
            return self._item_value(e.key_loc)
        return self._read_value_record(e.val_loc)

    def delete(self, key: bytes) -> bool:
        if self.mode == Mode.SNAPSHOT:
            found = self.map.pop(key, None) is not None
            if found:
                self.count -= 1
                self._note_mod()
            self.committed_ops += 1
            return found
        self._op_begin()
        try:
            if self.mode == Mode.FULLY_PERSISTENT:
                found = self._fp_delete(key)
            else:
                found = self._hybrid_delete(key)
        except (InjectedCrash, PoolInvalidated):
            raise
        except BaseException:
            self._op_fail()
            raise
        self._op_end()
        return found

    def maybe_resize(self) -> bool:
        if self.mode == Mode.SNAPSHOT:
            return False
        if self.mode == Mode.HYBRID:
            if self.table.maybe_resize():
                self.resizes += 1
                return True
            return False
        if self.log.tx.depth > 0:
            return self._maybe_resize_fp()
        with self.log.transaction():
            return self._maybe_resize_fp()

    def items(self) -> Iterator[tuple[bytes, bytes]]:
        if self.mode == Mode.SNAPSHOT:
            yield from self.map.items()
        elif self.mode == Mode.FULLY_PERSISTENT:
            yield from self._fp_items()
        else:
            for e in self.table:
                if self.strategy == Strategy.SLAB:
                    yield self._read_item(e.key_loc)
                else:
                    yield e.key, self._read_value_record(e.val_loc)

    def close(self) -> None:
        self.flush_batch()
        if self.mode == Mode.SNAPSHOT:
            self._write_snapshot()
        self.root.store_atomic("kv_count", self.count)
        self.pool.close()

    # -- transaction batching ------------------------------------------------

    def _op_begin(self) -> None:
        if self.log.tx.depth == 0:
            self.log.begin()

    def _op_end(self) -> None:
        self._batch_ops += 1
        if self._batch_ops >= max(1, self.config.tx_batch):
            self.flush_batch()

    def _op_fail(self) -> None:
        # a failed op poisons the whole open batch: durable state rolls
        # back, so the volatile side must be rebuilt to match
        if self.log.tx.depth > 0:
            self.log.abort()
        self._batch_ops = 0
        if self.mode == Mode.HYBRID:
            report = self._recover_hybrid()
            self.count = report.keys_recovered
        else:
            self.count = sum(1 for _ in self._fp_items())

    def flush_batch(self) -> None:
        """Commit the open batch; every batched op becomes durable and acked."""
        if self.log.tx.depth > 0:
            self.log.commit()
        self.committed_ops += self._batch_ops
        self._batch_ops = 0

    # -- FullyPersistent operations ----------------------------------------

    def _fp_find(self, key: bytes, h: int) -> tuple[int, int, int]:
        """(entry_off, prev_entry_off, bucket_off); entry_off 0 if missing."""
        bucket_off = self._bucket_off(h & (self.root.load("ht_len") - 1))
        addr = self.pool.load_u64(bucket_off)
        prev = 0
        while addr:
            off = self._rel(addr)
            key_addr, _val, nxt = self._load_entry(off)
            koff = self._rel(key_addr)
            if self.strategy == Strategy.SLAB:
                klen, _vlen = _ITEM.unpack(self.pool.load(koff, _ITEM.size))
                cand = self.pool.load(koff + _ITEM.size, klen)
            else:
                klen = int.from_bytes(self.pool.load(koff, 4), "little")
                cand = self.pool.load(koff + _KEYREC.size, klen)
            if cand == key:
                return off, prev, bucket_off
            prev = off
            addr = nxt
        return 0, prev, bucket_off

    def _fp_set(self, key: bytes, value: bytes) -> None:
        h = hash64(key, self.hash_seed)
        entry_off, _prev, bucket_off = self._fp_find(key, h)
        log = self.log
        if entry_off:
            key_addr, val_addr, nxt = self._load_entry(entry_off)
            if self.strategy == Strategy.SLAB:
                new_item = self._write_item(key, value)
                self.slab.free(self._rel(key_addr))
                log.store(
                    entry_off,
                    _ENTRY.pack(self._abs(new_item), self._abs(new_item), nxt),
                )
            else:
                new_val = self._write_value_record(value)
                koff = self._rel(key_addr)
                old_val_off = self._rel(val_addr)
                log.store(koff, _KEYREC.pack(len(key), len(value), new_val))
                log.store_u64(entry_off + 8, self._abs(new_val))
                self.objs.free(
                    ObjHandle(old_val_off, self._obj_size(old_val_off), TN_VALUE)
                )
            return
        if self.strategy == Strategy.SLAB:
            item_off = self._write_item(key, value)
            key_addr = val_addr = self._abs(item_off)
        else:
            val_off = self._write_value_record(value)
            key_off = self._write_key_record(key, val_off, len(value))
            key_addr, val_addr = self._abs(key_off), self._abs(val_off)
        slot = self._arena_bump(self._rel(self.root.load("ht0_entries_addr")))
        if not slot:
            # arena exhausted by churn before reaching the resize threshold:
            # compact into a fresh generation at the current size
            self._fp_rebuild(self.root.load("ht_len"))
            bucket_off = self._bucket_off(h & (self.root.load("ht_len") - 1))
            slot = self._arena_bump(self._rel(self.root.load("ht0_entries_addr")))
        head = self.pool.load_u64(bucket_off)
        log.store_raw(slot, _ENTRY.pack(key_addr, val_addr, head))
        log.store_u64(bucket_off, self._abs(slot))
        self.count += 1
        self._maybe_resize_fp()

    def _fp_get(self, key: bytes) -> Optional[bytes]:
        entry_off, _, _ = self._fp_find(key, hash64(key, self.hash_seed))
        if not entry_off:
            return None
        _k, val_addr, _n = self._load_entry(entry_off)
        voff = self._rel(val_addr)
        if self.strategy == Strategy.SLAB:
            return self._item_value(voff)
        return self._read_value_record(voff)

    def _fp_delete(self, key: bytes) -> bool:
        h = hash64(key, self.hash_seed)
        entry_off, prev, bucket_off = self._fp_find(key, h)
        if not entry_off:
            return False
        key_addr, val_addr, nxt = self._load_entry(entry_off)
        log = self.log
        if prev:
            log.store_u64(prev + 16, nxt)  # prev entry's next_addr
        else:
            log.store_u64(bucket_off, nxt)
        if self.strategy == Strategy.SLAB:
            self.slab.free(self._rel(key_addr))
        else:
            koff, voff = self._rel(key_addr), self._rel(val_addr)
            self.objs.free(ObjHandle(koff, self._obj_size(koff), TN_KEY))
            self.objs.free(ObjHandle(voff, self._obj_size(voff), TN_VALUE))
        self.count -= 1
        return True

    def _maybe_resize_fp(self) -> bool:
        if self.count < self.root.load("ht_len"):
            return False
        self._fp_rebuild(self.root.load("ht_len") * 2)
        return True

    def _fp_rebuild(self, new_len: int) -> None:
        """Copy all live entries into a fresh table + arena and switch the
        root, all in one transaction; the old generation is then freed."""
        root, log = self.root, self.log
        old_table_addr = root.load("ht_base_addr")
        old_arena_addr = root.load("ht0_entries_addr")
        old_len = root.load("ht_len")
        new_table_addr, new_arena_addr = self._alloc_table_and_arena(new_len)
        root.store_tx(log, "ht1_entries_addr", new_arena_addr)
        new_table_off = self._rel(new_table_addr)
        new_arena_off = self._rel(new_arena_addr)
        mask = new_len - 1
        cursor = 0
        old_table_off = self._rel(old_table_addr)
        for i in range(old_len):
            addr = self.pool.load_u64(old_table_off + i * 8)
            while addr:
                off = self._rel(addr)
                key_addr, val_addr, nxt = self._load_entry(off)
                koff = self._rel(key_addr)
                if self.strategy == Strategy.SLAB:
                    klen, _ = _ITEM.unpack(self.pool.load(koff, _ITEM.size))
                    kbytes = self.pool.load(koff + _ITEM.size, klen)
                else:
                    klen = int.from_bytes(self.pool.load(koff, 4), "little")
                    kbytes = self.pool.load(koff + _KEYREC.size, klen)
                b = hash64(kbytes, self.hash_seed) & mask
                slot = new_arena_off + 8 + cursor * ENTRY_SIZE
                head_off = new_table_off + b * 8
                head = self.pool.load_u64(head_off)
                log.store_raw(slot, _ENTRY.pack(key_addr, val_addr, head))
                log.store_raw(head_off, self._abs(slot).to_bytes(8, "little"))
                cursor += 1
                addr = nxt
        log.store_raw(new_arena_off, cursor.to_bytes(8, "little"))
        root.store_tx(log, "ht_base_addr", new_table_addr)
        root.store_tx(log, "ht_len", new_len)
        root.store_tx(log, "ht0_entries_addr", new_arena_addr)
        root.store_tx(log, "ht1_entries_addr", 0)
        old_table_off = self._rel(old_table_addr)
        old_arena_off = self._rel(old_arena_addr)
        self.objs.free(ObjHandle(old_table_off, self._obj_size(old_table_off), TN_TABLE))
        self.objs.free(ObjHandle(old_arena_off, self._obj_size(old_arena_off), TN_ARENA))
        self.resizes += 1

    def _fp_items(self) -> Iterator[tuple[bytes, bytes]]:
        table_off = self._rel(self.root.load("ht_base_addr"))
        for i in range(self.root.load("ht_len")):
            addr = self.pool.load_u64(table_off + i * 8)
            while addr:
                off = self._rel(addr)
                key_addr, val_addr, nxt = self._load_entry(off)
                koff = self._rel(key_addr)
                if self.strategy == Strategy.SLAB:
                    yield self._read_item(koff)
                else:
                    klen = int.from_bytes(self.pool.load(koff, 4), "little")
                    key = self.pool.load(koff + _KEYREC.size, klen)
                    yield key, self._read_value_record(self._rel(val_addr))
                addr = nxt

    # -- Hybrid operations ----------------------------------------------------

    def _hybrid_set(self, key: bytes, value: bytes) -> None:
        h = hash64(key, self.hash_seed)
        existing = self.table.find(h, key)
        if existing is not None:
            if self.strategy == Strategy.SLAB:
                new_item = self._write_item(key, value)
                self.slab.free(existing.key_loc)
                existing.key_loc = new_item
            else:
                new_val = self._write_value_record(value)
                # the durable KeyRecord repoints to the new ValueRecord, so
                # recovery never needs the volatile entry
                self.log.store(
                    existing.key_loc, _KEYREC.pack(len(key), len(value), new_val)
                )
                old = existing.val_loc
                self.objs.free(ObjHandle(old, self._obj_size(old), TN_VALUE))
                existing.val_loc = new_val
            return
        if self.strategy == Strategy.SLAB:
            item_off = self._write_item(key, value)
            entry = VolatileEntry(h, key, item_off, 0, None)
        else:
            val_off = self._write_value_record(value)
            key_off = self._write_key_record(key, val_off, len(value))
            entry = VolatileEntry(h, key, key_off, val_off, None)
        self.table.insert(entry)
        self.count += 1
        if self.table.maybe_resize():
            self.resizes += 1

    def _hybrid_delete(self, key: bytes) -> bool:
        h = hash64(key, self.hash_seed)
        e = self.table.find(h, key)
        if e is None:
            return False
        if self.strategy == Strategy.SLAB:
            self.slab.free(e.key_loc)
        else:
            self.objs.free(ObjHandle(e.key_loc, self._obj_size(e.key_loc), TN_KEY))
            self.objs.free(ObjHandle(e.val_loc, self._obj_size(e.val_loc), TN_VALUE))
        self.table.remove(h, key)
        self.count -= 1
        return True

    # -- FullyPersistent recovery -----------------------------------------

    def _classify(self, addr: int, old_base: int, fix_base: int) -> int:
        """Translate a stored address to a pool offset, whatever base it was
        written under (tolerates crashes during a previous fixup pass)."""
        if addr < self.pool.size:
            return addr  # normalized offset form
        if addr >= old_base and addr - old_base < self.pool.size:
            return addr - old_base
        if fix_base and addr >= fix_base and addr - fix_base < self.pool.size:
            return addr - fix_base
        raise CorruptPool(f"address {addr:#x} matches no known mapping base")

    def _fixup_walk(self, old_base: int, fix_base: int, to_base: int) -> int:
        """Rewrite every stored absolute address as to_base-relative; returns
        the number of entries visited.  The walk reads and rewrites in place
        and builds no volatile structures."""
        pool, root = self.pool, self.root
        heap0 = pool.header.heap_offset

        def xlat(addr: int) -> int:
            off = self._classify(addr, old_base, fix_base)
            if off < heap0 or off >= pool.size:
                raise CorruptPool(f"stored address resolves outside heap: {addr:#x}")
            return off

        table_off = 0
        for slot in ("ht_base_addr", "ht0_entries_addr", "ht1_entries_addr"):
            addr = root.load(slot)
            if addr:
                off = xlat(addr)
                if slot == "ht_base_addr":
                    table_off = off
                pool.store_u64(root.offset_of(slot), off + to_base)
                pool.flush(root.offset_of(slot), 8)
        if not table_off:
            return 0
        entries = 0
        for i in range(root.load("ht_len")):
            boff = table_off + i * 8
            addr = pool.load_u64(boff)
            if not addr:
                continue
            off = xlat(addr)
            pool.store_u64(boff, off + to_base)
            pool.flush(boff, 8)
            while True:
                key_addr, val_addr, nxt = self._load_entry(off)
                nxt_off = xlat(nxt) if nxt else 0
                pool.store(
                    off,
                    _ENTRY.pack(
                        xlat(key_addr) + to_base,
                        xlat(val_addr) + to_base,
                        (nxt_off + to_base) if nxt else 0,
                    ),
                )
                pool.flush(off, ENTRY_SIZE)
                entries += 1
                if not nxt:
                    break
                off = nxt_off
        return entries

    def _recover_fully_persistent(self) -> RecoveryReport:
        report = RecoveryReport(self.mode.name, self.strategy.name)
        pool, root = self.pool, self.root
        t0 = time.perf_counter()
        old_base = root.load("old_base_address")
        fix_base = root.load("fixup_base")
        new_base = pool.base_address
        if fix_base:
            # a previous recovery died mid-pass; normalize every address to
            # offset form first, then absolutize in a second pass
            self._fixup_walk(old_base, fix_base, 0)
            pool.fence()
            root.store_atomic("old_base_address", 0)
            root.store_atomic("fixup_base", 0)
            old_base = 0
        root.store_atomic("fixup_base", new_base)
        report.keys_recovered = self._fixup_walk(old_base, 0, new_base)
        pool.fence()
        root.store_atomic("old_base_address", new_base)
        root.store_atomic("fixup_base", 0)
        report.phase1_s = time.perf_counter() - t0
        self.count = report.keys_recovered
        return report

    # -- Hybrid recovery ---------------------------------------------------

    def _recover_hybrid(self) -> RecoveryReport:
        report = RecoveryReport(self.mode.name, self.strategy.name)
        t0 = time.perf_counter()
        if self.strategy == Strategy.SLAB:
            found: list[int] = []
            self.slab.walk(lambda off, size, cid: found.append(off))
            report.phase1_s = time.perf_counter() - t0
            t1 = time.perf_counter()
            table = VolatileTable.sized_for(len(found))
            for off in found:
                key, _value = self._read_item(off)
                table.insert(VolatileEntry(hash64(key, self.hash_seed), key, off, 0, None))
            report.phase2_s = time.perf_counter() - t1
        else:
            collected: list[tuple[int, bytes, int]] = []
            for handle in self.objs.iter_typed(TN_KEY):
                key, val_off, _hint = self._read_key_record(handle.offset)
                if self._obj_size(val_off) < _VALREC.size:
                    raise CorruptPool(f"dangling value offset {val_off}")
                collected.append((handle.offset, key, val_off))
            report.phase1_s = time.perf_counter() - t0
            t1 = time.perf_counter()
            table = VolatileTable.sized_for(len(collected))
            for key_off, key, val_off in collected:
                table.insert(
                    VolatileEntry(hash64(key, self.hash_seed), key, key_off, val_off, None)
                )
            report.phase2_s = time.perf_counter() - t1
        self.table = table
        self.count = table.used
        report.keys_recovered = table.used
        report.volatile_entries_built = table.used
        return report

    # -- SnapshotBaseline --------------------------------------------------

    def _snapshot_geometry(self) -> tuple[tuple[int, int], tuple[int, int]]:
        heap0 = self.pool.header.heap_offset
        region = ((self.pool.size - heap0) // 2) & ~4095
        return (heap0, region), (heap0 + region, region)

    def _note_mod(self) -> None:
        self._mods_since_snapshot += 1
        policy = self.config.snapshot_policy
        if policy.every_mods and self._mods_since_snapshot >= policy.every_mods:
            self._write_snapshot()

    def snapshot_tick(self, now: Optional[float] = None) -> bool:
        """Time-based snapshot trigger; callers own the clock."""
        if self.mode != Mode.SNAPSHOT:
            return False
        policy = self.config.snapshot_policy
        if policy.period_s is None:
            return False
        now = now if now is not None else time.monotonic()
        if self._last_snapshot_time is None:
            # first tick arms the timer; callers own the timebase
            self._last_snapshot_time = now
            return False
        if now - self._last_snapshot_time < policy.period_s:
            return False
        self._write_snapshot(now)
        return True

    def _write_snapshot(self, now: Optional[float] = None) -> None:
        pool = self.pool
        word = self.root.load("snap_word")
        generation = word >> 1
        target = 0 if (word & 1) else 1  # write into the inactive region
        start, region_size = self._snap_regions[target]
        parts = []
        count = 0
        for k, v in self.map.items():
            parts.append(_ITEM.pack(len(k), len(v)))
            parts.append(k)
            parts.append(v)
            count += 1
        payload = b"".join(parts)
        # payload length up front, trailing count and checksum behind
        blob = struct.pack("<Q", len(payload)) + payload
        blob += struct.pack("<QI", count, zlib.crc32(payload))
        if len(blob) > region_size:
            raise SnapshotRegionOverflow(
                f"snapshot needs {len(blob)} bytes, region holds {region_size}"
            )
        pool.store(start, blob)
        pool.flush(start, len(blob))
        pool.fence()
        self.root.store_atomic("snap_word", ((generation + 1) << 1) | target)
        self.snapshots_written += 1
        self._mods_since_snapshot = 0
        self._last_snapshot_time = now if now is not None else time.monotonic()

    def _recover_snapshot(self) -> RecoveryReport:
        report = RecoveryReport(self.mode.name, self.strategy.name)
        t0 = time.perf_counter()
        self.map = {}
        word = self.root.load("snap_word")
        if word == 0:
            return report  # no snapshot ever completed: empty store
        start, region_size = self._snap_regions[word & 1]
        (plen,) = struct.unpack("<Q", self.pool.load(start, 8))
        if 8 + plen + 12 > region_size:
            raise CorruptPool("snapshot length exceeds its region")
        payload = self.pool.load(start + 8, plen)
        count, crc = struct.unpack("<QI", self.pool.load(start + 8 + plen, 12))
        if zlib.crc32(payload) != crc:
            raise CorruptPool("snapshot checksum mismatch")
        pos = 0
        for _ in range(count):
            klen, vlen = _ITEM.unpack_from(payload, pos)
            pos += _ITEM.size
            self.map[payload[pos : pos + klen]] = payload[pos + klen : pos + klen + vlen]
            pos += klen + vlen
        self.count = len(self.map)
        report.keys_recovered = self.count
        report.phase1_s = time.perf_counter() - t0
        report.volatile_entries_built = self.count
        return report
