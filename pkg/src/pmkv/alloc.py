"""Persistent allocation strategies over the pool heap.

ObjAllocator hands out individually headered regions linked into one durable
list; the header carries a caller-assigned type number so recovery can
enumerate all live allocations of a given kind without any volatile index.

SlabAllocator sits on top of it: each slab is a single per-object allocation
whose payload holds a small header, a chunk bitmap, and a 1 MiB chunk area.
Item allocation then only touches the bitmap, so the heap-allocation count
grows with slabs, not items.

Both are crash-consistent by construction: every overwrite of reachable
state goes through the undo log, while writes into freshly carved space skip
pre-imaging and ride the commit fence.
"""

from __future__ import annotations

import struct
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

from .errors import CorruptBitmap, DoubleFree, OutOfMemory, StaleHandle
from .pool import Pool
from .txn import UndoLog

LIVE = 1
FREE = 2

# size u64 | next u64 | typenum u32 | state u32
_HDR = struct.Struct("<QQII")
HDR_SIZE = _HDR.size

TN_SLAB = 3

SLAB_CHUNK_AREA = 1 << 20
SLAB_MIN_CHUNK = 64
SLAB_GROWTH = 1.25
SLAB_MAX_CHUNK = 64 << 10


def _align8(n: int) -> int:
    return (n + 7) & ~7


@dataclass(frozen=True)
class ObjHandle:
    offset: int  # payload offset
    size: int
    typenum: int


class ObjAllocator:
    """Bump allocator with a durable linked list of typed live headers.

    Freed regions are unlinked but never reused; the workloads this serves
    are insert-dominated and the pool is sized for them.
    """

    def __init__(self, pool: Pool, log: UndoLog):
        self.pool = pool
        self.log = log
        self.table = pool.header.alloc_table_offset  # list_head u64, cursor u64
        self.heap_allocs = 0
        self._prev: Optional[dict[int, int]] = None  # header off -> prev header off
        log.abort_hooks.append(self._invalidate_cache)

    def _invalidate_cache(self) -> None:
        self._prev = None

    # durable cursor 0 means "never allocated": treat as heap start
    def _cursor(self) -> int:
        raw = self.pool.load_u64(self.table + 8)
        return raw if raw else self.pool.header.heap_offset

    def _head(self) -> int:
        return self.pool.load_u64(self.table)

    def alloc(self, size: int, typenum: int) -> ObjHandle:
        if self.log.tx.depth < 1:
            raise OutOfMemory("alloc requires an open transaction")
        log = self.log
        hdr_off = _align8(self._cursor())
        payload_off = hdr_off + HDR_SIZE
        new_cursor = payload_off + _align8(size)
        if new_cursor > self.pool.size:
            raise OutOfMemory(
                f"heap exhausted: need {size} bytes at offset {hdr_off}"
            )
        head = self._head()
        log.store_raw(hdr_off, _HDR.pack(size, head, typenum, LIVE))
        # head and cursor share one 16-byte logged range
        log.add_range(self.table, 16)
        log.store_u64(self.table, hdr_off)
        log.store_u64(self.table + 8, new_cursor)
        self.heap_allocs += 1
        if self._prev is not None:
            self._prev[hdr_off] = 0
            if head:
                self._prev[head] = hdr_off
        return ObjHandle(payload_off, size, typenum)

    def _read_header(self, hdr_off: int) -> tuple[int, int, int, int]:
        if hdr_off < self.pool.header.heap_offset or hdr_off + HDR_SIZE > self.pool.size:
            raise StaleHandle(f"header offset {hdr_off} outside heap")
        size, nxt, typenum, state = _HDR.unpack(self.pool.load(hdr_off, HDR_SIZE))
        if state not in (LIVE, FREE) or hdr_off + HDR_SIZE + size > self.pool.size:
            raise StaleHandle(f"implausible header at offset {hdr_off}")
        return size, nxt, typenum, state

    def _build_prev(self) -> dict[int, int]:
        prev = {}
        last = 0
        node = self._head()
        while node:
            prev[node] = last
            last = node
            _, node, _, _ = self._read_header(node)
        return prev

    def free(self, handle: ObjHandle) -> None:
        if self.log.tx.depth < 1:
            raise DoubleFree("free requires an open transaction")
        hdr_off = handle.offset - HDR_SIZE
        size, nxt, typenum, state = self._read_header(hdr_off)
        if state != LIVE:
            raise DoubleFree(f"object at offset {handle.offset} is not live")
        if self._prev is None:
            self._prev = self._build_prev()
        prev = self._prev.get(hdr_off)
        if prev is None:
            raise StaleHandle(f"object at offset {handle.offset} not in live list")
        log = self.log
        if prev == 0:
            log.store_u64(self.table, nxt)
        else:
            log.store_u64(prev + 8, nxt)  # prev header's next field
        log.store(hdr_off + 20, FREE.to_bytes(4, "little"))  # state word
        del self._prev[hdr_off]
        if nxt:
            self._prev[nxt] = prev

    def iter_typed(self, typenum: int) -> Iterator[ObjHandle]:
        node = self._head()
        while node:
            size, nxt, tn, state = self._read_header(node)
            if state != LIVE:
                raise StaleHandle(f"free header at offset {node} linked in live list")
            if tn == typenum:
                yield ObjHandle(node + HDR_SIZE, size, tn)
            node = nxt

    def iter_first(self, typenum: int) -> Optional[ObjHandle]:
        return next(self.iter_typed(typenum), None)

    def iter_next(self, handle: ObjHandle) -> Optional[ObjHandle]:
        hdr_off = handle.offset - HDR_SIZE
        size, nxt, typenum, state = self._read_header(hdr_off)
        if state != LIVE:
            raise StaleHandle(f"handle at offset {handle.offset} was freed")
        node = nxt
        while node:
            size, nxt, tn, state = self._read_header(node)
            if state != LIVE:
                raise StaleHandle(f"free header at offset {node} linked in live list")
            if tn == handle.typenum:
                return ObjHandle(node + HDR_SIZE, size, tn)
            node = nxt
        return None


def slab_class_sizes() -> list[int]:
    """Chunk sizes from 64 B growing by 1.25x, capped by a final 64 KiB class."""
    sizes = []
    size = SLAB_MIN_CHUNK
    while size < SLAB_MAX_CHUNK:
        sizes.append(size)
        size = _align8(int(size * SLAB_GROWTH))
    sizes.append(SLAB_MAX_CHUNK)
    return sizes


# slab payload: class_id u32 | used_chunks u32 | bitmap | chunk area
_SLAB_HDR = struct.Struct("<II")


class SlabAllocator:
    def __init__(
        self,
        pool: Pool,
        log: UndoLog,
        objs: ObjAllocator,
        typenum: int = TN_SLAB,
        class_sizes: Optional[list[int]] = None,
    ):
        self.pool = pool
        self.log = log
        self.objs = objs
        self.typenum = typenum
        self.class_sizes = class_sizes or slab_class_sizes()
        self.items_per_slab = [SLAB_CHUNK_AREA // s for s in self.class_sizes]
        self._slabs: list[list[int]] = [[] for _ in self.class_sizes]
        self._free: list[list[tuple[int, int]]] = [[] for _ in self.class_sizes]
        self._freed_in_tx: list[tuple[int, int, int]] = []  # class, slab, idx
        self._areas: list[tuple[int, int, int]] = []  # (area_start, slab_off, class)
        log.commit_hooks.append(self._publish_tx_frees)
        log.abort_hooks.append(self._drop_tx_frees)
        self.rebuild()

    # -- geometry ---------------------------------------------------------

    def _bitmap_bytes(self, class_id: int) -> int:
        return _align8((self.items_per_slab[class_id] + 7) // 8)

    def _payload_size(self, class_id: int) -> int:
        return _SLAB_HDR.size + self._bitmap_bytes(class_id) + SLAB_CHUNK_AREA

    def _area_start(self, slab_off: int, class_id: int) -> int:
        return slab_off + _SLAB_HDR.size + self._bitmap_bytes(class_id)

    def class_for(self, nbytes: int) -> int:
        cid = bisect_left(self.class_sizes, nbytes)
        if cid == len(self.class_sizes):
            raise OutOfMemory(f"no slab class holds {nbytes} bytes")
        return cid

    # -- volatile index ------------------------------------------------------

    def rebuild(self) -> None:
        """Repopulate slab lists and free chunks from the durable image."""
        self._slabs = [[] for _ in self.class_sizes]
        self._free = [[] for _ in self.class_sizes]
        self._freed_in_tx = []
        self._areas = []
        for handle in self.objs.iter_typed(self.typenum):
            cid, used = _SLAB_HDR.unpack(self.pool.load(handle.offset, _SLAB_HDR.size))
            if cid >= len(self.class_sizes):
                raise CorruptBitmap(f"slab at offset {handle.offset} has class {cid}")
            bitmap = self.pool.load(
                handle.offset + _SLAB_HDR.size, self._bitmap_bytes(cid)
            )
            count = self.items_per_slab[cid]
            live = sum(
                (bitmap[i >> 3] >> (i & 7)) & 1 for i in range(count)
            )
            if live != used:
                raise CorruptBitmap(
                    f"slab at offset {handle.offset}: bitmap popcount {live} != "
                    f"used_chunks {used}"
                )
            self._slabs[cid].append(handle.offset)
            self._areas.append((self._area_start(handle.offset, cid), handle.offset, cid))
            for i in range(count):
                if not (bitmap[i >> 3] >> (i & 7)) & 1:
                    self._free[cid].append((handle.offset, i))
        self._areas.sort()

    def _publish_tx_frees(self) -> None:
        for cid, slab_off, idx in self._freed_in_tx:
            self._free[cid].append((slab_off, idx))
        self._freed_in_tx = []

    def _drop_tx_frees(self) -> None:
        self._freed_in_tx = []
        self.rebuild()

    # -- allocation ---------------------------------------------------------

    def _log_slab_range(self, slab_off: int, word_off: int) -> None:
        # one pre-image spans used_chunks and the touched bitmap word, so a
        # slab mutation costs a single log entry (and a single log fence)
        self.log.add_range(slab_off, word_off + 8 - slab_off)

    def _grow(self, class_id: int) -> int:
        handle = self.objs.alloc(self._payload_size(class_id), self.typenum)
        log = self.log
        log.store_raw(handle.offset, _SLAB_HDR.pack(class_id, 0))
        log.store_raw(
            handle.offset + _SLAB_HDR.size, b"\x00" * self._bitmap_bytes(class_id)
        )
        self._slabs[class_id].append(handle.offset)
        self._areas.append((self._area_start(handle.offset, class_id), handle.offset, class_id))
        self._areas.sort()
        self._free[class_id].extend(
            (handle.offset, i) for i in reversed(range(self.items_per_slab[class_id]))
        )
        return handle.offset

    def alloc(self, class_id: int) -> ObjHandle:
        if not self._free[class_id]:
            self._grow(class_id)
        slab_off, idx = self._free[class_id].pop()
        log = self.log
        word_off = slab_off + _SLAB_HDR.size + (idx >> 6) * 8
        self._log_slab_range(slab_off, word_off)
        word = self.pool.load_u64(word_off)
        log.store_u64(word_off, word | (1 << (idx & 63)))
        _, used = _SLAB_HDR.unpack(self.pool.load(slab_off, _SLAB_HDR.size))
        log.store(slab_off + 4, (used + 1).to_bytes(4, "little"))
        chunk_size = self.class_sizes[class_id]
        return ObjHandle(
            self._area_start(slab_off, class_id) + idx * chunk_size,
            chunk_size,
            self.typenum,
        )

    def free(self, chunk_offset: int) -> None:
        pos = bisect_right(self._areas, (chunk_offset, float("inf"), 0)) - 1
        if pos < 0:
            raise StaleHandle(f"offset {chunk_offset} is not inside any slab")
        area_start, slab_off, cid = self._areas[pos]
        chunk_size = self.class_sizes[cid]
        rel = chunk_offset - area_start
        if rel < 0 or rel >= SLAB_CHUNK_AREA or rel % chunk_size:
            raise StaleHandle(f"offset {chunk_offset} is not a chunk boundary")
        idx = rel // chunk_size
        word_off = slab_off + _SLAB_HDR.size + (idx >> 6) * 8
        word = self.pool.load_u64(word_off)
        if not (word >> (idx & 63)) & 1:
            raise DoubleFree(f"chunk at offset {chunk_offset} already free")
        log = self.log
        self._log_slab_range(slab_off, word_off)
        log.store_u64(word_off, word & ~(1 << (idx & 63)))
        _, used = _SLAB_HDR.unpack(self.pool.load(slab_off, _SLAB_HDR.size))
        log.store(slab_off + 4, (used - 1).to_bytes(4, "little"))
        # not reusable until this transaction commits; rollback would
        # resurrect the old chunk contents, which raw writes do not preserve
        self._freed_in_tx.append((cid, slab_off, idx))

    # -- recovery walk --------------------------------------------------------

    def walk(self, visit: Callable[[int, int, int], None]) -> int:
        """Invoke visit(chunk_offset, chunk_size, class_id) per live chunk."""
        count = 0
        for handle in self.objs.iter_typed(self.typenum):
            cid, used = _SLAB_HDR.unpack(self.pool.load(handle.offset, _SLAB_HDR.size))
            if cid >= len(self.class_sizes):
                raise CorruptBitmap(f"slab at offset {handle.offset} has class {cid}")
            n = self.items_per_slab[cid]
            bitmap = self.pool.load(handle.offset + _SLAB_HDR.size, self._bitmap_bytes(cid))
            area = self._area_start(handle.offset, cid)
            size = self.class_sizes[cid]
            live = 0
            for i in range(n):
                if (bitmap[i >> 3] >> (i & 7)) & 1:
                    visit(area + i * size, size, cid)
                    live += 1
            if live != used:
                raise CorruptBitmap(
                    f"slab at offset {handle.offset}: bitmap popcount {live} != "
                    f"used_chunks {used}"
                )
            count += live
        return count
