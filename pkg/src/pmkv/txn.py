"""Undo-log transactions over a pool.

Protocol per mutated range: append a pre-image record to the log region,
flush it, then publish it by bumping the 8-byte head count; the fence inside
that head store persists record and head together (the "log fence").  Only
then may the caller overwrite the range.  Commit flushes every dirty line,
fences (the "commit fence"), then clears the head with one more atomic
store.  A crash anywhere in between leaves either the full pre-image or the
full post-commit image: recovery replays pre-images newest-first whenever
head is nonzero, so a crash after the commit fence but before the head clear
rolls the transaction back, and callers must not acknowledge success until
commit has returned.

Nested begins flatten into the outermost transaction; only the outermost
commit is a durable commit point.
"""

from __future__ import annotations

import struct
import zlib
from bisect import bisect_left
from contextlib import contextmanager
from dataclasses import dataclass

from .errors import CorruptLog, InjectedCrash, LogRegionFull, PoolInvalidated, TxError
from .pool import LINE, Pool, lines_covering

MAX_ENTRY_BYTES = 4096

# target_offset u64 | length u32 | crc32 u32, then the pre-image bytes
# padded to an 8-byte boundary so the head word never shares a partial word.
_ENTRY = struct.Struct("<QII")


def _entry_crc(target: int, payload: bytes) -> int:
    return zlib.crc32(payload, zlib.crc32(struct.pack("<QI", target, len(payload))))


@dataclass
class TxStats:
    entries: int = 0
    bytes_logged: int = 0
    flushes: int = 0
    fences: int = 0


class Transaction:
    """Handle for one (possibly nested) transaction; reused across begins."""

    __slots__ = ("depth", "added", "dirty_lines", "stats")

    def __init__(self):
        self.depth = 0
        self.added: list[tuple[int, int]] = []  # disjoint sorted [start, end)
        self.dirty_lines: set[int] = set()
        self.stats = TxStats()

    @property
    def added_ranges(self) -> list[tuple[int, int]]:
        return [(s, e - s) for s, e in self.added]


class UndoLog:
    def __init__(self, pool: Pool):
        self.pool = pool
        hdr = pool.header
        self.head_offset = hdr.log_region_offset
        self.entries_base = hdr.log_region_offset + LINE
        self.region_end = hdr.log_region_offset + hdr.log_region_size
        self.capacity_bytes = self.region_end - self.entries_base
        self.tx = Transaction()
        self._tail = self.entries_base
        self._count = 0
        self._undo: list[tuple[int, bytes]] = []
        self.commit_hooks: list = []
        self.abort_hooks: list = []

    # -- transaction lifecycle -------------------------------------------

    def begin(self) -> Transaction:
        if self.tx.depth == 0:
            if self.pool.load_u64(self.head_offset) != 0:
                raise TxError("log head nonzero; pool opened without recovery")
            self.tx = Transaction()
            self._tail = self.entries_base
            self._count = 0
            self._undo = []
        self.tx.depth += 1
        return self.tx

    def commit(self) -> TxStats:
        tx = self.tx
        if tx.depth < 1:
            raise TxError("commit without open transaction")
        tx.depth -= 1
        if tx.depth > 0:
            return tx.stats
        pool = self.pool
        f0, n0 = pool.flush_count, pool.fence_count
        if tx.dirty_lines:
            for start, length in _runs(tx.dirty_lines):
                pool.flush(start, length)
            pool.fence()
        if self._count:
            pool.durable_store_u64(self.head_offset, 0)
        tx.stats.flushes += pool.flush_count - f0
        tx.stats.fences += pool.fence_count - n0
        self._count = 0
        self._tail = self.entries_base
        self._undo = []
        for hook in self.commit_hooks:
            hook()
        return tx.stats

    def abort(self) -> None:
        tx = self.tx
        if tx.depth < 1:
            raise TxError("abort without open transaction")
        self._rollback(self._undo)
        tx.depth = 0
        self._count = 0
        self._tail = self.entries_base
        self._undo = []
        for hook in self.abort_hooks:
            hook()

    @contextmanager
    def transaction(self):
        tx = self.begin()
        try:
            yield tx
        except (InjectedCrash, PoolInvalidated):
            raise  # power loss: no further pool writes, recovery cleans up
        except BaseException:
            self.abort()
            raise
        else:
            self.commit()

    # -- logging writes -----------------------------------------------------

    def add_range(self, offset: int, length: int) -> None:
        tx = self.tx
        if tx.depth < 1:
            raise TxError("add_range without open transaction")
        if length <= 0:
            return
        for gap_start, gap_len in self._uncovered(offset, length):
            pos = gap_start
            remaining = gap_len
            while remaining > 0:
                chunk = min(remaining, MAX_ENTRY_BYTES)
                self._append_entry(pos, chunk)
                pos += chunk
                remaining -= chunk
        self._merge_in(offset, length)

    def store(self, offset: int, data: bytes) -> None:
        """Guarded write: pre-image logged if needed, line marked dirty."""
        self.add_range(offset, len(data))
        self.pool.store(offset, data)
        self.tx.dirty_lines.update(lines_covering(offset, len(data)))

    def store_raw(self, offset: int, data: bytes) -> None:
        """Unguarded write for freshly allocated space: no pre-image, but
        still flushed by the commit fence."""
        if self.tx.depth < 1:
            raise TxError("store_raw without open transaction")
        self.pool.store(offset, data)
        self.tx.dirty_lines.update(lines_covering(offset, len(data)))

    def store_u64(self, offset: int, value: int) -> None:
        self.store(offset, value.to_bytes(8, "little"))

    def _append_entry(self, target: int, length: int) -> None:
        pool = self.pool
        payload = pool.load(target, length)
        padded = (length + 7) & ~7
        need = _ENTRY.size + padded
        if self._tail + need > self.region_end:
            self.abort()
            raise LogRegionFull(
                f"undo log full: need {need} bytes past offset {self._tail}"
            )
        record = _ENTRY.pack(target, length, _entry_crc(target, payload))
        record += payload + b"\x00" * (padded - length)
        f0, n0 = pool.flush_count, pool.fence_count
        pool.store(self._tail, record)
        pool.flush(self._tail, len(record))
        # single fence covers both the record and the head bump
        pool.durable_store_u64(self.head_offset, self._count + 1)
        tx = self.tx
        tx.stats.flushes += pool.flush_count - f0
        tx.stats.fences += pool.fence_count - n0
        tx.stats.entries += 1
        tx.stats.bytes_logged += length
        self._undo.append((target, payload))
        self._tail += need
        self._count += 1

    # -- interval bookkeeping ------------------------------------------------

    def _uncovered(self, offset: int, length: int) -> list[tuple[int, int]]:
        gaps = []
        pos, end = offset, offset + length
        added = self.tx.added
        i = bisect_left(added, (pos + 1,)) - 1
        if i < 0:
            i = 0
        while pos < end and i < len(added):
            s, e = added[i]
            if e <= pos:
                i += 1
                continue
            if s >= end:
                break
            if s > pos:
                gaps.append((pos, s - pos))
            pos = max(pos, e)
            i += 1
        if pos < end:
            gaps.append((pos, end - pos))
        return gaps

    def _merge_in(self, offset: int, length: int) -> None:
        added = self.tx.added
        s, e = offset, offset + length
        out = []
        placed = False
        for a, b in added:
            if b < s or a > e:
                if not placed and a > e:
                    out.append((s, e))
                    placed = True
                out.append((a, b))
            else:
                s, e = min(s, a), max(e, b)
        if not placed:
            out.append((s, e))
        out.sort()
        self.tx.added = out

    # -- recovery -------------------------------------------------------------

    def recover(self) -> bool:
        """Roll back any in-flight transaction found at open."""
        count = self.pool.load_u64(self.head_offset)
        if count == 0:
            return False
        entries = self._parse_entries(count)
        self._rollback(entries)
        self.tx = Transaction()
        self._count = 0
        self._tail = self.entries_base
        self._undo = []
        return True

    def _parse_entries(self, count: int) -> list[tuple[int, bytes]]:
        pool = self.pool
        entries = []
        pos = self.entries_base
        for i in range(count):
            if pos + _ENTRY.size > self.region_end:
                raise CorruptLog(f"log entry {i} extends past the log region")
            target, length, crc = _ENTRY.unpack(pool.load(pos, _ENTRY.size))
            padded = (length + 7) & ~7
            if length > MAX_ENTRY_BYTES or pos + _ENTRY.size + padded > self.region_end:
                raise CorruptLog(f"log entry {i} has implausible length {length}")
            payload = pool.load(pos + _ENTRY.size, length)
            if _entry_crc(target, payload) != crc:
                raise CorruptLog(f"log entry {i} failed checksum")
            if target + length > pool.size:
                raise CorruptLog(f"log entry {i} targets out-of-pool range")
            entries.append((target, payload))
            pos += _ENTRY.size + padded
        return entries

    def _rollback(self, entries: list[tuple[int, bytes]]) -> None:
        pool = self.pool
        for target, payload in reversed(entries):
            pool.store(target, payload)
            pool.flush(target, len(payload))
        pool.fence()
        pool.durable_store_u64(self.head_offset, 0)


def _runs(lines: set[int]) -> list[tuple[int, int]]:
    """Merge a set of line indices into (offset, length) byte runs."""
    runs = []
    start = prev = None
    for line in sorted(lines):
        if prev is not None and line == prev + 1:
            prev = line
            continue
        if start is not None:
            runs.append((start << 6, (prev - start + 1) << 6))
        start = prev = line
    if start is not None:
        runs.append((start << 6, (prev - start + 1) << 6))
    return runs
