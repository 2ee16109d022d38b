"""Latency and throughput capture for benchmark runs."""

from __future__ import annotations

import math
from typing import Optional

PERCENTILES = (50.0, 90.0, 99.0, 99.9, 99.99)


class LatencyHistogram:
    """Log-scaled buckets spanning 100 ns to 10 s.

    Bucket edges grow by 2% per step, and percentile() answers with the
    geometric midpoint of the containing bucket, so the relative quantile
    error is at most sqrt(1.02) - 1, under 1%.
    """

    LOW = 1e-7
    HIGH = 10.0
    RATIO = 1.02

    def __init__(self):
        self._log_low = math.log(self.LOW)
        self._log_ratio = math.log(self.RATIO)
        self.nbuckets = int(math.ceil((math.log(self.HIGH) - self._log_low) / self._log_ratio)) + 1
        self.counts = [0] * (self.nbuckets + 2)  # plus under/overflow
        self.total = 0

    def _bucket(self, seconds: float) -> int:
        if seconds < self.LOW:
            return 0
        if seconds >= self.HIGH:
            return self.nbuckets + 1
        return 1 + int((math.log(seconds) - self._log_low) / self._log_ratio)

    def record(self, seconds: float) -> None:
        self.counts[self._bucket(seconds)] += 1
        self.total += 1

    def _bucket_value(self, index: int) -> float:
        if index == 0:
            return self.LOW
        if index == self.nbuckets + 1:
            return self.HIGH
        lo = math.exp(self._log_low + (index - 1) * self._log_ratio)
        return lo * math.sqrt(self.RATIO)  # geometric midpoint

    def percentile(self, p: float) -> float:
        """Latency in seconds at percentile p (0 < p <= 100)."""
        if self.total == 0:
            return 0.0
        rank = max(1, math.ceil(self.total * p / 100.0))
        seen = 0
        for i, c in enumerate(self.counts):
            seen += c
            if seen >= rank:
                return self._bucket_value(i)
        return self._bucket_value(len(self.counts) - 1)

    def snapshot_percentiles(self) -> list[tuple[float, float]]:
        return [(p, self.percentile(p)) for p in PERCENTILES]


class ThroughputSeries:
    """Windowed throughput: one sample per window_ops operations.

    Callers mark each completed op; any op flagged resized taints its whole
    window so reorganization dips can be located later.
    """

    def __init__(self, window_ops: int = 1000):
        self.window_ops = window_ops
        self.samples: list[tuple[int, int, float, bool]] = []  # start_op, n, dt, flag
        self._t0: Optional[float] = None
        self._win_t0: Optional[float] = None
        self._win_start = 0
        self._win_count = 0
        self._win_flag = False
        self.total_ops = 0

    def start(self, now: float) -> None:
        self._t0 = now
        self._win_t0 = now

    def note_op(self, now: float, resized: bool = False) -> None:
        if self._win_t0 is None:
            raise RuntimeError("series not started")
        self._win_count += 1
        self.total_ops += 1
        self._win_flag = self._win_flag or resized
        if self._win_count == self.window_ops:
            self._close_window(now)

    def _close_window(self, now: float) -> None:
        dt = max(now - self._win_t0, 1e-12)
        self.samples.append((self._win_start, self._win_count, dt, self._win_flag))
        self._win_start += self._win_count
        self._win_count = 0
        self._win_t0 = now
        self._win_flag = False

    def finish(self, now: float) -> None:
        if self._win_count:
            self._close_window(now)

    def ops_per_sec(self) -> list[tuple[int, float, bool]]:
        return [(start, n / dt, flag) for start, n, dt, flag in self.samples]

    @property
    def window_op_total(self) -> int:
        return sum(n for _, n, _, _ in self.samples) + self._win_count
