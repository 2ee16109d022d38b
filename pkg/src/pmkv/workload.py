"""Deterministic workload streams for the benchmark driver.

Key choice for the skewed workloads uses the bounded zipfian generator of
Gray et al. (the same construction YCSB ships): closed form over a
precomputed harmonic sum, no per-sample table.  All randomness flows from
one seeded Random instance, so a (spec, seed) pair always produces the same
byte-identical stream.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional

# \r and \n are banned on the wire; fold them onto nearby bytes so raw
# random payloads stay transportable
_SAFE = bytes(114 if b == 13 else (110 if b == 10 else b) for b in range(256))


class Kind(str, Enum):
    INSERTION = "insertion"
    YCSB_A = "a"  # 50% read / 50% update
    YCSB_B = "b"  # 95% read / 5% update
    YCSB_C = "c"  # read only
    YCSB_D = "d"  # 95% read latest / 5% insert
    YCSB_F = "f"  # read-modify-write


READ_FRACTION = {
    Kind.YCSB_A: 0.50,
    Kind.YCSB_B: 0.95,
    Kind.YCSB_C: 1.00,
    Kind.YCSB_D: 0.95,
}


@dataclass(frozen=True)
class WorkloadSpec:
    kind: Kind
    n_records: int
    n_ops: int
    key_len_range: tuple[int, int] = (4, 11)
    val_len_range: tuple[int, int] = (5, 13)
    fixed_val_len: Optional[int] = None  # 1024 for YCSB-style records
    zipf_theta: float = 0.99
    rng_seed: int = 0


class Zipfian:
    """Bounded zipfian over [0, n); item 0 is the most popular."""

    _zeta_cache: dict[tuple[int, float], float] = {}

    def __init__(self, n: int, theta: float, rng: random.Random):
        if n < 1:
            raise ValueError("zipfian needs at least one item")
        self.n = n
        self.theta = theta
        self.rng = rng
        self.zetan = self._zeta(n, theta)
        self.zeta2 = self._zeta(2, theta)
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - self.zeta2 / self.zetan)

    @classmethod
    def _zeta(cls, n: int, theta: float) -> float:
        key = (n, theta)
        hit = cls._zeta_cache.get(key)
        if hit is None:
            hit = math.fsum(1.0 / i**theta for i in range(1, n + 1))
            cls._zeta_cache[key] = hit
        return hit

    def sample(self) -> int:
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < 1.0 + 0.5**self.theta:
            return 1
        return int(self.n * (self.eta * u - self.eta + 1.0) ** self.alpha)


class Workload:
    """Materialized key set plus a reproducible operation stream."""

    def __init__(self, spec: WorkloadSpec):
        self.spec = spec
        self.rng = random.Random(spec.rng_seed)
        extra = spec.n_ops if spec.kind is Kind.YCSB_D else 0
        self.keys = self._gen_keys(spec.n_records + extra)

    def _gen_keys(self, count: int) -> list[bytes]:
        lo, hi = self.spec.key_len_range
        rng = self.rng
        seen: set[bytes] = set()
        keys: list[bytes] = []
        while len(keys) < count:
            k = rng.randbytes(rng.randint(lo, hi)).translate(_SAFE)
            if k in seen:
                continue
            seen.add(k)
            keys.append(k)
        return keys

    def _value(self) -> bytes:
        if self.spec.fixed_val_len is not None:
            n = self.spec.fixed_val_len
        else:
            n = self.rng.randint(*self.spec.val_len_range)
        return self.rng.randbytes(n).translate(_SAFE)

    def records(self) -> Iterator[tuple[bytes, bytes]]:
        """Initial load set: the first n_records keys with fresh values."""
        for i in range(self.spec.n_records):
            yield self.keys[i], self._value()

    def ops(self) -> Iterator[tuple]:
        """n_ops operations; shapes are ("get", key) and ("set", key, value)."""
        spec = self.spec
        if spec.kind is Kind.INSERTION:
            if spec.n_ops > len(self.keys):
                raise ValueError("insertion stream needs n_records >= n_ops")
            for i in range(spec.n_ops):
                yield ("set", self.keys[i], self._value())
            return
        if spec.kind is Kind.YCSB_F:
            yield from self._ops_rmw()
            return
        if spec.kind is Kind.YCSB_D:
            yield from self._ops_latest()
            return
        read_fraction = READ_FRACTION[spec.kind]
        zipf = Zipfian(spec.n_records, spec.zipf_theta, self.rng)
        for _ in range(spec.n_ops):
            key = self.keys[zipf.sample()]
            if self.rng.random() < read_fraction:
                yield ("get", key)
            else:
                yield ("set", key, self._value())

    def _ops_rmw(self) -> Iterator[tuple]:
        # each read-modify-write pair occupies two stream slots
        spec = self.spec
        zipf = Zipfian(spec.n_records, spec.zipf_theta, self.rng)
        emitted = 0
        while emitted < spec.n_ops:
            key = self.keys[zipf.sample()]
            yield ("get", key)
            emitted += 1
            if emitted >= spec.n_ops:
                return
            yield ("set", key, self._value())
            emitted += 1

    def _ops_latest(self) -> Iterator[tuple]:
        spec = self.spec
        zipf = Zipfian(spec.n_records, spec.zipf_theta, self.rng)
        high = spec.n_records  # next unused key index; grows with inserts
        for _ in range(spec.n_ops):
            if self.rng.random() < READ_FRACTION[Kind.YCSB_D] or high >= len(self.keys):
                recency = zipf.sample() % high
                yield ("get", self.keys[high - 1 - recency])
            else:
                yield ("set", self.keys[high], self._value())
                high += 1


def gen_workload(spec: WorkloadSpec) -> Iterator[tuple]:
    """Operation stream for a spec; wraps Workload for one-shot callers."""
    return Workload(spec).ops()
