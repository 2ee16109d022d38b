import random
from dataclasses import replace

import pytest

from pmkv.errors import (
    InjectedCrash,
    KeyTooLarge,
    ModeMismatch,
    ValueTooLarge,
)
from pmkv.pool import Pool
from pmkv.store import (
    INITIAL_BUCKETS,
    TN_KEY,
    TN_VALUE,
    Mode,
    Store,
    StoreConfig,
    Strategy,
)

POOL = 8 << 20

DURABLE = [
    (Mode.FULLY_PERSISTENT, Strategy.PER_OBJECT),
    (Mode.FULLY_PERSISTENT, Strategy.SLAB),
    (Mode.HYBRID, Strategy.PER_OBJECT),
    (Mode.HYBRID, Strategy.SLAB),
]
ALL = DURABLE + [(Mode.SNAPSHOT, Strategy.PER_OBJECT)]

ids_all = [f"{m.name}-{s.name}" for m, s in ALL]
ids_durable = [f"{m.name}-{s.name}" for m, s in DURABLE]


def mkstore(mode, strategy, **kw):
    kw.setdefault("pool_size", POOL)
    return Store.create(StoreConfig(mode=mode, strategy=strategy, **kw))


def crash_reopen(store, base_address=None, config=None):
    snap = store.pool.crash()
    pool = Pool.from_snapshot(snap, base_address=base_address)
    return Store.attach(pool, config or store.config)


@pytest.mark.parametrize("mode,strategy", ALL, ids=ids_all)
class TestBasicOps:
    def test_set_get_round_trip(self, mode, strategy):
        s = mkstore(mode, strategy)
        s.set(b"k", b"v")
        assert s.get(b"k") == b"v"

    def test_get_missing_returns_none(self, mode, strategy):
        s = mkstore(mode, strategy)
        assert s.get(b"nope") is None

    def test_overwrite_second_value_wins(self, mode, strategy):
        s = mkstore(mode, strategy)
        s.set(b"k", b"first")
        s.set(b"k", b"second")
        assert s.get(b"k") == b"second"
        assert s.count == 1
        assert sorted(s.items()) == [(b"k", b"second")]

    def test_delete(self, mode, strategy):
        s = mkstore(mode, strategy)
        s.set(b"k", b"v")
        assert s.delete(b"k") is True
        assert s.get(b"k") is None
        assert s.delete(b"k") is False
        assert s.count == 0

    def test_empty_value_allowed(self, mode, strategy):
        s = mkstore(mode, strategy)
        s.set(b"k", b"")
        assert s.get(b"k") == b""

    def test_size_limits(self, mode, strategy):
        s = mkstore(mode, strategy)
        with pytest.raises(KeyTooLarge):
            s.set(b"", b"v")
        with pytest.raises(KeyTooLarge):
            s.set(b"x" * ((64 << 10) + 1), b"v")
        with pytest.raises(ValueTooLarge):
            s.set(b"k", b"x" * ((1 << 20) + 1))
        assert s.get(b"k") is None

    def test_many_keys_all_gettable(self, mode, strategy):
        s = mkstore(mode, strategy)
        for i in range(500):
            s.set(b"key-%d" % i, b"val-%d" % i)
        for i in range(500):
            assert s.get(b"key-%d" % i) == b"val-%d" % i
        assert s.count == 500


@pytest.mark.parametrize("mode,strategy", ALL, ids=ids_all)
class TestReopen:
    def test_clean_close_reopen_recovers_all(self, mode, strategy, tmp_path):
        path = str(tmp_path / "pool.img")
        s = mkstore(mode, strategy, path=path)
        expect = {}
        for i in range(1000):
            k, v = b"key-%d" % i, b"val-%d" % (i * 7)
            s.set(k, v)
            expect[k] = v
        s.close()
        s2 = Store.open(replace(s.config))
        assert s2.report.keys_recovered == 1000
        assert dict(s2.items()) == expect
        for k, v in list(expect.items())[:50]:
            assert s2.get(k) == v

    def test_fresh_store_recovers_zero(self, mode, strategy, tmp_path):
        path = str(tmp_path / "pool.img")
        s = mkstore(mode, strategy, path=path)
        s.close()
        s2 = Store.open(replace(s.config))
        assert s2.report.keys_recovered == 0
        assert s2.count == 0

    def test_deleted_keys_stay_deleted_after_reopen(self, mode, strategy, tmp_path):
        path = str(tmp_path / "pool.img")
        s = mkstore(mode, strategy, path=path)
        for i in range(100):
            s.set(b"k%d" % i, b"v%d" % i)
        for i in range(0, 100, 2):
            s.delete(b"k%d" % i)
        s.close()
        s2 = Store.open(replace(s.config))
        assert s2.count == 50
        for i in range(100):
            expected = None if i % 2 == 0 else b"v%d" % i
            assert s2.get(b"k%d" % i) == expected


class TestModeMismatch:
    def test_fp_pool_opened_as_hybrid(self, tmp_path):
        path = str(tmp_path / "pool.img")
        s = mkstore(Mode.FULLY_PERSISTENT, Strategy.PER_OBJECT, path=path)
        s.close()
        with pytest.raises(ModeMismatch):
            Store.open(StoreConfig(path=path, mode=Mode.HYBRID,
                                   strategy=Strategy.PER_OBJECT, pool_size=POOL))

    def test_strategy_mismatch(self, tmp_path):
        path = str(tmp_path / "pool.img")
        s = mkstore(Mode.HYBRID, Strategy.SLAB, path=path)
        s.close()
        with pytest.raises(ModeMismatch):
            Store.open(StoreConfig(path=path, mode=Mode.HYBRID,
                                   strategy=Strategy.PER_OBJECT, pool_size=POOL))


@pytest.mark.parametrize("mode,strategy", DURABLE, ids=ids_durable)
class TestCrashConsistency:
    # sweeps pin the hash seed so every trial replays the same event trace
    def test_crash_mid_set_sweep(self, mode, strategy):
        base = {b"pre-%d" % i: b"val-%d" % i for i in range(5)}

        def run(k):
            s = mkstore(mode, strategy, hash_seed=7)
            for key, val in base.items():
                s.set(key, val)
            if k is not None:
                s.pool.schedule_crash(s.pool.event_counter + k)
            try:
                s.set(b"new-key", b"new-val")
            except InjectedCrash:
                pass
            return dict(crash_reopen(s).items())

        probe = mkstore(mode, strategy, hash_seed=7)
        for key, val in base.items():
            probe.set(key, val)
        start = probe.pool.event_counter
        probe.set(b"new-key", b"new-val")
        total = probe.pool.event_counter - start

        with_new = {**base, b"new-key": b"new-val"}
        outcomes = set()
        for k in range(total + 1):
            state = run(k)
            assert state in (base, with_new), f"inconsistent state at event {k}"
            outcomes.add(state == with_new)
        assert outcomes == {False, True}

    def test_crash_mid_delete_sweep(self, mode, strategy):
        base = {b"a": b"1", b"b": b"2", b"c": b"3"}

        def run(k):
            s = mkstore(mode, strategy, hash_seed=7)
            for key, val in base.items():
                s.set(key, val)
            s.pool.schedule_crash(s.pool.event_counter + k)
            try:
                s.delete(b"b")
            except InjectedCrash:
                pass
            return dict(crash_reopen(s).items())

        probe = mkstore(mode, strategy, hash_seed=7)
        for key, val in base.items():
            probe.set(key, val)
        start = probe.pool.event_counter
        probe.delete(b"b")
        total = probe.pool.event_counter - start

        without = {k: v for k, v in base.items() if k != b"b"}
        outcomes = {frozenset(run(k).items()) for k in range(total + 1)}
        assert outcomes == {frozenset(base.items()), frozenset(without.items())}

    def test_acked_ops_survive_crash(self, mode, strategy):
        s = mkstore(mode, strategy)
        for i in range(200):
            s.set(b"k%d" % i, b"v%d" % i)
        acked = s.committed_ops
        assert acked == 200
        recovered = dict(crash_reopen(s).items())
        assert len(recovered) == 200


@pytest.mark.parametrize("mode,strategy", DURABLE, ids=ids_durable)
class TestResize:
    def test_resize_at_power_of_two(self, mode, strategy):
        s = mkstore(mode, strategy)
        for i in range(15):
            s.set(b"key-%d" % i, b"v")
        assert s.resizes == 0
        assert self.table_len(s) == INITIAL_BUCKETS
        s.set(b"key-15", b"v")
        assert s.resizes == 1
        s.set(b"key-16", b"v")
        assert self.table_len(s) == 32

    @staticmethod
    def table_len(s):
        if s.mode == Mode.FULLY_PERSISTENT:
            return s.root.load("ht_len")
        return len(s.table.buckets)

    def test_all_keys_gettable_through_resizes(self, mode, strategy):
        s = mkstore(mode, strategy)
        for i in range(300):  # crosses 16, 32, 64, 128, 256
            s.set(b"key-%d" % i, b"val-%d" % i)
            if (i + 1) in (16, 32, 64, 128, 256):
                for j in range(i + 1):
                    assert s.get(b"key-%d" % j) == b"val-%d" % j
        assert s.resizes == 5


class TestDurableResizeCrash:
    @pytest.mark.parametrize("strategy", [Strategy.PER_OBJECT, Strategy.SLAB],
                             ids=["perobject", "slab"])
    def test_crash_mid_resize_sweep(self, strategy):
        # the 16th insert triggers the durable rehash inside its own tx
        def run(k):
            s = mkstore(Mode.FULLY_PERSISTENT, strategy, hash_seed=7)
            for i in range(15):
                s.set(b"key-%d" % i, b"val-%d" % i)
            s.pool.schedule_crash(s.pool.event_counter + k)
            try:
                s.set(b"key-15", b"val-15")
            except InjectedCrash:
                pass
            s2 = crash_reopen(s)
            return s2.root.load("ht_len"), dict(s2.items())

        probe = mkstore(Mode.FULLY_PERSISTENT, strategy, hash_seed=7)
        for i in range(15):
            probe.set(b"key-%d" % i, b"val-%d" % i)
        start = probe.pool.event_counter
        probe.set(b"key-15", b"val-15")
        total = probe.pool.event_counter - start

        before = {b"key-%d" % i: b"val-%d" % i for i in range(15)}
        after = {**before, b"key-15": b"val-15"}
        lens = set()
        for k in range(0, total + 1):
            ht_len, state = run(k)
            assert (ht_len, frozenset(state.items())) in (
                (16, frozenset(before.items())),
                (32, frozenset(after.items())),
            ), f"mixed resize state at event {k}"
            lens.add(ht_len)
        assert lens == {16, 32}


class TestFullyPersistentRecovery:
    @pytest.mark.parametrize("strategy", [Strategy.PER_OBJECT, Strategy.SLAB],
                             ids=["perobject", "slab"])
    def test_reopen_at_different_base(self, strategy):
        s = mkstore(Mode.FULLY_PERSISTENT, strategy)
        expect = {}
        for i in range(1000):
            k, v = b"key-%d" % i, b"value-%d" % (i * 3)
            s.set(k, v)
            expect[k] = v
        old_base = s.pool.base_address
        s2 = crash_reopen(s, base_address=old_base + (64 << 20))
        assert s2.pool.base_address != old_base
        assert s2.report.keys_recovered == 1000
        assert s2.report.volatile_entries_built == 0
        assert s2.table is None
        assert dict(s2.items()) == expect
        for k, v in list(expect.items())[::97]:
            assert s2.get(k) == v

    def test_reopen_at_identical_base(self):
        s = mkstore(Mode.FULLY_PERSISTENT, Strategy.PER_OBJECT)
        for i in range(100):
            s.set(b"k%d" % i, b"v%d" % i)
        base = s.pool.base_address
        s2 = crash_reopen(s, base_address=base)
        assert s2.pool.base_address == base
        assert s2.report.keys_recovered == 100
        assert all(s2.get(b"k%d" % i) == b"v%d" % i for i in range(100))

    def test_store_still_writable_after_recovery(self):
        s = mkstore(Mode.FULLY_PERSISTENT, Strategy.PER_OBJECT)
        for i in range(40):
            s.set(b"k%d" % i, b"v")
        s2 = crash_reopen(s)
        for i in range(40, 80):
            s2.set(b"k%d" % i, b"v")
        assert s2.count == 80
        s3 = crash_reopen(s2)
        assert s3.count == 80

    def test_crash_during_recovery_sweep(self):
        # crash at every event of the fixup pass, then recover again: the
        # second pass must classify half-rewritten addresses correctly
        def build():
            s = mkstore(Mode.FULLY_PERSISTENT, Strategy.PER_OBJECT)
            for i in range(50):
                s.set(b"key-%d" % i, b"val-%d" % i)
            return s

        probe = crash_reopen(build())
        recovery_events = probe.pool.event_counter
        expect = {b"key-%d" % i: b"val-%d" % i for i in range(50)}

        for k in range(0, recovery_events + 1, 3):
            s = build()
            snap = s.pool.crash()
            pool = Pool.from_snapshot(snap)
            pool.schedule_crash(pool.event_counter + k)
            try:
                Store.attach(pool, s.config)
            except InjectedCrash:
                pass
            pool2 = Pool.from_snapshot(pool.crash())
            s2 = Store.attach(pool2, s.config)
            assert dict(s2.items()) == expect, f"recovery crash at event {k}"


class TestHybridRecovery:
    def test_perobject_recovery_matches_oracle(self):
        s = mkstore(Mode.HYBRID, Strategy.PER_OBJECT)
        rng = random.Random(11)
        oracle = {}
        for _ in range(2000):
            k = b"key-%d" % rng.randrange(600)
            if rng.random() < 0.75:
                v = random.randbytes(rng.randrange(1, 200))
                s.set(k, v)
                oracle[k] = v
            else:
                assert s.delete(k) == (oracle.pop(k, None) is not None)
        s2 = crash_reopen(s)
        assert dict(s2.items()) == oracle
        assert s2.report.keys_recovered == len(oracle)

    def test_slab_recovery_phase1_visits_every_item(self):
        s = mkstore(Mode.HYBRID, Strategy.SLAB)
        for i in range(1000):
            s.set(b"key-%d" % i, b"val-%d" % i)
        s2 = crash_reopen(s)
        assert s2.report.keys_recovered == 1000
        assert s2.report.phase1_s > 0
        assert s2.report.phase2_s > 0
        visits = s2.slab.walk(lambda *a: None)
        assert visits == 1000

    def test_exactly_one_key_record_per_live_key(self):
        s = mkstore(Mode.HYBRID, Strategy.PER_OBJECT)
        for _ in range(5):
            s.set(b"the-key", random.randbytes(20))
        assert len(list(s.objs.iter_typed(TN_KEY))) == 1
        assert len(list(s.objs.iter_typed(TN_VALUE))) == 1

    def test_double_crash_during_hybrid_recovery(self):
        s = mkstore(Mode.HYBRID, Strategy.PER_OBJECT)
        for i in range(100):
            s.set(b"k%d" % i, b"v%d" % i)
        pool = Pool.from_snapshot(s.pool.crash())
        # hybrid recovery only reads; crash it anywhere and retry
        pool.schedule_crash(pool.event_counter)
        try:
            Store.attach(pool, s.config)
        except InjectedCrash:
            pass
        pool2 = Pool.from_snapshot(pool.crash())
        s2 = Store.attach(pool2, s.config)
        assert s2.count == 100


class TestBatching:
    @pytest.mark.parametrize("mode,strategy", DURABLE, ids=ids_durable)
    def test_acks_deferred_until_batch_commit(self, mode, strategy):
        s = mkstore(mode, strategy, tx_batch=4)
        for i in range(6):
            s.set(b"k%d" % i, b"v")
        assert s.committed_ops == 4
        s.flush_batch()
        assert s.committed_ops == 6

    @pytest.mark.parametrize("mode,strategy", DURABLE, ids=ids_durable)
    def test_crash_loses_at_most_batch(self, mode, strategy):
        s = mkstore(mode, strategy, tx_batch=4)
        for i in range(6):
            s.set(b"k%d" % i, b"v%d" % i)
        acked = s.committed_ops
        s2 = crash_reopen(s)
        recovered = dict(s2.items())
        assert len(recovered) >= acked
        assert {b"k%d" % i for i in range(acked)} <= set(recovered)
        lost = 6 - len(recovered)
        assert lost <= 4

    def test_reads_see_uncommitted_batch_writes(self):
        s = mkstore(Mode.HYBRID, Strategy.PER_OBJECT, tx_batch=8)
        s.set(b"a", b"1")
        s.set(b"a", b"2")
        assert s.get(b"a") == b"2"
        assert s.committed_ops == 0
        s.flush_batch()
        assert s.get(b"a") == b"2"


def test_mode_equivalence():
    # with crash injection disabled all modes answer identically
    rng = random.Random(1234)
    ops = []
    keyspace = [b"key-%d" % i for i in range(120)]
    for _ in range(1500):
        r = rng.random()
        k = rng.choice(keyspace)
        if r < 0.5:
            ops.append(("set", k, random.randbytes(rng.randrange(0, 64))))
        elif r < 0.8:
            ops.append(("get", k))
        else:
            ops.append(("del", k))

    oracle = {}
    oracle_answers = []
    for op in ops:
        if op[0] == "set":
            oracle[op[1]] = op[2]
            oracle_answers.append(None)
        elif op[0] == "get":
            oracle_answers.append(oracle.get(op[1]))
        else:
            oracle_answers.append(oracle.pop(op[1], None) is not None)

    for mode, strategy in ALL:
        s = mkstore(mode, strategy)
        for op, expected in zip(ops, oracle_answers):
            if op[0] == "set":
                s.set(op[1], op[2])
            elif op[0] == "get":
                assert s.get(op[1]) == expected, (mode, strategy, op)
            else:
                assert s.delete(op[1]) == expected, (mode, strategy, op)
        assert dict(s.items()) == oracle, (mode, strategy)
        assert s.count == len(oracle)
