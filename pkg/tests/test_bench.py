"""Benchmark driver and crash-experiment tests.

Crash experiments here run at desk scale (hundreds of ops, tens of trials);
the full-size sweeps live in the acceptance suite.
"""

import statistics

import pytest

from pmkv.bench import (
    CrashReport,
    RecoveryRow,
    crashtest_ops,
    linear_r2,
    run_crashtest,
    run_insertion,
    run_recovery_experiment,
    run_snapshot_crashtest,
    run_ycsb,
    write_crash_csv,
    write_latency_csv,
    write_recovery_csv,
    write_throughput_csv,
)
from pmkv.store import Mode, SnapshotPolicy, Store, StoreConfig, Strategy
from pmkv.workload import Kind, WorkloadSpec

POOL = 8 << 20

DURABLE = [
    (Mode.FULLY_PERSISTENT, Strategy.PER_OBJECT),
    (Mode.FULLY_PERSISTENT, Strategy.SLAB),
    (Mode.HYBRID, Strategy.PER_OBJECT),
    (Mode.HYBRID, Strategy.SLAB),
]


def config(mode=Mode.HYBRID, strategy=Strategy.PER_OBJECT, **kw):
    kw.setdefault("pool_size", POOL)
    kw.setdefault("hash_seed", 7)
    return StoreConfig(mode=mode, strategy=strategy, **kw)


class TestRunInsertion:
    def test_counts_and_resizes(self):
        store = Store.create(config())
        result = run_insertion(store, 600, seed=3)
        assert result.n_ops == 600
        assert store.count == 600
        assert result.hist.total == 600
        assert result.series.window_op_total == 600
        assert result.resize_key_counts == [16, 32, 64, 128, 256, 512]
        assert result.heap_allocs > 0
        store.close()

    def test_zero_ops(self):
        store = Store.create(config())
        result = run_insertion(store, 0)
        assert result.n_ops == 0
        assert result.series.ops_per_sec() == []
        assert result.ops_per_sec == 0.0 or result.elapsed_s > 0
        store.close()

    def test_slab_fewer_heap_allocs(self):
        per_object = Store.create(config(strategy=Strategy.PER_OBJECT))
        slab = Store.create(config(strategy=Strategy.SLAB))
        a = run_insertion(per_object, 500, seed=1)
        b = run_insertion(slab, 500, seed=1)
        per_object.close()
        slab.close()
        assert b.heap_allocs * 8 <= a.heap_allocs

    def test_resize_flag_windows(self):
        store = Store.create(config())
        result = run_insertion(store, 3000, seed=5, window_ops=1000)
        store.close()
        samples = result.series.ops_per_sec()
        assert [s[0] for s in samples] == [0, 1000, 2000]
        # resizes at 2048 land in the third window only
        flagged = [bool(s[2]) for s in samples]
        assert flagged == [True, True, True] or flagged[2]


class TestRunYcsb:
    def test_mix_smoke(self):
        store = Store.create(config())
        spec = WorkloadSpec(Kind.YCSB_A, n_records=200, n_ops=400, rng_seed=9)
        result = run_ycsb(store, spec)
        assert result.n_ops == 400
        assert store.count == 200  # updates only touch loaded keys
        assert result.hist.total == 400
        store.close()


class TestRecoveryExperiment:
    @pytest.mark.parametrize("mode,strategy", DURABLE)
    def test_rows(self, mode, strategy):
        rows = run_recovery_experiment(config(mode, strategy), [300, 700], seed=2)
        assert [r.keys for r in rows] == [300, 700]
        for r in rows:
            assert r.mode == mode.name
            assert r.strategy == strategy.name
            assert r.total_ms > 0
            assert r.phase1_ms + r.phase2_ms <= r.total_ms + 1e-6


class TestCrashtest:
    @pytest.mark.parametrize("mode,strategy", DURABLE)
    def test_loss_bound(self, mode, strategy):
        reports = run_crashtest(config(mode, strategy), 300, 40, seed=11)
        assert len(reports) == 40
        assert [r.trial for r in reports] == list(range(40))
        for r in reports:
            assert not r.corrupt
            assert 0 <= r.lost <= 1
            assert 0 <= r.acked <= 300

    def test_batched_loss_bound(self):
        cfg = config(Mode.HYBRID, Strategy.PER_OBJECT, tx_batch=8)
        reports = run_crashtest(cfg, 300, 40, seed=13)
        assert all(not r.corrupt for r in reports)
        assert all(r.lost <= 8 for r in reports)
        assert any(r.lost > 1 for r in reports)

    def test_deterministic(self):
        cfg = config(Mode.FULLY_PERSISTENT, Strategy.PER_OBJECT)
        a = run_crashtest(cfg, 200, 15, seed=4)
        b = run_crashtest(cfg, 200, 15, seed=4)
        assert a == b

    def test_ops_mix(self):
        ops = crashtest_ops(2000, seed=8)
        assert len(ops) == 2000
        assert ops == crashtest_ops(2000, seed=8)
        seen = set()
        overwrites = 0
        for verb, key, _value in ops:
            assert verb == "set"
            if key in seen:
                overwrites += 1
            seen.add(key)
        assert 0.05 < overwrites / len(ops) < 0.15


class TestSnapshotCrashtest:
    def test_loss_at_snapshot_boundaries(self):
        cfg = config(
            Mode.SNAPSHOT,
            Strategy.PER_OBJECT,
            snapshot_policy=SnapshotPolicy(period_s=None, every_mods=25),
        )
        reports = run_snapshot_crashtest(cfg, 200, 25, seed=6)
        assert len(reports) == 25
        for r in reports:
            assert not r.corrupt
            # recovered state always matches a completed snapshot boundary
            assert (r.acked - r.lost) % 25 == 0
            assert r.lost <= 25
        assert any(r.lost > 0 for r in reports)


class TestCsv:
    def test_throughput_schema(self, tmp_path):
        store = Store.create(config())
        result = run_insertion(store, 2500, seed=1)
        store.close()
        path = tmp_path / "throughput.csv"
        write_throughput_csv(str(path), result.series)
        lines = path.read_text().splitlines()
        assert lines[0] == "window_start_op,ops_per_sec,resize_flag"
        assert len(lines) == 4  # three windows: 1000, 1000, 500
        for line in lines[1:]:
            start, rate, flag = line.split(",")
            assert int(start) % 1000 == 0
            assert float(rate) > 0
            assert flag in ("0", "1")

    def test_latency_schema(self, tmp_path):
        store = Store.create(config())
        result = run_insertion(store, 300, seed=1)
        store.close()
        path = tmp_path / "latency.csv"
        write_latency_csv(str(path), result.hist)
        lines = path.read_text().splitlines()
        assert lines[0] == "percentile,microseconds"
        labels = [line.split(",")[0] for line in lines[1:]]
        assert labels == ["50", "90", "99", "99.9", "99.99"]
        micros = [float(line.split(",")[1]) for line in lines[1:]]
        assert micros == sorted(micros)
        assert all(m > 0 for m in micros)

    def test_recovery_schema(self, tmp_path):
        rows = [
            RecoveryRow("HYBRID", "SLAB", 1000, 12.3456, 10.0, 2.3456),
            RecoveryRow("FULLY_PERSISTENT", "PER_OBJECT", 2000, 5.0, 5.0, 0.0),
        ]
        path = tmp_path / "recovery.csv"
        write_recovery_csv(str(path), rows)
        lines = path.read_text().splitlines()
        assert lines[0] == "mode,strategy,keys,total_ms,phase1_ms,phase2_ms"
        assert lines[1] == "HYBRID,SLAB,1000,12.346,10.000,2.346"
        assert lines[2] == "FULLY_PERSISTENT,PER_OBJECT,2000,5.000,5.000,0.000"

    def test_crash_schema(self, tmp_path):
        reports = [
            CrashReport(0, 123, 45, 1, False),
            CrashReport(1, 456, 78, 78, True),
        ]
        path = tmp_path / "crash.csv"
        write_crash_csv(str(path), reports)
        lines = path.read_text().splitlines()
        assert lines[0] == "trial,event_index,acked,lost,corrupt"
        assert lines[1] == "0,123,45,1,false"
        assert lines[2] == "1,456,78,78,true"

    def test_empty_results_header_only(self, tmp_path):
        path = tmp_path / "crash.csv"
        write_crash_csv(str(path), [])
        assert path.read_text().splitlines() == ["trial,event_index,acked,lost,corrupt"]

    def test_rewrite_identical(self, tmp_path):
        reports = [CrashReport(i, i * 7, i, 0, False) for i in range(5)]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_crash_csv(str(a), reports)
        write_crash_csv(str(b), reports)
        assert a.read_bytes() == b.read_bytes()


class TestLinearR2:
    def test_perfect_line(self):
        pts = [(1.0, 3.0), (2.0, 5.0), (3.0, 7.0), (4.0, 9.0)]
        assert linear_r2(pts) == pytest.approx(1.0)

    def test_matches_correlation_squared(self):
        # for a univariate least-squares fit, r-squared equals the squared
        # Pearson correlation; statistics.correlation is the oracle
        xs = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
        ys = [2.1, 3.9, 9.0, 15.5, 33.0, 63.0]
        expected = statistics.correlation(xs, ys) ** 2
        assert linear_r2(list(zip(xs, ys))) == pytest.approx(expected)

    def test_degenerate(self):
        assert linear_r2([]) == 1.0
        assert linear_r2([(1.0, 2.0)]) == 1.0
        assert linear_r2([(3.0, 1.0), (3.0, 9.0)]) == 1.0  # vertical
        assert linear_r2([(1.0, 5.0), (2.0, 5.0), (3.0, 5.0)]) == 1.0  # constant
