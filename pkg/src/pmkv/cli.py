"""Command line driver for benchmarks, crash tests, and the TCP server.

Every subcommand prints a short summary and runs its invariant checks; the
process exits 0 only when all checks pass.  CSV outputs land in --out-dir.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

from . import bench
from .metrics import PERCENTILES
from .server import Server
from .store import Mode, SnapshotPolicy, Store, StoreConfig, Strategy
from .workload import Kind, WorkloadSpec

MODES = {
    "fp": Mode.FULLY_PERSISTENT,
    "fully-persistent": Mode.FULLY_PERSISTENT,
    "hybrid": Mode.HYBRID,
    "snapshot": Mode.SNAPSHOT,
}
ALLOCS = {"perobject": Strategy.PER_OBJECT, "slab": Strategy.SLAB}
WORKLOADS = {
    "a": Kind.YCSB_A,
    "b": Kind.YCSB_B,
    "c": Kind.YCSB_C,
    "d": Kind.YCSB_D,
    "f": Kind.YCSB_F,
}


def _pool_path(args) -> Optional[str]:
    pool_dir = os.environ.get("PMKV_POOL_DIR")
    if not pool_dir:
        return None
    os.makedirs(pool_dir, exist_ok=True)
    return os.path.join(pool_dir, f"pmkv-{args.mode}-{args.alloc}.pool")


def _store_config(args, **overrides) -> StoreConfig:
    policy = SnapshotPolicy()
    if getattr(args, "snapshot_every", None):
        policy = SnapshotPolicy(period_s=None, every_mods=args.snapshot_every)
    cfg = dict(
        path=_pool_path(args),
        mode=MODES[args.mode],
        strategy=ALLOCS[args.alloc],
        tx_batch=args.tx_batch,
        snapshot_policy=policy,
        pool_size=args.pool_mb << 20,
        hash_seed=args.seed,
    )
    cfg.update(overrides)
    return StoreConfig(**cfg)


class Checks:
    def __init__(self):
        self.failed = 0

    def expect(self, ok: bool, label: str) -> None:
        print(f"check {'ok  ' if ok else 'FAIL'} {label}")
        if not ok:
            self.failed += 1

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


def _emit_run_csvs(args, result) -> None:
    if not args.out_dir:
        return
    os.makedirs(args.out_dir, exist_ok=True)
    bench.write_throughput_csv(
        os.path.join(args.out_dir, "throughput.csv"), result.series
    )
    bench.write_latency_csv(os.path.join(args.out_dir, "latency.csv"), result.hist)


def _check_run_invariants(checks: Checks, result) -> None:
    values = [result.hist.percentile(p) for p in PERCENTILES]
    checks.expect(values == sorted(values), "percentile monotonicity")
    checks.expect(
        result.series.window_op_total == result.n_ops, "window op accounting"
    )


def cmd_bench_insert(args) -> int:
    store = Store.create(_store_config(args))
    result = bench.run_insertion(store, args.keys, seed=args.seed, window_ops=args.window)
    store.close()
    print(
        f"insertion mode={args.mode} alloc={args.alloc} keys={result.n_ops} "
        f"elapsed={result.elapsed_s:.2f}s rate={result.ops_per_sec:.0f} ops/s "
        f"resizes={len(result.resize_key_counts)} heap_allocs={result.heap_allocs}"
    )
    _emit_run_csvs(args, result)
    checks = Checks()
    _check_run_invariants(checks, result)
    if MODES[args.mode] != Mode.SNAPSHOT:
        checks.expect(
            all(c & (c - 1) == 0 for c in result.resize_key_counts),
            "resizes at power-of-two key counts",
        )
    return checks.exit_code


def cmd_bench_ycsb(args) -> int:
    store = Store.create(_store_config(args))
    spec = WorkloadSpec(
        kind=WORKLOADS[args.workload],
        n_records=args.records,
        n_ops=args.ops,
        fixed_val_len=args.value_bytes,
        rng_seed=args.seed,
    )
    result = bench.run_ycsb(store, spec, window_ops=args.window)
    store.close()
    print(
        f"ycsb-{args.workload} mode={args.mode} alloc={args.alloc} "
        f"records={args.records} ops={result.n_ops} "
        f"elapsed={result.elapsed_s:.2f}s rate={result.ops_per_sec:.0f} ops/s"
    )
    _emit_run_csvs(args, result)
    checks = Checks()
    _check_run_invariants(checks, result)
    return checks.exit_code


def cmd_bench_recovery(args) -> int:
    counts = [int(c) for c in args.counts.split(",")]
    rows = bench.run_recovery_experiment(
        _store_config(args, path=None), counts, seed=args.seed
    )
    for r in rows:
        print(
            f"recovery mode={r.mode} strategy={r.strategy} keys={r.keys} "
            f"total={r.total_ms:.1f}ms phase1={r.phase1_ms:.1f}ms "
            f"phase2={r.phase2_ms:.1f}ms"
        )
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        bench.write_recovery_csv(os.path.join(args.out_dir, "recovery.csv"), rows)
    checks = Checks()
    r2 = bench.linear_r2([(r.keys, r.total_ms) for r in rows])
    checks.expect(len(rows) == len(counts), "one row per key count")
    checks.expect(len(rows) < 3 or r2 >= 0.98, f"linear fit r2={r2:.4f}")
    return checks.exit_code


def cmd_crashtest(args) -> int:
    config = _store_config(args, path=None)
    if config.mode == Mode.SNAPSHOT:
        reports = bench.run_snapshot_crashtest(
            config, args.ops, args.trials, seed=args.seed
        )
    else:
        reports = bench.run_crashtest(config, args.ops, args.trials, seed=args.seed)
    worst = max((r.lost for r in reports), default=0)
    corrupt = sum(1 for r in reports if r.corrupt)
    print(
        f"crashtest mode={args.mode} alloc={args.alloc} trials={len(reports)} "
        f"ops={args.ops} max_lost={worst} corrupt={corrupt}"
    )
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        bench.write_crash_csv(os.path.join(args.out_dir, "crash.csv"), reports)
    checks = Checks()
    checks.expect(corrupt == 0, "no corrupt recovery")
    if config.mode != Mode.SNAPSHOT:
        bound = max(1, args.tx_batch)
        checks.expect(worst <= bound, f"max lost {worst} within batch bound {bound}")
    return checks.exit_code


def cmd_serve(args) -> int:
    path = _pool_path(args)
    cfg = _store_config(args)
    if path and os.path.exists(path):
        store = Store.open(cfg)
        print(f"recovered {store.report.keys_recovered} keys from {path}")
    else:
        store = Store.create(cfg)
    server = Server(store, host=args.host, port=args.port)
    host, port = server.address
    print(f"serving {args.mode}/{args.alloc} on {host}:{port}")
    server.serve_forever()
    store.close()
    print(f"shutdown complete, {server.commands_served} commands served")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmkv")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_dir=True):
        p.add_argument("--mode", choices=sorted(MODES), default="hybrid")
        p.add_argument("--alloc", choices=sorted(ALLOCS), default="perobject")
        p.add_argument("--tx-batch", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--pool-mb", type=int, default=256)
        p.add_argument("--snapshot-every", type=int, default=None,
                       help="snapshot-mode policy: snapshot every N modifications")
        if out_dir:
            p.add_argument("--out-dir", default=None)

    p = sub.add_parser("bench-insert", help="unique-key insertion benchmark")
    common(p)
    p.add_argument("--keys", type=int, default=100000)
    p.add_argument("--window", type=int, default=1000)
    p.set_defaults(func=cmd_bench_insert)

    p = sub.add_parser("bench-ycsb", help="standard workload mixes")
    common(p)
    p.add_argument("--workload", choices=sorted(WORKLOADS), default="a")
    p.add_argument("--records", type=int, default=10000)
    p.add_argument("--ops", type=int, default=100000)
    p.add_argument("--value-bytes", type=int, default=1024)
    p.add_argument("--window", type=int, default=1000)
    p.set_defaults(func=cmd_bench_ycsb)

    p = sub.add_parser("bench-recovery", help="recovery time vs key count")
    common(p)
    p.add_argument("--counts", default="100000,300000,1000000")
    p.set_defaults(func=cmd_bench_recovery)

    p = sub.add_parser("crashtest", help="random crash-point loss measurement")
    common(p)
    p.add_argument("--ops", type=int, default=10000)
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(func=cmd_crashtest)

    p = sub.add_parser("serve", help="TCP front end (SHUTDOWN verb stops it)")
    common(p, out_dir=False)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7379)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
