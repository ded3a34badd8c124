"""Command-line entry point: ``lorakit {run,sweep,verify,bench-serve,schema}``.

Exit codes: 0 success, 1 check or run failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

import tomli

from .core import RandomSource
from .errors import ConfigurationError, LorakitError
from .harness.config import config_schema, parse_config
from .harness.runner import csv_text, parse_axis, run_experiment, summary_csv, sweep, write_record
from .harness.verify import MUTATIONS, format_report, verify
from .serving import BENCH_COLUMNS, bench_serving, speedup

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _load(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise ConfigurationError(f"cannot read config: {e}", "config") from None


def cmd_run(args) -> int:
    cfg = parse_config(_load(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    rec = run_experiment(cfg, record_time=args.timing)
    out = args.out or cfg.output
    if out:
        write_record(rec, out)
    else:
        sys.stdout.write(csv_text(rec))
    status = "converged" if rec.converged else ("diverged" if rec.diverged else "stopped")
    print(f"{status} after {rec.iterations} iterations, loss {rec.rows[-1]['loss']:.3e}", file=sys.stderr)
    return EXIT_FAIL if rec.diverged else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = parse_config(_load(args.config))
    axes = dict(parse_axis(a) for a in args.axis)
    results, summary = sweep(cfg, axes, args.seeds, jobs=args.jobs)
    if args.out_dir:
        d = Path(args.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, (point, seed, rec, _) in enumerate(results):
            if rec is not None:
                tag = "_".join(f"{k}-{v}" for k, v in point)
                write_record(rec, d / f"{i:04d}_{tag}_seed{seed}.csv")
    sys.stdout.write(summary_csv(summary))
    for point, seed, _, err in results:
        if err:
            print(f"run {dict(point)} seed {seed} failed: {err}", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify(args.mutate)
    print(format_report(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


BENCH_KEYS = {"m", "n", "r", "sizes", "reps", "seed"}


def cmd_bench(args) -> int:
    doc = tomli.loads(_load(args.config)) if args.config else {}
    table = doc.get("bench", doc)
    unknown = set(table) - BENCH_KEYS
    if unknown:
        raise ConfigurationError("unknown key", f"bench.{sorted(unknown)[0]}")
    m, n, r = table.get("m", 256), table.get("n", 256), table.get("r", 8)
    sizes = table.get("sizes", [1, 2, 8, 64])
    reps = table.get("reps", 5)
    if reps < 3:
        raise ConfigurationError("reps must be >= 3", "bench.reps")
    rng = RandomSource(table.get("seed", 0), "bench")
    W = rng.child("W").normal((m, n))
    rows = bench_serving(W, sizes, r, reps, rng)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    sys.stdout.write(buf.getvalue())
    for K in sizes:
        print(f"K={K}: batched speedup over per-user loop {speedup(rows, K):.2f}x", file=sys.stderr)
    return EXIT_OK


def cmd_schema(args) -> int:
    print(json.dumps(config_schema(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lorakit", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one experiment and emit its CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--timing", action="store_true", help="fill the wall_ns column")
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("sweep", help="Cartesian sweep over config keys")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", action="append", required=True, help="key=v1,v2,... (repeatable)")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir")
    p.set_defaults(fn=cmd_sweep)
    p = sub.add_parser("verify", help="run the closed-form and property checks")
    p.add_argument("--mutate", choices=MUTATIONS, help="break a component on purpose")
    p.set_defaults(fn=cmd_verify)
    p = sub.add_parser("bench-serve", help="serving-kernel throughput benchmark")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_bench)
    p = sub.add_parser("schema", help="print the config JSON Schema")
    p.set_defaults(fn=cmd_schema)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except tomli.TOMLDecodeError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LorakitError as e:
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
