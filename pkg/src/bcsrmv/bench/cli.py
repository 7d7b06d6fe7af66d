"""Command line interface: `bench run`, `bench verify`, `bench stats`.

Exit codes: 0 success, 1 verification or kernel failure, 2 configuration
error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields

from ..errors import ConfigurationError, Error
from .config import ALL_KERNELS, BenchConfig
from .runner import collect_stats, run_benchmark, write_report_json, write_timings_csv
from .verify import verify


def _csv_of(kind):
    def parse(text):
        return [kind(v) for v in text.split(",") if v.strip()]

    return parse


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--atoms", type=int)
    parser.add_argument("--degree", type=int)
    parser.add_argument("--ranks", type=int, dest="n_ranks")
    parser.add_argument("--radius", type=float)
    parser.add_argument("--block-size", type=int, dest="block_size")
    parser.add_argument("--reps", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument(
        "--kernels",
        help=f"comma-separated subset of {','.join(ALL_KERNELS)}",
    )
    parser.add_argument("--rings", type=int)
    parser.add_argument("--ring-spacing", type=float, dest="ring_spacing")
    parser.add_argument("--tube-radius", type=float, dest="tube_radius")
    parser.add_argument("--vectors-per-atom", type=int, dest="vectors_per_atom")
    parser.add_argument("--lane-width", type=int, dest="lane_width")
    parser.add_argument("--spacing", type=_csv_of(float), help="hx,hy,hz in Bohr")
    parser.add_argument("--extents", type=_csv_of(int), help="nx,ny,nz cells")
    parser.add_argument("--coarse-level", type=int, dest="coarse_level")
    parser.add_argument("--potential", type=float)


def build_config(args) -> BenchConfig:
    if args.config:
        cfg = BenchConfig.from_json_file(args.config)
    else:
        cfg = BenchConfig()
    names = {f.name for f in fields(BenchConfig)}
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "kernels", None):
        cfg.kernels = [k.strip() for k in args.kernels.split(",") if k.strip()]
    return cfg.validate()


def _print_stats(structure: dict):
    print("structural statistics:")
    for key, value in structure.items():
        if isinstance(value, dict) and "mean" in value:
            print(f"  {key}: {value['mean']:.4g} +/- {value['std']:.4g}")
        else:
            print(f"  {key}: {value}")


def cmd_run(args) -> int:
    cfg = build_config(args)
    report = run_benchmark(cfg, trace_path=args.trace)
    if args.out:
        write_report_json(report, args.out)
    if args.csv:
        write_timings_csv(report, args.csv)
    _print_stats(report["structure"])
    print("kernel timings (wall seconds over reps):")
    for name, data in report["kernels"].items():
        print(
            f"  {name:>13}: min {data['min']:.6f}  mean {data['mean']:.6f}  "
            f"max {data['max']:.6f}  flops {data['flops']:.3e}"
        )
    if not report["valid"]:
        print(f"kernel failure: {report.get('error')}", file=sys.stderr)
        return 1
    return 0


def cmd_verify(args) -> int:
    cfg = build_config(args)
    all_ok, results = verify(cfg, inject_fault=args.inject_fault)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all_ok else 1


def cmd_stats(args) -> int:
    cfg = build_config(args)
    report = collect_stats(cfg)
    _print_stats(report["structure"])
    if args.out:
        write_report_json(report, args.out)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bench",
        description="Benchmark and verify the sparse-multivector kernels",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="time the configured kernels")
    _add_common(p_run)
    p_run.add_argument("--out", help="write the JSON report here")
    p_run.add_argument("--csv", help="write per-rep timings as CSV here")
    p_run.add_argument("--trace", help="write a JSONL message-trace log here")
    p_run.set_defaults(fn=cmd_run)

    p_verify = sub.add_parser("verify", help="run the oracle suite")
    _add_common(p_verify)
    p_verify.add_argument(
        "--inject-fault",
        action="store_true",
        help="flip one block value to demonstrate sensitivity",
    )
    p_verify.set_defaults(fn=cmd_verify)

    p_stats = sub.add_parser("stats", help="report structural statistics")
    _add_common(p_stats)
    p_stats.add_argument("--out", help="write the JSON report here")
    p_stats.set_defaults(fn=cmd_stats)

    args = parser.parse_args(argv)
    try:
        code = args.fn(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
