"""``hpgas-bench <latency|distance|ra|stencil> [options]``, run under ``hpgas-run``.

Unit 0 writes the CSV (stdout unless ``--csv PATH``).
"""

from __future__ import annotations

import argparse
import sys

from .. import runtime
from .common import BenchConfig, write_csv
from .lowlevel import DISTANCE_HEADER, LATENCY_HEADER, bench_distance, bench_latency
from .random_access import HEADER as RA_HEADER, bench_random_access
from .stencil import HEADER as STENCIL_HEADER, bench_stencil

ALIASES = {"ra": "random_access", "random_access": "random_access", "latency": "latency",
           "distance": "distance", "stencil": "stencil"}


def parse_sizes(text: str) -> list[int]:
    out = []
    for tok in text.replace(",", " ").split():
        tok = tok.strip().lower()
        mult = 1
        for suffix, m in (("k", 1 << 10), ("m", 1 << 20)):
            if tok.endswith(suffix):
                tok, mult = tok[:-1], m
        out.append(int(tok) * mult)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hpgas-bench", description=__doc__.splitlines()[0])
    p.add_argument("kind", choices=sorted(ALIASES))
    p.add_argument("--sizes", type=parse_sizes, default=None,
                   help="message sizes, e.g. '1,8,1k,1m'")
    p.add_argument("--reps", type=int, default=10000)
    p.add_argument("--reps-large", type=int, default=100,
                   help="repetitions for messages above 64 KiB")
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--n", type=int, default=64, help="stencil grid dimension")
    p.add_argument("--table-bits", type=int, default=20, help="RA words per unit = 2^B")
    p.add_argument("--updates", type=int, default=None,
                   help="RA updates per unit (default 4 x total table words)")
    p.add_argument("--eps", type=float, default=1e-4, help="stencil convergence threshold")
    p.add_argument("--max-iters", type=int, default=10 ** 6)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--csv", default=None, help="output path (default stdout)")
    return p


def config_from_args(args) -> BenchConfig:
    return BenchConfig(kind=ALIASES[args.kind], sizes=args.sizes, reps=args.reps,
                       reps_large=args.reps_large, warmup=args.warmup, n=args.n,
                       table_bits=args.table_bits, updates=args.updates, eps=args.eps,
                       max_iters=args.max_iters, seed=args.seed)


def run(rt, config: BenchConfig) -> tuple[list[dict], list[str]]:
    if config.kind == "latency":
        return bench_latency(rt, config), LATENCY_HEADER
    if config.kind == "distance":
        return bench_distance(rt, config), DISTANCE_HEADER
    if config.kind == "random_access":
        return [bench_random_access(rt, config)], RA_HEADER
    return [bench_stencil(rt, config)], STENCIL_HEADER


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
    except ValueError as exc:
        print(f"hpgas-bench: {exc}", file=sys.stderr)
        return 2
    rt = runtime.init()
    rows, header = run(rt, config)
    if rt.me == 0:
        write_csv(rows, header, args.csv)
    ok = all(r.get("verified", True) for r in rows)
    runtime.finalize()
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
