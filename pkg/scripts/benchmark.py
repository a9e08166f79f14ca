"""Pretrain every variant on synthetic scans and compare linear-probe macro-F1.

    python scripts/benchmark.py --seeds 0 1 2 3 4 --out results/benchmark.json

Defaults take roughly an hour on a single CPU core.
"""

import argparse
import logging
import sys

from awcl.benchmark import DEFAULT_VARIANTS, BenchmarkConfig, run_benchmark


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", nargs="+", default=list(DEFAULT_VARIANTS))
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--out", help="write per-seed results as JSON")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    cfg = BenchmarkConfig(seeds=args.seeds, variants=args.variants, epochs=args.epochs)
    result = run_benchmark(cfg, progress=lambda m: print(m, file=sys.stderr, flush=True))
    print(result.table())
    if args.out:
        result.to_json(args.out)


if __name__ == "__main__":
    main()
