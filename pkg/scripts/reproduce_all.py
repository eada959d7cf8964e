"""Run every demo at its full protocol and write the CSV series under one directory.

Usage: python3 scripts/reproduce_all.py [--out runs/full] [--seed 0] [--quick] [--only NAME ...]
"""

import argparse
import sys
import time

from due import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/full")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--quick", action="store_true")
    parser.add_argument("--only", nargs="*", choices=cli.DEMOS, default=list(cli.DEMOS))
    args = parser.parse_args()
    status = 0
    for name in args.only:
        start = time.perf_counter()
        argv = ["demo", name, "--seed", str(args.seed), "--out", f"{args.out}/{name}"]
        code = cli.main(argv + (["--quick"] if args.quick else []))
        print(f"[{name}] exit {code} in {time.perf_counter() - start:.1f}s", flush=True)
        status = max(status, code)
    return status


if __name__ == "__main__":
    sys.exit(main())
