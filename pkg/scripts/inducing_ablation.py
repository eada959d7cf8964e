"""Held-out two-moons NLL and accuracy of DUE for several inducing-point counts.

Usage: python3 scripts/inducing_ablation.py [--counts 4 10 50] [--seeds 0 1 2] [--out ablation.csv]
"""

import argparse
import csv

from due import experiments as E


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--counts", type=int, nargs="+", default=[4, 10, 50])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--out", default="inducing_ablation.csv")
    args = parser.parse_args()
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "num_inducing", "test_nll", "test_accuracy"])
        for seed in args.seeds:
            for m, row in E.run_inducing_ablation(seed, tuple(args.counts)).items():
                writer.writerow([seed, m, repr(row["test_nll"]), repr(row["test_accuracy"])])
                print(f"seed {seed} m={m}: nll {row['test_nll']:.4f} acc {row['test_accuracy']:.3f}", flush=True)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
