"""Print a quick text summary of a demo's series CSV (column ranges and means).

Usage: python3 scripts/plot_series.py runs/full/gap-1d/gap-1d.csv
"""

import sys

import numpy as np


def main(path: str) -> None:
    data = np.genfromtxt(path, delimiter=",", names=True)
    for name in data.dtype.names:
        col = data[name]
        print(f"{name:<24} min {np.nanmin(col):>12.5g}  mean {np.nanmean(col):>12.5g}  max {np.nanmax(col):>12.5g}")


if __name__ == "__main__":
    main(sys.argv[1])
