"""Synthetic generators for the experiments, plus CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> Scaler:
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    @classmethod
    def identity(cls, dim: int) -> Scaler:
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    split: np.ndarray
    provenance: dict
    treatment: np.ndarray | None = None
    cate: np.ndarray | None = None
    mu0: np.ndarray | None = None
    mu1: np.ndarray | None = None
    scaler: Scaler | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if len(self.X) != len(self.Y) or len(self.split) != len(self.X):
            raise ValueError("X, Y and split must have the same number of rows")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ValueError("dataset contains missing or non-finite values")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.Y, axis=1)

    def subset(self, name: str) -> Dataset:
        mask = self.split == name
        pick = lambda a: None if a is None else a[mask]  # noqa: E731
        return Dataset(
            self.X[mask],
            self.Y[mask],
            self.split[mask],
            dict(self.provenance, subset=name),
            pick(self.treatment),
            pick(self.cate),
            pick(self.mu0),
            pick(self.mu1),
            self.scaler,
        )


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _all_train(n: int) -> np.ndarray:
    return np.full(n, "train", dtype=object)


def two_moons_arcs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free two moons: class 0 on the upper arc, class 1 on the lower."""
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = np.linspace(0, np.pi, n0)
    t1 = np.linspace(0, np.pi, n1)
    x = np.vstack([
        np.column_stack([np.cos(t0), np.sin(t0)]),
        np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)]),
    ])
    y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    return x, y


def gen_two_moons(n: int = 200, noise_std: float = 0.1, seed: int = 0) -> Dataset:
    if n < 2:
        raise ValueError("two moons needs n >= 2")
    rng = np.random.default_rng(seed)
    raw, labels = two_moons_arcs(n)
    raw = raw + noise_std * rng.standard_normal(raw.shape)
    perm = rng.permutation(n)
    raw, labels = raw[perm], labels[perm]
    scaler = Scaler.fit(raw)
    return Dataset(
        scaler.transform(raw),
        one_hot(labels, 2),
        _all_train(n),
        {"generator": "two_moons", "n": n, "noise_std": noise_std, "seed": seed},
        scaler=scaler,
    )


def gen_gap_regression(n: int = 1000, seed: int = 0, noise_std: float = 0.1) -> Dataset:
    """1D regression with inputs on [-6, -3] U [3, 6] and targets sin(2x) + noise."""
    if n < 2:
        raise ValueError("gap regression needs n >= 2")
    rng = np.random.default_rng(seed)
    side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    x = side * rng.uniform(3.0, 6.0, size=n)
    y = np.sin(2.0 * x) + noise_std * rng.standard_normal(n)
    return Dataset(
        x[:, None],
        y[:, None],
        _all_train(n),
        {"generator": "gap_regression", "n": n, "noise_std": noise_std, "seed": seed},
        scaler=Scaler.identity(1),
    )


BLOB_MEANS = np.array([[-1.5, 0.0], [1.5, 0.0]])
BLOB_STD = 0.5
GRID_BOX = (-6.0, 6.0)
GRID_RES = 25
STAR_POINT = np.array([0.0, 4.5])


def blob_log_density(x) -> np.ndarray:
    """Log density of the equal-weight isotropic Gaussian blob mixture."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    var = BLOB_STD**2
    comps = [
        -0.5 * np.sum((x - mu) ** 2, axis=1) / var - math.log(2 * math.pi * var) for mu in BLOB_MEANS
    ]
    return np.logaddexp(*comps) - math.log(2.0)


def gen_blobs_grid(seed: int = 0, n_per_blob: int = 100) -> Dataset:
    """Two labelled blobs, with the evaluation grid and star point in ``extras``."""
    rng = np.random.default_rng(seed)
    x = np.vstack([mu + BLOB_STD * rng.standard_normal((n_per_blob, 2)) for mu in BLOB_MEANS])
    labels = np.repeat([0, 1], n_per_blob)
    perm = rng.permutation(len(x))
    x, labels = x[perm], labels[perm]
    axis = np.linspace(*GRID_BOX, GRID_RES)
    grid = np.array([[a, b] for a in axis for b in axis])
    return Dataset(
        x,
        one_hot(labels, 2),
        _all_train(len(x)),
        {"generator": "blobs_grid", "n_per_blob": n_per_blob, "seed": seed,
         "means": BLOB_MEANS.tolist(), "std": BLOB_STD},
        scaler=Scaler.identity(2),
        extras={"grid": grid, "grid_log_density": blob_log_density(grid), "star": STAR_POINT.copy()},
    )


CATE_DIM = 8
CATE_NOISE = 0.5


def cate_propensity(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-(3.0 * x[:, 0] + 1.5 * x[:, 1])))


def cate_surfaces(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Untreated response and treatment effect for covariates ``x``."""
    mu0 = 0.5 * x[:, 1] + np.sin(x[:, 2]) + 0.25 * x[:, 3] ** 2 + x[:, 0]
    tau = 2.0 + 1.5 * x[:, 0] + np.sin(2.0 * x[:, 1])
    return mu0, tau


def split_tags(n: int, rng: np.random.Generator, fractions=(0.63, 0.27, 0.10)) -> np.ndarray:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tags = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val), dtype=object)
    return tags[rng.permutation(n)]


def gen_synthetic_cate(n: int = 750, seed: int = 0, zero_effect: bool = False) -> Dataset:
    """Observational treatment data with known effect and limited-overlap regions.

    Covariates are 8-dimensional standard normal, treatment is assigned with
    propensity ``sigmoid(3 x0 + 1.5 x1)``, and ``y = mu0 + t * tau + N(0, 0.5^2)``.
    """
    if n < 10:
        raise ValueError("synthetic CATE needs n >= 10")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, CATE_DIM))
    t = (rng.random(n) < cate_propensity(x)).astype(np.float64)
    mu0, tau = cate_surfaces(x)
    if zero_effect:
        tau = np.zeros(n)
    y = mu0 + t * tau + CATE_NOISE * rng.standard_normal(n)
    return Dataset(
        x,
        y[:, None],
        split_tags(n, rng),
        {"generator": "synthetic_cate", "n": n, "seed": seed, "zero_effect": zero_effect},
        treatment=t,
        cate=tau,
        mu0=mu0,
        mu1=mu0 + tau,
        scaler=Scaler.identity(CATE_DIM),
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


class CsvError(ValueError):
    pass


@dataclass
class CsvSchema:
    features: list[str]
    targets: list[str]
    treatment: str | None = None
    cate: str | None = None
    split: str | None = None

    def columns(self) -> list[str]:
        cols = list(self.features) + list(self.targets)
        cols += [c for c in (self.treatment, self.cate) if c]
        return cols


def load_csv(path, schema: CsvSchema) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise CsvError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        for col in schema.columns() + ([schema.split] if schema.split else []):
            if col not in header:
                raise CsvError(f"missing column {col!r} in {path}")
        idx = {name: i for i, name in enumerate(header)}
        numeric = schema.columns()
        rows, splits = [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvError(f"row {row_no}: expected {len(header)} cells, got {len(row)}")
            try:
                values = [float(row[idx[c]]) for c in numeric]
            except ValueError:
                raise CsvError(f"row {row_no}: non-numeric cell") from None
            if not all(math.isfinite(v) for v in values):
                raise CsvError(f"row {row_no}: non-finite value")
            rows.append(values)
            splits.append(row[idx[schema.split]].strip() if schema.split else "train")
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(numeric))
    nf, nt = len(schema.features), len(schema.targets)
    col = nf + nt
    treatment = cate = None
    if schema.treatment:
        treatment = data[:, col]
        col += 1
    if schema.cate:
        cate = data[:, col]
    return Dataset(
        data[:, :nf],
        data[:, nf : nf + nt],
        np.array(splits, dtype=object),
        {"generator": "csv", "path": str(path)},
        treatment=treatment,
        cate=cate,
    )


def save_csv(dataset: Dataset, path, schema: CsvSchema) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = schema.columns() + ([schema.split] if schema.split else [])
        writer.writerow(header)
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.X[i]] + [repr(float(v)) for v in dataset.Y[i]]
            if schema.treatment:
                row.append(repr(float(dataset.treatment[i])))
            if schema.cate:
                row.append(repr(float(dataset.cate[i])))
            if schema.split:
                row.append(str(dataset.split[i]))
            writer.writerow(row)
