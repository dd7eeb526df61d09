"""Synthetic long-tailed Gaussian-mixture datasets.

Class counts follow the exponential-decay profile used for CIFAR-LT style
benchmarks: ``n_c = round(n_max * r ** (-c / (C - 1)))``.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANY, MED, FEW = "Many", "Med", "Few"
SPLITS = (MANY, MED, FEW)


@dataclass(frozen=True)
class GaussianMixtureSpec:
    C: int = 10
    p: int = 2
    n_max: int = 500
    r: float = 100.0
    radius: float = 3.0
    covariance_scale: float = 1.0
    seed: int = 0
    means: np.ndarray | None = None

    def validate(self):
        if self.C < 2:
            raise ValueError(f"need at least 2 classes, got C={self.C}")
        if self.r < 1:
            raise ValueError(f"imbalance ratio must be >= 1, got r={self.r}")
        if self.n_max < self.r:
            raise ValueError(f"n_max={self.n_max} < r={self.r}: tail class would be empty")
        if self.p < 1 or self.covariance_scale <= 0:
            raise ValueError("p must be >= 1 and covariance_scale > 0")
        if self.means is not None and np.shape(self.means) != (self.C, self.p):
            raise ValueError(f"means must have shape ({self.C}, {self.p})")

    def class_means(self) -> np.ndarray:
        """Class centres: explicit if given, else on a sphere of ``radius``."""
        if self.means is not None:
            return np.asarray(self.means, dtype=np.float64)
        rng = np.random.default_rng([self.seed, 1])
        if self.p == 2:
            # evenly spaced so no two classes coincide; the seed only rotates
            phase = rng.uniform(0.0, 2 * np.pi)
            ang = phase + 2 * np.pi * np.arange(self.C) / self.C
            return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        dirs = rng.standard_normal((self.C, self.p))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return self.radius * dirs


@dataclass
class LongTailDataset:
    X: np.ndarray
    y: np.ndarray
    class_counts: np.ndarray
    imbalance_ratio: float
    split: list[str]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    def __len__(self):
        return len(self.y)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.y, dtype="<i8").tobytes())
        return h.hexdigest()

    def subset(self, classes) -> tuple[np.ndarray, np.ndarray]:
        mask = np.isin(self.y, list(classes))
        return self.X[mask], self.y[mask]


def decay_counts(C: int, n_max: int, r: float) -> np.ndarray:
    c = np.arange(C)
    return np.round(n_max * float(r) ** (-c / (C - 1))).astype(np.int64)


def split_tags(counts) -> list[str]:
    tags = []
    for n in counts:
        if n < 1:
            raise ValueError("class counts must be >= 1")
        if n > 100:
            tags.append(MANY)
        elif n >= 20:
            tags.append(MED)
        else:
            tags.append(FEW)
    return tags


def _sample(spec: GaussianMixtureSpec, counts, stream: int):
    means = spec.class_means()
    rng = np.random.default_rng([spec.seed, stream])
    std = np.sqrt(spec.covariance_scale)
    X = np.concatenate(
        [means[c] + std * rng.standard_normal((n, spec.p)) for c, n in enumerate(counts)]
    )
    y = np.repeat(np.arange(spec.C), counts)
    return X.astype(np.float64), y.astype(np.int64)


def generate(spec: GaussianMixtureSpec) -> LongTailDataset:
    """Long-tailed training set; samples are stored class by class."""
    spec.validate()
    counts = decay_counts(spec.C, spec.n_max, spec.r)
    if counts.min() < 1:
        raise ValueError("decay profile produced an empty class")
    X, y = _sample(spec, counts, stream=0)
    return LongTailDataset(X, y, counts, counts[0] / counts[-1], split_tags(counts), spec.seed)


def generate_balanced(spec: GaussianMixtureSpec, n_per_class: int, stream: int,
                      reference: LongTailDataset | None = None) -> LongTailDataset:
    """Balanced draw from the same mixture, e.g. a held-out or test set.

    Split tags are inherited from ``reference`` (the training set), since
    Many/Med/Few are defined by training frequency.
    """
    spec.validate()
    if stream == 0:
        raise ValueError("stream 0 is reserved for the training draw")
    counts = np.full(spec.C, n_per_class, dtype=np.int64)
    X, y = _sample(spec, counts, stream=stream)
    ref = reference if reference is not None else generate(spec)
    return LongTailDataset(X, y, counts, 1.0, list(ref.split), spec.seed,
                           meta={"train_counts": ref.class_counts.tolist()})


def save_csv(ds: LongTailDataset, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for x, label in zip(ds.X, ds.y):
            w.writerow([int(label)] + [format(v, ".17g") for v in x])
    sidecar = {
        "class_counts": ds.class_counts.tolist(),
        "imbalance_ratio": float(ds.imbalance_ratio),
        "seed": ds.seed,
        "split": ds.split,
        **ds.meta,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_csv(path) -> LongTailDataset:
    path = Path(path)
    rows = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    y = rows[:, 0].astype(np.int64)
    X = np.ascontiguousarray(rows[:, 1:])
    counts = np.asarray(sidecar["class_counts"], dtype=np.int64)
    if counts.sum() != len(y):
        raise ValueError(f"{path}: sidecar counts do not match {len(y)} rows")
    meta = {k: v for k, v in sidecar.items()
            if k not in ("class_counts", "imbalance_ratio", "seed", "split")}
    return LongTailDataset(X, y, counts, sidecar["imbalance_ratio"], sidecar["split"],
                           sidecar["seed"], meta)


@dataclass
class DataBundle:
    """Training set plus the balanced held-out (quality) and test sets."""
    train: LongTailDataset
    holdout: LongTailDataset
    test: LongTailDataset

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for ds in (self.train, self.holdout, self.test):
            h.update(ds.fingerprint().encode())
        return h.hexdigest()


def make_bundle(spec: GaussianMixtureSpec, n_holdout: int = 50, n_test: int = 200) -> DataBundle:
    train = generate(spec)
    return DataBundle(
        train,
        generate_balanced(spec, n_holdout, stream=1, reference=train),
        generate_balanced(spec, n_test, stream=2, reference=train),
    )


def save_bundle(bundle: DataBundle, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_csv(bundle.train, d / "train.csv")
    save_csv(bundle.holdout, d / "holdout.csv")
    save_csv(bundle.test, d / "test.csv")


def load_bundle(directory) -> DataBundle:
    d = Path(directory)
    return DataBundle(load_csv(d / "train.csv"), load_csv(d / "holdout.csv"),
                      load_csv(d / "test.csv"))


# the 10-class, r=100, 2-D benchmark used by the ablation comparisons
BENCHMARK_RADIUS = 5.0
BENCHMARK_HOLDOUT = 200
BENCHMARK_TEST = 1000


def benchmark_spec(seed: int = 0) -> GaussianMixtureSpec:
    return GaussianMixtureSpec(C=10, p=2, n_max=500, r=100.0, radius=BENCHMARK_RADIUS,
                               covariance_scale=1.0, seed=seed)


def benchmark_bundle(seed: int = 0) -> DataBundle:
    return make_bundle(benchmark_spec(seed), BENCHMARK_HOLDOUT, BENCHMARK_TEST)
