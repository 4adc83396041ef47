"""Synthetic datasets and deterministic splits.

Two 1-D regression problems (``wiggle`` and ``3-clusters``), isotropic
Gaussian blobs for classification, and an equidistant input grid used to
probe behaviour away from the training data.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import helmert

from .errors import FormatError, InvalidArgument

NOISE_VAR = 0.25
CLUSTER_INTERVALS = ((-1.0, 0.0), (1.5, 2.5), (4.0, 5.0))


@dataclass(frozen=True, eq=False)
class RegressionDataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: np.ndarray
    seed: int
    generator: str = ""
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.targets)

    def subset(self, name):
        mask = self.split == name
        return self.inputs[mask], self.targets[mask]

    @property
    def input_matrix(self):
        return self.inputs.reshape(len(self), -1)


@dataclass(frozen=True, eq=False)
class ClassificationDataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    seed: int
    n_classes: int
    generator: str = "blobs"
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, name):
        mask = self.split == name
        return self.inputs[mask], self.labels[mask]

    @property
    def input_matrix(self):
        return self.inputs.reshape(len(self), -1)


def wiggle_curve(x):
    x = np.asarray(x, dtype=float)
    return np.sin(np.pi * x) + 0.2 * np.cos(4 * np.pi * x) - 0.3 * x


def three_clusters_curve(x):
    x = np.asarray(x, dtype=float)
    return x - 0.1 * x**2 + np.cos(x * np.pi / 2)


def split_labels(n, fractions, rng):
    """Shuffle ``n`` indices and slice them into consecutive named blocks.

    ``fractions`` maps split names to ratios; the first entry absorbs the
    rounding, so every other block gets ``floor(ratio * n)`` points.
    """
    names = list(fractions)
    sizes = [math.floor(fractions[k] * n) for k in names[1:]]
    sizes.insert(0, n - sum(sizes))
    order = rng.permutation(n)
    labels = np.empty(n, dtype=object)
    start = 0
    for name, size in zip(names, sizes):
        labels[order[start:start + size]] = name
        start += size
    return labels.astype(str)


def gen_wiggle(n, seed, noise_std=math.sqrt(NOISE_VAR)):
    """Sample the ``wiggle`` problem: x ~ N(5, 2.5^2), 80/20 train/test."""
    if n < 10:
        raise InvalidArgument(f"wiggle needs n >= 10, got {n}")
    rng = np.random.default_rng(seed)
    x = rng.normal(5.0, 2.5, size=n)
    y = wiggle_curve(x) + noise_std * rng.standard_normal(n)
    split = split_labels(n, {"train": 0.8, "test": 0.2}, rng)
    return RegressionDataset(x, y, split, seed, "wiggle", {"n": n, "noise_std": noise_std})


def gen_3clusters(n, seed, noise_std=math.sqrt(NOISE_VAR)):
    """Sample ``3-clusters``: n/3 uniform points on each of three intervals."""
    if n <= 0 or n % 3:
        raise InvalidArgument(f"3-clusters needs n divisible by 3, got {n}")
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(lo, hi, size=n // 3) for lo, hi in CLUSTER_INTERVALS])
    y = three_clusters_curve(x) + noise_std * rng.standard_normal(n)
    split = split_labels(n, {"train": 0.8, "test": 0.2}, rng)
    return RegressionDataset(x, y, split, seed, "3clusters", {"n": n, "noise_std": noise_std})


def simplex_centers(k, d, sep):
    """Return ``k`` centers in ``d`` dims with pairwise distance >= ``sep``.

    A regular simplex is used when it fits (``d >= k - 1``); otherwise the
    centers are spaced along the first axis.
    """
    centers = np.zeros((k, d))
    if d >= k - 1:
        # rows of helmert(k) are orthonormal and orthogonal to the ones vector
        centers[:, : k - 1] = helmert(k).T * (sep / math.sqrt(2.0))
    else:
        centers[:, 0] = sep * np.arange(k)
    return centers


def gen_blobs(n, k, d, sep, seed, scale=1.0):
    """Isotropic Gaussian clusters with a 60/20/20 train/validation/test split."""
    if k < 2 or d < 1:
        raise InvalidArgument(f"blobs needs k >= 2 and d >= 1, got k={k}, d={d}")
    if n < k:
        raise InvalidArgument(f"blobs needs at least one point per class, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    centers = simplex_centers(k, d, sep)
    labels = np.arange(n) % k
    x = centers[labels] + scale * rng.standard_normal((n, d))
    split = split_labels(n, {"train": 0.6, "val": 0.2, "test": 0.2}, rng)
    # guarantee every class appears in the train split
    for c in range(k):
        if not np.any((labels == c) & (split == "train")):
            donor = np.flatnonzero((labels == c) & (split != "train"))[0]
            counts = np.bincount(labels[split == "train"], minlength=k)
            taker = np.flatnonzero((split == "train") & (labels == np.argmax(counts)))[0]
            split[donor], split[taker] = "train", split[donor]
    params = {"n": n, "k": k, "d": d, "sep": sep, "scale": scale}
    return ClassificationDataset(x, labels, split, seed, k, "blobs", params)


def gen_ood_grid(dataset, n_test, margin):
    """Equidistant inputs spanning the training range widened by ``margin``."""
    if n_test < 2:
        raise InvalidArgument("n_test must be >= 2")
    if margin < 0:
        raise InvalidArgument("margin must be >= 0")
    x_train, _ = dataset.subset("train")
    return np.linspace(x_train.min() - margin, x_train.max() + margin, n_test)


def interval_distance(x, intervals=CLUSTER_INTERVALS):
    """Distance from each x to the nearest of the given closed intervals."""
    x = np.asarray(x, dtype=float)
    dist = np.full(x.shape, np.inf)
    for lo, hi in intervals:
        dist = np.minimum(dist, np.maximum(0.0, np.maximum(lo - x, x - hi)))
    return dist


GENERATORS = {
    "wiggle": lambda p, seed: gen_wiggle(p.get("n", 900), seed),
    "3clusters": lambda p, seed: gen_3clusters(p.get("n", 900), seed),
    "blobs": lambda p, seed: gen_blobs(
        p.get("n", 600), p.get("k", 3), p.get("d", 2), p.get("sep", 6.0), seed, p.get("scale", 1.0)
    ),
}


def generate(name, params, seed):
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise InvalidArgument(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None
    return gen(params or {}, seed)


# -- serialization -----------------------------------------------------------

def _x_columns(d):
    return ["x"] if d == 1 else [f"x{i + 1}" for i in range(d)]


def save_dataset(dataset, path):
    """Write ``dataset`` as CSV plus a ``.json`` manifest next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = dataset.input_matrix
    is_cls = isinstance(dataset, ClassificationDataset)
    target_col = "label" if is_cls else "y"
    targets = dataset.labels if is_cls else dataset.targets
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_x_columns(x.shape[1]) + [target_col, "split"])
        for row, t, s in zip(x, targets, dataset.split):
            writer.writerow([repr(float(v)) for v in row] + [int(t) if is_cls else repr(float(t)), s])
    manifest = {
        "generator": dataset.generator,
        "params": dataset.params,
        "seed": int(dataset.seed),
        "kind": "classification" if is_cls else "regression",
        "n": len(dataset),
        "columns": _x_columns(x.shape[1]) + [target_col, "split"],
    }
    if is_cls:
        manifest["n_classes"] = int(dataset.n_classes)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path):
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    if not path.exists():
        raise FormatError(f"dataset file not found: {path}", path)
    if not manifest_path.exists():
        raise FormatError(f"dataset manifest not found: {manifest_path}", manifest_path)
    manifest = json.loads(manifest_path.read_text())
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    x = np.array([[float(r[i]) for i in xcols] for r in body]).reshape(len(body), len(xcols))
    split = np.array([r[header.index("split")] for r in body])
    if manifest["kind"] == "classification":
        labels = np.array([int(r[header.index("label")]) for r in body])
        return ClassificationDataset(
            x, labels, split, manifest["seed"], manifest["n_classes"], manifest["generator"], manifest["params"]
        )
    y = np.array([float(r[header.index("y")]) for r in body])
    inputs = x[:, 0] if x.shape[1] == 1 else x
    return RegressionDataset(inputs, y, split, manifest["seed"], manifest["generator"], manifest["params"])
