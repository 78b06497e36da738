"""Datasets, CSV ingestion and Dirichlet non-IID partitioning."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IngestionError


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix [n, d_in] plus integer labels in ``[0, num_classes)``."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_names: tuple = field(default=())

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] != labels.shape[0]:
            raise ConfigError(f"features {feats.shape} do not match {labels.shape[0]} labels")
        if feats.shape[0] < 1:
            raise ConfigError("dataset must hold at least one sample")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def class_centers(num_classes: int, input_dim: int, class_separation: float) -> np.ndarray:
    """Signed one-hot directions: class c sits on axis ``c mod d`` with sign ``(-1)**(c // d)``."""
    if num_classes > 2 * input_dim:
        raise ConfigError(
            f"num_classes={num_classes} needs input_dim >= {-(-num_classes // 2)} for distinct centers")
    centers = np.zeros((num_classes, input_dim))
    for c in range(num_classes):
        centers[c, c % input_dim] = (-1.0) ** (c // input_dim)
    return centers * class_separation


def generate_synthetic(num_classes: int, per_class: int, input_dim: int,
                       class_separation: float, seed: int) -> LabeledDataset:
    """Gaussian mixture with unit isotropic noise around :func:`class_centers`."""
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    if input_dim < 1:
        raise ConfigError("input_dim must be >= 1")
    if not class_separation > 0:
        raise ConfigError("class_separation must be > 0")
    rng = np.random.default_rng(seed)
    centers = class_centers(num_classes, input_dim, class_separation)
    labels = np.repeat(np.arange(num_classes), per_class)
    features = centers[labels] + rng.standard_normal((labels.size, input_dim))
    order = rng.permutation(labels.size)
    return LabeledDataset(features[order], labels[order], num_classes)


def ingest_csv(path, label_column) -> LabeledDataset:
    """Read a comma-separated file into a dataset.

    A header row is detected when ``label_column`` is a string or when the
    first row holds a non-numeric cell outside the label column.  Labels are
    remapped to ``0..C-1`` in order of first appearance.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise IngestionError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(cell.strip() for cell in r)]
    if not rows:
        raise IngestionError("empty dataset", row=0)

    header = None
    if isinstance(label_column, str):
        header = [h.strip() for h in rows[0]]
        if label_column not in header:
            raise IngestionError(f"label column {label_column!r} not in header", row=1)
        label_idx = header.index(label_column)
        body_start = 1
    else:
        label_idx = int(label_column)
        body_start = 1 if _looks_like_header(rows[0], label_idx) else 0
    body = rows[body_start:]
    if not body:
        raise IngestionError("empty dataset", row=body_start)

    width = len(rows[0])
    if not 0 <= label_idx < width:
        raise IngestionError(f"label column index {label_idx} out of range", column=label_idx)
    mapping: dict[str, int] = {}
    features, labels = [], []
    for r, row in enumerate(body, start=body_start + 1):
        if len(row) != width:
            raise IngestionError(f"expected {width} cells, found {len(row)}", row=r)
        vec = []
        for c, cell in enumerate(row):
            if c == label_idx:
                continue
            try:
                vec.append(float(cell))
            except ValueError:
                raise IngestionError(f"non-numeric feature cell {cell!r}", row=r, column=c) from None
        key = row[label_idx].strip()
        labels.append(mapping.setdefault(key, len(mapping)))
        features.append(vec)
    if len(mapping) < 1:
        raise IngestionError("empty dataset")
    names = tuple(mapping)
    return LabeledDataset(np.array(features, dtype=np.float64).reshape(len(body), width - 1),
                          np.array(labels), max(len(mapping), 1), names)


def _looks_like_header(row, label_idx) -> bool:
    for c, cell in enumerate(row):
        if c == label_idx:
            continue
        try:
            float(cell)
        except ValueError:
            return True
    return False


@dataclass(frozen=True)
class PartitionPlan:
    client_indices: tuple
    alpha: float
    seed: int

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    def histograms(self, data: LabeledDataset) -> np.ndarray:
        """Per-client class counts, shape [K, C]."""
        return np.stack([np.bincount(data.labels[np.asarray(ix, dtype=np.int64)],
                                     minlength=data.num_classes)
                         for ix in self.client_indices])


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` proportional to ``weights``.

    Leftover units go to the largest fractional parts; ties favour the lower index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    s = weights.sum()
    if not s > 0:
        weights = np.ones_like(weights)
        s = weights.sum()
    exact = weights / s * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(len(exact)), -(exact - counts)))
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(data: LabeledDataset, num_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Split sample indices across clients with per-class Dir(alpha) proportions."""
    K = int(num_clients)
    if K < 2:
        raise ConfigError("num_clients must be >= 2")
    if not alpha > 0:
        raise ConfigError("alpha must be > 0")
    if K > len(data):
        raise ConfigError(f"num_clients={K} exceeds dataset size {len(data)}")

    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(K)]
    for c in range(data.num_classes):
        members = np.flatnonzero(data.labels == c)
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        q = rng.dirichlet(np.full(K, float(alpha)))
        counts = largest_remainder(q, members.size)
        start = 0
        for k in range(K):
            buckets[k].extend(members[start:start + counts[k]].tolist())
            start += counts[k]

    for k in range(K):
        while not buckets[k]:
            donor = max(range(K), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())

    return PartitionPlan(tuple(tuple(sorted(b)) for b in buckets), float(alpha), int(seed))


def train_test_split(indices, seed: int, client_id: int, test_fraction: float = 0.2):
    """Shuffle one client's indices and split off a test share.

    At least one test sample is kept whenever the client holds two or more;
    a single-sample client uses that sample for both roles.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 1:
        return idx, idx
    rng = np.random.default_rng([int(seed), int(client_id), 0x7E57])
    idx = idx[rng.permutation(idx.size)]
    n_test = min(max(1, int(round(test_fraction * idx.size))), idx.size - 1)
    return np.sort(idx[n_test:]), np.sort(idx[:n_test])


def label_entropy(histogram) -> float:
    """Shannon entropy (nats) of one client's label distribution."""
    h = np.asarray(histogram, dtype=np.float64)
    p = h[h > 0] / h.sum()
    return float(-(p * np.log(p)).sum())
