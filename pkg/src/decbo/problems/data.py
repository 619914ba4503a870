"""Dataset ingestion and heterogeneous partitioning.

Parses LIBSVM-format text into sparse binary classification datasets, splits
them into train/validation/test, and shards the training set across workers
with controlled class imbalance by dropping samples from the over-represented
class, worker by worker.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Dataset",
    "PartitionPlan",
    "LibsvmParseError",
    "PartitionError",
    "parse_libsvm",
    "write_libsvm",
    "split_dataset",
    "partition_heterogeneous",
    "partition_even",
]


class LibsvmParseError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class PartitionError(ValueError):
    def __init__(self, worker: int, message: str):
        self.worker = worker
        super().__init__(f"worker {worker}: {message}")


@dataclass(frozen=True)
class Dataset:
    """Sparse feature matrix with +-1 labels."""

    features: sp.csr_matrix
    labels: np.ndarray

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature rows and labels must align")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def positive_ratio(self) -> float:
        return float(np.mean(self.labels > 0))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx])


def parse_libsvm(source) -> Dataset:
    """Parse LIBSVM text (``label idx:val ...`` with 1-based indices).

    Any two distinct raw labels are accepted; the smaller maps to -1, the
    larger to +1. Malformed tokens, non-increasing indices within a line, and
    a third distinct label are rejected with the offending line number.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = source
    raw_labels: list[float] = []
    rows: list[list[tuple[int, float]]] = []
    seen_labels: set[float] = set()
    max_index = 0
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise LibsvmParseError(line_no, f"label {tokens[0]!r} is not numeric") from None
        seen_labels.add(label)
        if len(seen_labels) > 2:
            raise LibsvmParseError(
                line_no, f"more than two distinct labels: {sorted(seen_labels)}"
            )
        entries: list[tuple[int, float]] = []
        previous = 0
        for token in tokens[1:]:
            idx_str, _, val_str = token.partition(":")
            try:
                index = int(idx_str)
                value = float(val_str)
            except ValueError:
                raise LibsvmParseError(line_no, f"malformed feature {token!r}") from None
            if index <= previous:
                raise LibsvmParseError(
                    line_no, f"index {index} not increasing (previous {previous})"
                )
            previous = index
            entries.append((index, value))
            max_index = max(max_index, index)
        rows.append(entries)
        raw_labels.append(label)

    labels = np.array(raw_labels)
    if len(seen_labels) == 2:
        low = min(seen_labels)
        labels = np.where(labels == low, -1, 1).astype(np.int64)
    else:
        labels = np.ones(len(labels), dtype=np.int64)

    data, row_idx, col_idx = [], [], []
    for r, entries in enumerate(rows):
        for index, value in entries:
            row_idx.append(r)
            col_idx.append(index - 1)
            data.append(value)
    features = sp.csr_matrix(
        (data, (row_idx, col_idx)), shape=(len(rows), max_index), dtype=float
    )
    return Dataset(features, labels)


def write_libsvm(dataset: Dataset, path) -> None:
    """Write a dataset back out as LIBSVM text (1-based, increasing indices)."""
    lines = []
    csr = dataset.features.tocsr()
    for r in range(len(dataset)):
        start, end = csr.indptr[r], csr.indptr[r + 1]
        cols = csr.indices[start:end]
        vals = csr.data[start:end]
        order = np.argsort(cols)
        feats = " ".join(f"{cols[i] + 1}:{vals[i]!r}" for i in order)
        label = int(dataset.labels[r])
        lines.append(f"{label} {feats}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


def split_dataset(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Split into (train, validation, test): 10% test, then 70% of the rest train.

    Sizes are deterministic (floor for test, floor for train) and the shuffle
    is seeded, so the same seed always yields the same split.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = n // 10
    n_train = (7 * (n - n_test)) // 10
    test = dataset.subset(perm[:n_test])
    train = dataset.subset(perm[n_test : n_test + n_train])
    validation = dataset.subset(perm[n_test + n_train :])
    return train, validation, test


@dataclass(frozen=True)
class PartitionPlan:
    """Target positive-class ratios, one per worker."""

    num_workers: int
    ratios: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        ratios = tuple(float(r) for r in self.ratios)
        if len(ratios) != self.num_workers:
            raise ValueError(
                f"need {self.num_workers} ratios, got {len(ratios)}"
            )
        if any(not 0.0 < r < 1.0 for r in ratios):
            raise ValueError("ratios must lie strictly inside (0, 1)")
        object.__setattr__(self, "ratios", ratios)


def partition_even(dataset: Dataset, num_workers: int, seed: int = 0) -> list[Dataset]:
    """IID shard: seeded shuffle then near-equal contiguous chunks."""
    if len(dataset) < num_workers:
        raise ValueError(f"cannot shard {len(dataset)} samples over {num_workers} workers")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    return [dataset.subset(chunk) for chunk in np.array_split(perm, num_workers)]


def partition_heterogeneous(train: Dataset, plan: PartitionPlan) -> list[Dataset]:
    """Shard the training set and skew each shard to its target positive ratio.

    Each shard drops samples from whichever class is over-represented relative
    to its target, from the end of the shard's shuffled order, until the ratio
    first crosses the target. The kept positive count then satisfies
    ``|kept_pos - target * kept_total| < 1``. Raises ``PartitionError`` when a
    shard cannot hit that band while keeping at least one sample per class.
    """
    labels = train.labels
    if not ((labels > 0).any() and (labels < 0).any()):
        raise ValueError("training set must contain both classes")
    rng = np.random.default_rng(plan.seed)
    perm = rng.permutation(len(train))
    shards = np.array_split(perm, plan.num_workers)
    out = []
    for worker, (shard, target) in enumerate(zip(shards, plan.ratios)):
        pos = shard[labels[shard] > 0]
        neg = shard[labels[shard] < 0]
        if len(pos) == 0 or len(neg) == 0:
            raise PartitionError(worker, "shard is missing one class entirely")
        ratio = len(pos) / len(shard)
        if ratio > target:
            keep_pos = int(np.floor(target * len(neg) / (1.0 - target) + 1e-9))
            keep_pos = max(keep_pos, 1)
            pos = pos[:keep_pos]
        elif ratio < target:
            keep_neg = int(np.floor(len(pos) * (1.0 - target) / target + 1e-9))
            keep_neg = max(keep_neg, 1)
            neg = neg[:keep_neg]
        total = len(pos) + len(neg)
        if abs(len(pos) - target * total) > 1.0:
            raise PartitionError(
                worker,
                f"cannot reach ratio {target} with >=1 sample per class "
                f"(best: {len(pos)}/{total})",
            )
        kept = np.sort(np.concatenate([pos, neg]))
        out.append(train.subset(kept))
    return out
