"""Disjoint train/test splitting by per-class top-to-bottom selection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping

import numpy as np

from .datacube import GroundTruth


@dataclass(frozen=True)
class ClassCounts:
    per_class: dict[int, int]
    unlabeled: int

    @property
    def total(self) -> int:
        return sum(self.per_class.values()) + self.unlabeled


@dataclass(frozen=True, eq=False)
class Split:
    """Train and test pixels, each as (n, 2) row/col arrays in row-major scan order.

    ``train_labels``/``test_labels`` carry the ground-truth class of each pixel.
    """

    train: np.ndarray
    train_labels: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    ratios: dict[int, float]

    def __eq__(self, other):
        if not isinstance(other, Split):
            return NotImplemented
        return (
            np.array_equal(self.train, other.train)
            and np.array_equal(self.test, other.test)
            and np.array_equal(self.train_labels, other.train_labels)
            and np.array_equal(self.test_labels, other.test_labels)
        )

    def check(self) -> None:
        """Raise if train and test overlap."""
        a = {tuple(p) for p in self.train.tolist()}
        b = {tuple(p) for p in self.test.tolist()}
        if a & b:
            raise ValueError(f"{len(a & b)} pixels appear in both train and test")


def class_counts(gt: GroundTruth) -> ClassCounts:
    counts = np.bincount(gt.labels.ravel(), minlength=gt.num_classes + 1)
    return ClassCounts({c: int(counts[c]) for c in range(1, gt.num_classes + 1)}, int(counts[0]))


def train_count(ratio: float, n: int) -> int:
    """round-half-up of ratio * n, evaluated on the ratio's decimal literal."""
    return math.floor(Fraction(repr(float(ratio))) * n + Fraction(1, 2))


def split_disjoint(gt: GroundTruth, ratio: float | Mapping[int, float]) -> Split:
    """For each class take the first round(ratio * n_c) labeled pixels in row-major
    order as training pixels; the remaining labeled pixels form the test set."""
    classes = range(1, gt.num_classes + 1)
    if isinstance(ratio, Mapping):
        missing = [c for c in classes if c not in ratio]
        if missing:
            raise ValueError(f"no ratio given for classes {missing}")
        ratios = {c: float(ratio[c]) for c in classes}
    else:
        ratios = {c: float(ratio) for c in classes}
    for c, r in ratios.items():
        if not 0 < r <= 1:
            raise ValueError(f"ratio for class {c} must be in (0, 1], got {r}")

    flat = gt.labels.ravel()
    order = np.flatnonzero(flat)  # already row-major
    is_train = np.zeros(flat.shape, dtype=bool)
    for c in classes:
        idx = order[flat[order] == c]
        if len(idx) == 0:
            name = gt.class_names[c - 1] if gt.class_names else str(c)
            raise ValueError(f"class {c} ({name}) has no labeled pixels")
        is_train[idx[: train_count(ratios[c], len(idx))]] = True

    train_idx = order[is_train[order]]
    test_idx = order[~is_train[order]]
    cols = gt.cols

    def coords(idx):
        return np.stack([idx // cols, idx % cols], axis=1).astype(np.int64).reshape(-1, 2)

    return Split(
        train=coords(train_idx),
        train_labels=flat[train_idx].astype(np.int64),
        test=coords(test_idx),
        test_labels=flat[test_idx].astype(np.int64),
        ratios=ratios,
    )


# ---------------------------------------------------------------------------
# manifest


def save_split(split: Split, path) -> None:
    lines = ["train"]
    lines += [f"{r},{c},{y}" for (r, c), y in zip(split.train.tolist(), split.train_labels.tolist())]
    lines.append("test")
    lines += [f"{r},{c},{y}" for (r, c), y in zip(split.test.tolist(), split.test_labels.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_split(path) -> Split:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing split manifest {path}")
    sections: dict[str, list[tuple[int, int, int]]] = {"train": [], "test": []}
    current = None
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line in sections:
            current = line
            continue
        if current is None:
            raise ValueError(f"{path}:{lineno}: entry before a train/test header")
        try:
            r, c, y = (int(t) for t in line.split(","))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'row,col,label', got {line!r}") from None
        sections[current].append((r, c, y))

    def arrays(rows):
        a = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
        return a[:, :2].copy(), a[:, 2].copy()

    train, train_labels = arrays(sections["train"])
    test, test_labels = arrays(sections["test"])
    split = Split(train, train_labels, test, test_labels, ratios={})
    split.check()
    return split
