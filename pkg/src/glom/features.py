"""Feature-matrix CSV files: ``id,label,f0..f{D-1}`` with 17 significant digits."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, FormatError
from .nn import FEATURE_DIM


@dataclass(eq=False)
class FeatureMatrix:
    ids: list[str]
    labels: np.ndarray  # class indices into class_names
    features: np.ndarray  # (N, D) float64
    class_names: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if not (len(self.ids) == len(self.labels) == len(self.features)):
            raise DimensionError("ids, labels and feature rows differ in count")

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FeatureMatrix)
            and self.ids == other.ids
            and self.class_names == other.class_names
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )

    def subset(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureMatrix([self.ids[i] for i in idx], self.labels[idx], self.features[idx], list(self.class_names))


def write_features(fm: FeatureMatrix, path) -> None:
    """Labels are written as class names so the file is self-describing."""
    d = fm.features.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"f{j}" for j in range(d)])
        for sid, lab, row in zip(fm.ids, fm.labels, fm.features):
            w.writerow([sid, fm.class_names[lab]] + ["%.17g" % v for v in row])


def read_features(path, dim: int | None = FEATURE_DIM, class_names=None) -> FeatureMatrix:
    """Parse a feature CSV.  ``dim=None`` accepts any width given by the header.

    Class vocabulary defaults to the sorted set of label names present.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty feature file")
    header = rows[0]
    width = len(header) - 2
    expected = ["id", "label"] + [f"f{j}" for j in range(width)]
    if header != expected:
        raise FormatError(f"{path}:1: header must be id,label,f0..f{width - 1}")
    if dim is not None and width != dim:
        raise FormatError(f"{path}:1: {width} feature columns, expected {dim}")
    if len(rows) == 1:
        raise DataError(f"{path}: feature file has a header but no rows")
    ids, names, values = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width + 2:
            raise FormatError(f"{path}:{lineno}: {len(row) - 2} feature columns, expected {width}")
        try:
            values.append([float(v) for v in row[2:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        ids.append(row[0])
        names.append(row[1])
    vocab = sorted(set(names)) if class_names is None else list(class_names)
    index = {n: i for i, n in enumerate(vocab)}
    try:
        labels = [index[n] for n in names]
    except KeyError as exc:
        raise DataError(f"{path}: label {exc.args[0]!r} not in class vocabulary {vocab}") from None
    return FeatureMatrix(ids, np.array(labels), np.array(values), vocab)
