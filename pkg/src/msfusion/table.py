"""Named numeric matrix shared by the encoder, feature extraction and models."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class FeatureTable:
    matrix: np.ndarray
    column_names: tuple
    row_ids: tuple

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            m = m.reshape(len(self.row_ids), len(self.column_names))
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "column_names", tuple(self.column_names))
        object.__setattr__(self, "row_ids", tuple(self.row_ids))
        if m.shape != (len(self.row_ids), len(self.column_names)):
            raise ValueError(f"matrix shape {m.shape} != ({len(self.row_ids)}, {len(self.column_names)})")
        if len(set(self.column_names)) != len(self.column_names):
            raise ValueError("column names must be unique")
        if np.isnan(m).any():
            raise ValueError("FeatureTable may not contain NaN")

    @property
    def shape(self):
        return self.matrix.shape

    def columns(self, names):
        idx = [self.column_names.index(n) for n in names]
        return FeatureTable(self.matrix[:, idx], tuple(names), self.row_ids)

    def take_columns(self, indices):
        indices = list(indices)
        return FeatureTable(self.matrix[:, indices], tuple(self.column_names[i] for i in indices), self.row_ids)

    def rows(self, ids):
        pos = {r: i for i, r in enumerate(self.row_ids)}
        idx = [pos[r] for r in ids]
        return FeatureTable(self.matrix[idx], self.column_names, tuple(ids))

    def take_rows(self, indices):
        indices = list(indices)
        return FeatureTable(self.matrix[indices], self.column_names, tuple(self.row_ids[i] for i in indices))

    def hstack(self, other):
        if other.row_ids != self.row_ids:
            raise ValueError("row ids differ")
        return FeatureTable(
            np.hstack([self.matrix, other.matrix]), self.column_names + other.column_names, self.row_ids
        )

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("patient_id", *self.column_names))
            for rid, row in zip(self.row_ids, self.matrix.tolist()):
                w.writerow([rid, *map(repr, row)])
        return path

    @classmethod
    def from_csv(cls, path):
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            ids, rows = [], []
            for row in reader:
                ids.append(row[0])
                rows.append([float(v) for v in row[1:]])
        matrix = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
        return cls(matrix, tuple(header[1:]), tuple(ids))
