"""Column-typed sample matrix shared by every stage of the pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    discrete: bool = False
    categories: tuple = ()  # original labels, index == code

    @property
    def cardinality(self):
        return len(self.categories) if self.discrete else 0


@dataclass(frozen=True, eq=False)
class DataTable:
    """m observations x k variables, float64, NaN marks a missing cell.

    Discrete columns hold integer codes 0..cardinality-1.
    """

    values: np.ndarray
    columns: tuple[ColumnInfo, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim != 2 or vals.shape[1] != len(self.columns):
            raise ValueError("values must be m x k with one ColumnInfo per column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    @classmethod
    def from_arrays(cls, values, names, discrete=(), cardinalities=None, meta=None):
        """Build a table; ``discrete`` lists names of coded columns."""
        values = np.asarray(values, dtype=np.float64)
        cols = []
        cardinalities = cardinalities or {}
        for j, name in enumerate(names):
            if name in discrete:
                card = cardinalities.get(name)
                if card is None:
                    col = values[:, j]
                    card = int(np.nanmax(col)) + 1 if np.isfinite(col).any() else 1
                cols.append(ColumnInfo(name, True, tuple(range(card))))
            else:
                cols.append(ColumnInfo(name))
        return cls(values, tuple(cols), dict(meta or {}))

    @property
    def names(self):
        return [c.name for c in self.columns]

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def n_cols(self):
        return self.values.shape[1]

    def index(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown variable {name!r}") from None

    def column(self, name):
        return self.values[:, self.index(name)]

    def info(self, name):
        return self.columns[self.index(name)]

    def is_discrete(self, name):
        return self.info(name).discrete

    def cardinality(self, name):
        return self.info(name).cardinality

    def select(self, names):
        return self.values[:, [self.index(n) for n in names]]

    def with_values(self, values, meta=None):
        return DataTable(values, self.columns, dict(self.meta if meta is None else meta))

    def take_rows(self, rows):
        return self.with_values(self.values[np.asarray(rows)])

    def reorder_columns(self, names):
        idx = [self.index(n) for n in names]
        return DataTable(self.values[:, idx], tuple(self.columns[i] for i in idx), dict(self.meta))

    def minmax_normalized(self):
        """Continuous columns mapped to [0, 1]; discrete codes untouched."""
        vals = self.values.copy()
        for j, col in enumerate(self.columns):
            if col.discrete:
                continue
            x = vals[:, j]
            lo, hi = np.nanmin(x), np.nanmax(x)
            vals[:, j] = (x - lo) / (hi - lo) if hi > lo else 0.0 * x
        return self.with_values(vals, {**self.meta, "normalized": "minmax"})
