"""Dataset loading, categorical encoding, standardization and few-shot splits."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

ENCODINGS = ("raw", "ordered", "onehot")

STD_FLOOR = 1e-8


class DataError(ValueError):
    """Raised for malformed datasets, schemas or encodings."""


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "categories", tuple(str(c) for c in self.categories))
        if self.kind == CATEGORICAL:
            if len(set(self.categories)) < 2:
                raise DataError(f"column {self.name!r}: categorical columns need >= 2 categories")
            if len(set(self.categories)) != len(self.categories):
                raise DataError(f"column {self.name!r}: duplicate categories")
        elif self.categories:
            raise DataError(f"column {self.name!r}: continuous columns take no categories")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.categories:
            out["categories"] = list(self.categories)
        return out


def _check_unique_names(schema: Sequence[ColumnSchema]) -> None:
    names = [c.name for c in schema]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise DataError(f"duplicate column names in schema: {dupes}")


def load_schema(path: str | Path) -> tuple[list[ColumnSchema], str]:
    """Read a schema JSON file; returns ``(columns, target_name)``."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        target = raw["target"]
        cols = [
            ColumnSchema(c["name"], c["kind"], tuple(c.get("categories", ())))
            for c in raw["columns"]
        ]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed schema ({exc})") from exc
    _check_unique_names(cols)
    return cols, target


@dataclass(frozen=True, eq=False)
class DatasetTable:
    """Schema-typed columns plus a binary target.

    Continuous columns are stored as float arrays, categorical columns as
    object arrays of labels.
    """

    schema: tuple[ColumnSchema, ...]
    columns: Mapping[str, np.ndarray]
    target: np.ndarray
    target_name: str = "target"

    def __post_init__(self):
        _check_unique_names(self.schema)
        n = len(self.target)
        for col in self.schema:
            if col.name not in self.columns:
                raise DataError(f"missing column {col.name!r}")
            if len(self.columns[col.name]) != n:
                raise DataError(f"column {col.name!r} has the wrong length")
        if not set(np.unique(self.target)) <= {0, 1}:
            raise DataError("target must be binary 0/1")
        for arr in self.columns.values():
            arr.setflags(write=False)
        self.target.setflags(write=False)

    def __len__(self) -> int:
        return len(self.target)

    @property
    def n_features(self) -> int:
        return len(self.schema)

    def column(self, name: str) -> ColumnSchema:
        for col in self.schema:
            if col.name == name:
                return col
        raise KeyError(name)

    def row(self, i: int) -> dict:
        return {c.name: self.columns[c.name][i] for c in self.schema}

    def subset(self, indices: Iterable[int]) -> "DatasetTable":
        idx = np.asarray(list(indices), dtype=np.int64)
        return DatasetTable(
            self.schema,
            {k: v[idx] for k, v in self.columns.items()},
            self.target[idx],
            self.target_name,
        )


def _parse_target(value: str, where: str) -> int:
    v = value.strip()
    try:
        num = float(v)
    except ValueError:
        raise DataError(f"{where}: non-binary target {value!r}") from None
    if num not in (0.0, 1.0):
        raise DataError(f"{where}: non-binary target {value!r}")
    return int(num)


def load_csv(path: str | Path, schema: Sequence[ColumnSchema], target_name: str) -> DatasetTable:
    """Parse a comma-separated file with a header row against ``schema``.

    Missing cells, unknown categories and non-binary targets are rejected
    rather than repaired.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    schema = tuple(schema)
    _check_unique_names(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]

    expected = {c.name for c in schema} | {target_name}
    if set(header) != expected or len(header) != len(expected):
        raise DataError(
            f"{path}: header {header} does not match schema columns + target {sorted(expected)}"
        )
    pos = {h: i for i, h in enumerate(header)}

    values: dict[str, list] = {c.name: [] for c in schema}
    target = []
    for lineno, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(r)}")
        for col in schema:
            cell = r[pos[col.name]].strip()
            if cell == "":
                raise DataError(f"{path}:{lineno}: missing value in column {col.name!r}")
            if col.is_categorical:
                if cell not in col.categories:
                    raise DataError(
                        f"{path}:{lineno}: unknown category {cell!r} for column {col.name!r}"
                    )
                values[col.name].append(cell)
            else:
                try:
                    num = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: non-numeric value {cell!r} in column {col.name!r}"
                    ) from None
                if not math.isfinite(num):
                    raise DataError(f"{path}:{lineno}: non-finite value in column {col.name!r}")
                values[col.name].append(num)
        cell = r[pos[target_name]]
        if cell.strip() == "":
            raise DataError(f"{path}:{lineno}: missing target")
        target.append(_parse_target(cell, f"{path}:{lineno}"))

    columns = {
        c.name: np.array(values[c.name], dtype=object if c.is_categorical else np.float64)
        for c in schema
    }
    y = np.array(target, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise DataError(f"{path}: target contains a single class")
    return DatasetTable(schema, columns, y, target_name)


def load_dataset(csv_path: str | Path, schema_path: str | Path) -> DatasetTable:
    cols, target = load_schema(schema_path)
    return load_csv(csv_path, cols, target)


# --- encoding -----------------------------------------------------------------


def ordinal_encode(values: Sequence[str], ordering: Sequence[str]) -> np.ndarray:
    """Map each label to its 0-based position in ``ordering``."""
    ordering = list(ordering)
    if len(set(ordering)) != len(ordering):
        raise DataError(f"ordering has duplicate entries: {ordering}")
    rank = {c: k for k, c in enumerate(ordering)}
    missing = sorted({str(v) for v in values} - rank.keys())
    if missing:
        raise DataError(f"ordering is missing categories {missing}")
    return np.array([rank[v] for v in values], dtype=np.int64)


def one_hot_encode(values: Sequence[str], categories: Sequence[str]) -> np.ndarray:
    """Indicator matrix of shape ``(len(values), len(categories))``."""
    cats = list(categories)
    index = {c: k for k, c in enumerate(cats)}
    out = np.zeros((len(values), len(cats)), dtype=np.float64)
    for i, v in enumerate(values):
        try:
            out[i, index[v]] = 1.0
        except KeyError:
            raise DataError(f"unknown category {v!r}; expected one of {cats}") from None
    return out


ORDINAL = "ordinal"
ONEHOT = "onehot"


@dataclass(frozen=True)
class EncodedColumn:
    """One column of the design matrix and where it came from.

    For ordinal columns ``categories`` is the rank -> label table; for one-hot
    columns it holds the single category the indicator stands for.
    """

    name: str
    source: str
    kind: str  # continuous | ordinal | onehot
    categories: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "source": self.source,
            "kind": self.kind,
            "categories": list(self.categories),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "EncodedColumn":
        return cls(obj["name"], obj["source"], obj["kind"], tuple(obj.get("categories", ())))

    def decode(self, rank: int) -> str:
        if self.kind != ORDINAL:
            raise DataError(f"{self.name} is not ordinal")
        return self.categories[rank]


@dataclass(frozen=True)
class Standardizer:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def to_json(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Standardizer":
        return cls(
            tuple(obj["names"]),
            np.asarray(obj["mean"], dtype=np.float64),
            np.asarray(obj["std"], dtype=np.float64),
        )


@dataclass(frozen=True, eq=False)
class EncodedMatrix:
    values: np.ndarray
    columns: tuple[EncodedColumn, ...]
    stats: Standardizer | None = None

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise DataError("values shape does not match column map")
        self.values.setflags(write=False)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def index_of(self, name: str) -> int:
        for j, c in enumerate(self.columns):
            if c.name == name:
                return j
        raise KeyError(name)

    def rows(self, indices) -> "EncodedMatrix":
        return EncodedMatrix(self.values[np.asarray(indices, dtype=np.int64)], self.columns, self.stats)


def column_layout(
    schema: Sequence[ColumnSchema],
    encoding: str,
    orderings: Mapping[str, Sequence[str]] | None = None,
) -> tuple[EncodedColumn, ...]:
    """Work out the encoded column map for ``schema`` under ``encoding``.

    ``raw`` ranks categories in schema order, ``ordered`` uses the supplied
    ``orderings`` (one per categorical column), ``onehot`` expands each
    categorical column into indicators.
    """
    if encoding not in ENCODINGS:
        raise DataError(f"unknown encoding {encoding!r}; expected one of {ENCODINGS}")
    orderings = orderings or {}
    out: list[EncodedColumn] = []
    for col in schema:
        if not col.is_categorical:
            out.append(EncodedColumn(col.name, col.name, CONTINUOUS))
        elif encoding == "onehot":
            out.extend(
                EncodedColumn(f"{col.name}={c}", col.name, ONEHOT, (c,)) for c in col.categories
            )
        elif encoding == "raw":
            out.append(EncodedColumn(col.name, col.name, ORDINAL, col.categories))
        else:
            if col.name not in orderings:
                raise DataError(f"ordered encoding needs an ordering for column {col.name!r}")
            order = tuple(orderings[col.name])
            if sorted(order) != sorted(col.categories):
                raise DataError(
                    f"ordering for {col.name!r} is not a permutation of {list(col.categories)}"
                )
            out.append(EncodedColumn(col.name, col.name, ORDINAL, order))
    return tuple(out)


def encode_with_layout(table: DatasetTable, layout: Sequence[EncodedColumn]) -> EncodedMatrix:
    """Encode ``table`` into an unstandardized matrix following ``layout``."""
    n = len(table)
    values = np.empty((n, len(layout)), dtype=np.float64)
    onehot_cache: dict[str, np.ndarray] = {}
    for j, ec in enumerate(layout):
        if ec.source not in table.columns:
            raise DataError(f"table has no column {ec.source!r}")
        src = table.columns[ec.source]
        if ec.kind == CONTINUOUS:
            values[:, j] = src
        elif ec.kind == ORDINAL:
            values[:, j] = ordinal_encode(src, ec.categories)
        elif ec.kind == ONEHOT:
            if ec.source not in onehot_cache:
                cats = table.column(ec.source).categories
                onehot_cache[ec.source] = one_hot_encode(src, cats)
            cats = table.column(ec.source).categories
            values[:, j] = onehot_cache[ec.source][:, cats.index(ec.categories[0])]
        else:
            raise DataError(f"unknown encoded column kind {ec.kind!r}")
    return EncodedMatrix(values, tuple(layout))


def encode_table(
    table: DatasetTable,
    encoding: str,
    orderings: Mapping[str, Sequence[str]] | None = None,
) -> EncodedMatrix:
    return encode_with_layout(table, column_layout(table.schema, encoding, orderings))


def fit_standardizer(matrix: EncodedMatrix, rows: Sequence[int] | np.ndarray) -> Standardizer:
    """Per-column mean and population std over ``rows``.

    One-hot indicator columns are left on their 0/1 scale (mean 0, std 1).
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise DataError("cannot fit a standardizer on an empty row set")
    sub = matrix.values[rows]
    mean = sub.mean(axis=0)
    std = np.maximum(sub.std(axis=0), STD_FLOOR)
    for j, ec in enumerate(matrix.columns):
        if ec.kind == ONEHOT:
            mean[j], std[j] = 0.0, 1.0
    return Standardizer(matrix.names, mean, std)


def apply_standardizer(matrix: EncodedMatrix, stats: Standardizer) -> EncodedMatrix:
    if tuple(stats.names) != matrix.names:
        raise DataError("standardizer was fitted on a different column layout")
    values = (matrix.values - stats.mean) / stats.std
    return EncodedMatrix(values, matrix.columns, stats)


# --- few-shot splits ----------------------------------------------------------


@dataclass(frozen=True)
class ShotSplit:
    n_shots: int
    seed: int
    train_indices: np.ndarray = field(repr=False)
    test_indices: np.ndarray = field(repr=False)

    def to_json(self) -> dict:
        return {
            "n": self.n_shots,
            "seed": self.seed,
            "train": self.train_indices.tolist(),
            "test": self.test_indices.tolist(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ShotSplit":
        return cls(
            int(obj["n"]),
            int(obj["seed"]),
            np.asarray(obj["train"], dtype=np.int64),
            np.asarray(obj["test"], dtype=np.int64),
        )


def stratified_counts(n: int, n_pos: int, n_neg: int) -> tuple[int, int]:
    """Positive/negative counts for an ``n``-row draw from a pool.

    Proportional rounding (half up), at least one row per class when n >= 2,
    then clamped to what the pool holds.
    """
    total = n_pos + n_neg
    k_pos = int(math.floor(n * n_pos / total + 0.5))
    if n >= 2:
        k_pos = min(max(k_pos, 1), n - 1)
    k_pos = min(k_pos, n_pos)
    k_pos = max(k_pos, n - n_neg)
    return k_pos, n - k_pos


def sample_shots(table: DatasetTable, n: int, seed: int) -> ShotSplit:
    """Draw a seeded stratified ``n``-row training set; the rest is test."""
    y = np.asarray(table.target)
    if n < 1:
        raise DataError("n must be a positive integer")
    if n > len(y) - 1:
        raise DataError(f"n={n} leaves no test rows in a pool of {len(y)}")
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if pos.size == 0 or neg.size == 0:
        raise DataError("both classes must be present in the pool")
    k_pos, k_neg = stratified_counts(n, pos.size, neg.size)
    rng = np.random.default_rng(seed)
    train = np.concatenate([
        rng.choice(pos, size=k_pos, replace=False),
        rng.choice(neg, size=k_neg, replace=False),
    ])
    train.sort()
    mask = np.ones(len(y), dtype=bool)
    mask[train] = False
    return ShotSplit(n, int(seed), train, np.flatnonzero(mask))
