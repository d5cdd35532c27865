"""CSV ingestion, schema handling, and the preprocessing pipeline.

Numerical columns: missing cells are filled with the training mean, then
mapped through a piecewise-linear empirical-CDF -> inverse-normal composition
so marginals are roughly standard normal. Categorical columns: label
vocabularies with an extra category appended when missing values occur.
Both transforms are exactly invertible on the training support.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import FitError, InputError, NumericError, ParseError, SchemaError

MISSING_TOKEN = "__missing__"
NORMAL_CLIP = 5.2
MAX_QUANTILE_KNOTS = 1000

_NORMAL = NormalDist()


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str  # "numerical" | "categorical"
    target: bool = False

    def __post_init__(self):
        if self.kind not in ("numerical", "categorical"):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class TableSchema:
    columns: tuple[ColumnSpec, ...]

    def __post_init__(self):
        if len(self.columns) < 1:
            raise SchemaError("schema needs at least one column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")
        if sum(c.target for c in self.columns) > 1:
            raise SchemaError("at most one target column allowed")

    @property
    def m(self) -> int:
        return len(self.columns)

    @property
    def numerical(self) -> tuple[ColumnSpec, ...]:
        return tuple(c for c in self.columns if c.kind == "numerical")

    @property
    def categorical(self) -> tuple[ColumnSpec, ...]:
        return tuple(c for c in self.columns if c.kind == "categorical")

    @property
    def m_num(self) -> int:
        return len(self.numerical)

    @property
    def m_cat(self) -> int:
        return len(self.categorical)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def target_column(self) -> ColumnSpec | None:
        for c in self.columns:
            if c.target:
                return c
        return None

    def to_dict(self) -> dict:
        return {"columns": [
            {"name": c.name, "kind": c.kind, "target": c.target} for c in self.columns
        ]}

    @classmethod
    def from_dict(cls, obj: dict) -> "TableSchema":
        try:
            cols = tuple(
                ColumnSpec(c["name"], c["kind"], bool(c.get("target", False)))
                for c in obj["columns"]
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema object: {exc}") from exc
        return cls(cols)

    @classmethod
    def load(cls, path) -> "TableSchema":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class Table:
    """Row storage split into a numerical block and a categorical index block.

    num: (n, m_num) float64, NaN marks missing.
    cat: (n, m_cat) int64 indices into cat_labels, -1 marks missing.
    """

    schema: TableSchema
    num: np.ndarray
    cat: np.ndarray
    cat_labels: list[list[str]] = field(default_factory=list)

    def __post_init__(self):
        num = np.asarray(self.num, dtype=np.float64)
        cat = np.asarray(self.cat, dtype=np.int64)
        m_num, m_cat = self.schema.m_num, self.schema.m_cat
        if m_num:
            num = num.reshape(-1, m_num)
        if m_cat:
            cat = cat.reshape(-1, m_cat)
        rows = num.shape[0] if m_num else cat.shape[0]
        if not m_num:
            num = np.zeros((rows, 0))
        if not m_cat:
            cat = np.zeros((rows, 0), dtype=np.int64)
        self.num, self.cat = num, cat
        if self.num.shape[0] != self.cat.shape[0]:
            raise SchemaError("numerical and categorical blocks disagree on row count")
        if len(self.cat_labels) != self.schema.m_cat:
            raise SchemaError("one label list per categorical column required")
        for j, labels in enumerate(self.cat_labels):
            col = self.cat[:, j]
            bad = (col != -1) & ((col < 0) | (col >= len(labels)))
            if bad.any():
                raise SchemaError(f"categorical index out of range in column {j}")

    @property
    def n_rows(self) -> int:
        return self.num.shape[0]


def _empty_blocks(schema: TableSchema, n: int):
    return (np.full((n, schema.m_num), np.nan),
            np.full((n, schema.m_cat), -1, dtype=np.int64))


def load_csv(path, schema: TableSchema) -> Table:
    """Parse an RFC-4180 CSV whose header matches the schema column order.

    Empty or unparseable numerical cells become missing; categorical labels
    build a first-appearance vocabulary per column (empty cell = missing).
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise SchemaError(f"{path}: duplicate header name")
        if header != schema.names:
            missing = [n for n in schema.names if n not in header]
            if missing:
                raise SchemaError(f"{path}: missing columns {missing}")
            raise SchemaError(f"{path}: header order {header} != schema {schema.names}")
        rows = list(reader)

    n = len(rows)
    num, cat = _empty_blocks(schema, n)
    num_pos = [i for i, c in enumerate(schema.columns) if c.kind == "numerical"]
    cat_pos = [i for i, c in enumerate(schema.columns) if c.kind == "categorical"]
    labels: list[list[str]] = [[] for _ in cat_pos]
    index: list[dict[str, int]] = [{} for _ in cat_pos]

    for r, row in enumerate(rows):
        if len(row) != schema.m:
            raise ParseError(f"{path}: line {r + 2}: expected {schema.m} cells, got {len(row)}")
        for j, pos in enumerate(num_pos):
            cell = row[pos]
            if cell == "":
                continue
            try:
                num[r, j] = float(cell)
            except ValueError:
                pass  # stays missing
        for j, pos in enumerate(cat_pos):
            cell = row[pos]
            if cell == "":
                continue
            idx = index[j].get(cell)
            if idx is None:
                idx = len(labels[j])
                labels[j].append(cell)
                index[j][cell] = idx
            cat[r, j] = idx

    return Table(schema, num, cat, labels)


def _format_float(x: float) -> str:
    return repr(float(x))


def write_csv(table: Table, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.schema.names)
        num_iter = {c.name: j for j, c in enumerate(table.schema.numerical)}
        cat_iter = {c.name: j for j, c in enumerate(table.schema.categorical)}
        for r in range(table.n_rows):
            row = []
            for col in table.schema.columns:
                if col.kind == "numerical":
                    v = table.num[r, num_iter[col.name]]
                    row.append("" if np.isnan(v) else _format_float(v))
                else:
                    j = cat_iter[col.name]
                    idx = table.cat[r, j]
                    row.append("" if idx < 0 else table.cat_labels[j][idx])
            writer.writerow(row)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class NumericColumnState:
    fill: float
    knots: np.ndarray         # strictly increasing data values
    normal_knots: np.ndarray  # matched standard-normal quantiles

    def to_dict(self):
        return {"fill": self.fill, "knots": self.knots.tolist(),
                "normal_knots": self.normal_knots.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fill"]), np.asarray(d["knots"], dtype=np.float64),
                   np.asarray(d["normal_knots"], dtype=np.float64))


@dataclass
class CategoricalColumnState:
    labels: list[str]     # vocabulary; MISSING_TOKEN appended iff missing was seen
    most_frequent: int    # fallback index for unknown labels at apply time

    @property
    def cardinality(self) -> int:
        return len(self.labels)

    @property
    def missing_index(self) -> int | None:
        if self.labels and self.labels[-1] == MISSING_TOKEN:
            return len(self.labels) - 1
        return None

    def to_dict(self):
        return {"labels": list(self.labels), "most_frequent": self.most_frequent}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["labels"]), int(d["most_frequent"]))


@dataclass
class PreprocessState:
    numeric: list[NumericColumnState]
    categorical: list[CategoricalColumnState]
    num_names: list[str]
    cat_names: list[str]

    @property
    def cardinalities(self) -> list[int]:
        return [c.cardinality for c in self.categorical]

    def to_dict(self):
        return {
            "numeric": [s.to_dict() for s in self.numeric],
            "categorical": [s.to_dict() for s in self.categorical],
            "num_names": list(self.num_names),
            "cat_names": list(self.cat_names),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            [NumericColumnState.from_dict(s) for s in d["numeric"]],
            [CategoricalColumnState.from_dict(s) for s in d["categorical"]],
            list(d["num_names"]),
            list(d["cat_names"]),
        )


def _normal_quantile(p: float) -> float:
    if p <= 0.0:
        return -NORMAL_CLIP
    if p >= 1.0:
        return NORMAL_CLIP
    return min(max(_NORMAL.inv_cdf(p), -NORMAL_CLIP), NORMAL_CLIP)


def _fit_numeric(values: np.ndarray, name: str) -> NumericColumnState:
    known = values[~np.isnan(values)]
    if known.size == 0:
        raise FitError(f"numerical column {name!r} has no observed values")
    fill = float(known.mean())
    filled = np.where(np.isnan(values), fill, values)
    n_knots = int(min(MAX_QUANTILE_KNOTS, np.unique(filled).size))
    if n_knots == 1:
        v = float(filled[0])
        return NumericColumnState(fill, np.array([v]), np.array([0.0]))
    probs = np.linspace(0.0, 1.0, n_knots)
    knots = np.quantile(filled, probs)
    normal = np.array([_normal_quantile(p) for p in probs])
    # collapse duplicate data knots (ties) so both grids are strictly increasing
    uniq, start = np.unique(knots, return_index=True)
    if uniq.size != knots.size:
        bounds = np.append(start, knots.size)
        normal = np.array([normal[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])
        knots = uniq
    return NumericColumnState(fill, knots, normal)


def _fit_categorical(col: np.ndarray, labels: list[str]) -> CategoricalColumnState:
    vocab = list(labels)
    has_missing = bool((col == -1).any())
    if has_missing:
        vocab = vocab + [MISSING_TOKEN]
    counts = np.zeros(len(vocab), dtype=np.int64)
    for idx in col:
        counts[len(vocab) - 1 if idx == -1 else idx] += 1
    return CategoricalColumnState(vocab, int(np.argmax(counts)))


def fit_preprocess(table: Table) -> PreprocessState:
    if table.n_rows == 0:
        raise FitError("cannot fit preprocessing on an empty table")
    numeric = [
        _fit_numeric(table.num[:, j], spec.name)
        for j, spec in enumerate(table.schema.numerical)
    ]
    categorical = [
        _fit_categorical(table.cat[:, j], table.cat_labels[j])
        for j in range(table.schema.m_cat)
    ]
    return PreprocessState(
        numeric, categorical,
        [c.name for c in table.schema.numerical],
        [c.name for c in table.schema.categorical],
    )


def _check_compatible(table: Table, state: PreprocessState) -> None:
    if [c.name for c in table.schema.numerical] != state.num_names or \
       [c.name for c in table.schema.categorical] != state.cat_names:
        raise SchemaError("table schema does not match fitted preprocess state")


def apply_preprocess(table: Table, state: PreprocessState) -> Table:
    """Map a raw table into model space: normal-ish numericals, vocab indices."""
    _check_compatible(table, state)
    num = np.empty_like(table.num)
    for j, s in enumerate(state.numeric):
        col = np.where(np.isnan(table.num[:, j]), s.fill, table.num[:, j])
        num[:, j] = np.interp(col, s.knots, s.normal_knots)

    cat = np.empty_like(table.cat)
    for j, s in enumerate(state.categorical):
        lookup = {lab: i for i, lab in enumerate(s.labels)}
        src = table.cat[:, j]
        out = np.empty_like(src)
        for r in range(src.size):
            idx = src[r]
            if idx == -1:
                mi = s.missing_index
                if mi is None:
                    warnings.warn(
                        f"column {state.cat_names[j]!r}: missing value unseen at fit "
                        f"time mapped to most frequent category")
                    mi = s.most_frequent
                out[r] = mi
            else:
                label = table.cat_labels[j][idx]
                mapped = lookup.get(label)
                if mapped is None:
                    warnings.warn(
                        f"column {state.cat_names[j]!r}: unknown category {label!r} "
                        f"mapped to most frequent category")
                    mapped = s.most_frequent
                out[r] = mapped
        cat[:, j] = out

    return Table(table.schema, num, cat, [list(s.labels) for s in state.categorical])


def invert_preprocess(table: Table, state: PreprocessState) -> Table:
    """Inverse of apply_preprocess; missing-category indices become empty cells."""
    _check_compatible(table, state)
    if not np.all(np.isfinite(table.num)):
        raise NumericError("non-finite numerical values cannot be inverted")
    num = np.empty_like(table.num)
    for j, s in enumerate(state.numeric):
        num[:, j] = np.interp(table.num[:, j], s.normal_knots, s.knots)
    cat = table.cat.copy()
    for j, s in enumerate(state.categorical):
        mi = s.missing_index
        if mi is not None:
            cat[:, j] = np.where(cat[:, j] == mi, -1, cat[:, j])
    return Table(table.schema, num, cat, [list(s.labels) for s in state.categorical])


def one_hot_matrix(indices: np.ndarray, cardinality: int) -> np.ndarray:
    """(n,) index column -> (n, C) one-hot float64 matrix."""
    if indices.size and (indices.min() < 0 or indices.max() >= cardinality):
        raise InputError("one-hot index out of range")
    out = np.zeros((indices.size, cardinality))
    out[np.arange(indices.size), indices] = 1.0
    return out
