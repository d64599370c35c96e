"""Typed tabular datasets: schema, CSV I/O, cleaning and splitting.

A :class:`Dataset` stores one numpy array per column. Columns whose current
representation is numeric (raw numeric features and anything an encoder has
produced) are ``float64`` with ``NaN`` at missing cells; label columns are
``object`` arrays holding ``str`` with ``None`` at missing cells. The per-cell
missing mask is kept alongside and is the authority on missingness.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import operator
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError, ValidationError

log = logging.getLogger(__name__)

KINDS = ("numeric", "categorical", "binary")
ROLES = ("input", "target", "id")
TASKS = ("regression", "binary_classification")

# Label pairs recognised as (negative, positive) when a binary feature does not
# declare its allowed values explicitly.
_KNOWN_BINARY_PAIRS = (
    ("0", "1"),
    ("false", "true"),
    ("no", "yes"),
    ("-1", "1"),
    ("0.0", "1.0"),
)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    allowed_values: tuple | None = None
    numeric_bounds: tuple | None = None
    role: str = "input"
    missing_values: tuple = ()
    integer: bool = False
    # Name of the transform that produced the column's current numeric form.
    derived: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"feature {self.name!r}: kind must be one of {KINDS}, got {self.kind!r}")
        if self.role not in ROLES:
            raise ConfigError(f"feature {self.name!r}: role must be one of {ROLES}, got {self.role!r}")
        if self.allowed_values is not None:
            values = tuple(str(v) for v in self.allowed_values)
            if not values:
                raise ConfigError(f"feature {self.name!r}: allowed_values must not be empty")
            if len(set(values)) != len(values):
                raise ConfigError(f"feature {self.name!r}: allowed_values contains duplicates")
            if self.kind == "binary" and len(values) != 2:
                raise ConfigError(f"feature {self.name!r}: binary features need exactly two allowed values")
            object.__setattr__(self, "allowed_values", values)
        if self.numeric_bounds is not None:
            lo, hi = (float(b) for b in self.numeric_bounds)
            if lo > hi:
                raise ConfigError(f"feature {self.name!r}: numeric_bounds min {lo} > max {hi}")
            object.__setattr__(self, "numeric_bounds", (lo, hi))
        object.__setattr__(self, "missing_values", tuple(str(v) for v in self.missing_values))

    @property
    def numeric_storage(self):
        return self.kind == "numeric" or self.derived is not None

    def positive_label(self):
        """(negative, positive) labels of a binary feature."""
        if self.kind != "binary":
            raise ValidationError(f"feature {self.name!r} is not binary")
        if self.allowed_values is not None:
            return self.allowed_values
        raise ValidationError(f"binary feature {self.name!r} declares no allowed_values")

    def to_dict(self):
        out = {"name": self.name, "kind": self.kind, "role": self.role}
        if self.allowed_values is not None:
            out["allowed_values"] = list(self.allowed_values)
        if self.numeric_bounds is not None:
            out["numeric_bounds"] = list(self.numeric_bounds)
        if self.missing_values:
            out["missing_values"] = list(self.missing_values)
        if self.integer:
            out["integer"] = True
        if self.derived is not None:
            out["derived"] = self.derived
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("allowed_values", "numeric_bounds", "missing_values"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if d.get("missing_values") is None:
            d.pop("missing_values", None)
        return cls(**d)


@dataclass(frozen=True)
class Schema:
    features: tuple
    task: str

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        names = [f.name for f in self.features]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ConfigError(f"duplicate feature names: {dupes}")
        targets = [f for f in self.features if f.role == "target"]
        if len(targets) != 1:
            raise ConfigError(f"schema needs exactly one target feature, found {len(targets)}")
        t = targets[0]
        if self.task == "regression" and t.kind != "numeric":
            raise ConfigError(f"regression target {t.name!r} must be numeric")
        if self.task == "binary_classification" and t.kind != "binary":
            raise ConfigError(f"classification target {t.name!r} must be binary")

    @property
    def names(self):
        return [f.name for f in self.features]

    @property
    def target(self):
        return next(f for f in self.features if f.role == "target")

    @property
    def inputs(self):
        return [f for f in self.features if f.role == "input"]

    @property
    def is_classification(self):
        return self.task == "binary_classification"

    def __contains__(self, name):
        return any(f.name == name for f in self.features)

    def get(self, name) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise ConfigError(f"unknown feature {name!r}")

    def with_features(self, features):
        return Schema(tuple(features), self.task)

    def to_dict(self):
        return {"task": self.task, "features": [f.to_dict() for f in self.features]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(FeatureSpec.from_dict(f) for f in d["features"]), d["task"])


def _freeze(arr):
    arr.setflags(write=False)
    return arr


class Dataset:
    """Immutable column-store table bound to a :class:`Schema`."""

    def __init__(self, schema: Schema, columns: Mapping[str, np.ndarray], missing: Mapping[str, np.ndarray] | None = None, validate=True):
        self.schema = schema
        names = schema.names
        extra = set(columns) - set(names)
        absent = set(names) - set(columns)
        if extra or absent:
            raise SchemaError(f"columns do not match schema (missing {sorted(absent)}, extra {sorted(extra)})")
        lengths = {len(columns[n]) for n in names}
        if len(lengths) > 1:
            raise SchemaError(f"columns have unequal lengths {sorted(lengths)}")
        self.n_rows = lengths.pop() if lengths else 0
        cols = {}
        masks = {}
        for spec in schema.features:
            col = columns[spec.name]
            if spec.numeric_storage:
                col = np.array(col, dtype=np.float64)
                mask = np.isnan(col)
            else:
                col = np.array(col, dtype=object)
                mask = np.array([v is None for v in col], dtype=bool)
            if missing is not None and spec.name in missing:
                given = np.asarray(missing[spec.name], dtype=bool)
                if spec.numeric_storage:
                    col = col.copy()
                    col[given] = np.nan
                else:
                    col = col.copy()
                    col[given] = None
                mask = mask | given
            cols[spec.name] = _freeze(col)
            masks[spec.name] = _freeze(mask)
        self._columns = cols
        self._missing = masks
        if validate:
            self._validate()

    def _validate(self):
        for spec in self.schema.features:
            col = self._columns[spec.name]
            ok = ~self._missing[spec.name]
            if spec.numeric_storage:
                if spec.numeric_bounds is not None and spec.derived is None:
                    lo, hi = spec.numeric_bounds
                    bad = ok & ((col < lo) | (col > hi))
                    if bad.any():
                        i = int(np.flatnonzero(bad)[0])
                        raise ValidationError(
                            f"row {i}, column {spec.name!r}: value {col[i]} outside bounds [{lo}, {hi}]"
                        )
            elif spec.allowed_values is not None:
                allowed = set(spec.allowed_values)
                for i in np.flatnonzero(ok):
                    if col[i] not in allowed:
                        raise ValidationError(
                            f"row {int(i)}, column {spec.name!r}: unknown category {col[i]!r}"
                        )

    # -- access -----------------------------------------------------------
    def column(self, name) -> np.ndarray:
        try:
            return self._columns[name]
        except KeyError:
            raise ConfigError(f"unknown column {name!r}") from None

    def missing(self, name) -> np.ndarray:
        return self._missing[name]

    @property
    def columns(self):
        return dict(self._columns)

    @property
    def missing_mask(self):
        if not self.schema.features:
            return np.zeros((self.n_rows, 0), dtype=bool)
        return np.column_stack([self._missing[n] for n in self.schema.names]).reshape(self.n_rows, -1)

    def rows(self):
        """Row-major view: list of tuples with ``None`` at missing cells."""
        out = []
        names = self.schema.names
        for i in range(self.n_rows):
            row = []
            for n in names:
                if self._missing[n][i]:
                    row.append(None)
                else:
                    v = self._columns[n][i]
                    row.append(float(v) if isinstance(v, np.floating) else v)
            out.append(tuple(row))
        return out

    def records(self):
        names = self.schema.names
        return [dict(zip(names, r)) for r in self.rows()]

    def __len__(self):
        return self.n_rows

    def __repr__(self):
        return f"Dataset(n_rows={self.n_rows}, columns={self.schema.names})"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def from_records(cls, schema: Schema, records: Sequence[Mapping], validate=True):
        columns = {}
        for spec in schema.features:
            vals = []
            for r in records:
                v = r.get(spec.name)
                if spec.numeric_storage:
                    vals.append(np.nan if v is None else float(v))
                else:
                    vals.append(None if v is None else _label(v))
            columns[spec.name] = vals if vals else ([] if not spec.numeric_storage else np.empty(0))
        return cls(schema, columns, validate=validate)

    @classmethod
    def empty(cls, schema: Schema):
        return cls.from_records(schema, [])

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        cols = {n: c[idx] for n, c in self._columns.items()}
        miss = {n: m[idx] for n, m in self._missing.items()}
        return Dataset(self.schema, cols, miss, validate=False)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.schema.names != self.schema.names:
            raise SchemaError("cannot concatenate datasets with different columns")
        cols = {n: np.concatenate([self._columns[n], other._columns[n]]) for n in self.schema.names}
        miss = {n: np.concatenate([self._missing[n], other._missing[n]]) for n in self.schema.names}
        return Dataset(self.schema, cols, miss, validate=False)

    def with_columns(self, schema: Schema, columns, missing=None) -> "Dataset":
        return Dataset(schema, columns, missing, validate=False)

    def drop_columns(self, names) -> "Dataset":
        names = set(names)
        schema = self.schema.with_features([f for f in self.schema.features if f.name not in names])
        return Dataset(
            schema,
            {n: self._columns[n] for n in schema.names},
            {n: self._missing[n] for n in schema.names},
            validate=False,
        )

    # -- numeric views ------------------------------------------------------
    def input_names(self):
        return [f.name for f in self.schema.inputs]

    def to_matrix(self, names=None) -> np.ndarray:
        names = self.input_names() if names is None else list(names)
        for n in names:
            if not self.schema.get(n).numeric_storage:
                raise SchemaError(f"column {n!r} still holds labels; encode it before building a matrix")
        if not names:
            return np.zeros((self.n_rows, 0))
        return np.column_stack([self._columns[n] for n in names]).astype(np.float64).reshape(self.n_rows, len(names))

    def target_vector(self) -> np.ndarray:
        spec = self.schema.target
        col = self._columns[spec.name]
        if self._missing[spec.name].any():
            raise ValidationError(f"target {spec.name!r} has missing values")
        if spec.numeric_storage:
            return np.asarray(col, dtype=np.float64)
        neg, pos = binary_labels(spec, col)
        return np.array([1.0 if v == pos else 0.0 for v in col])

    # -- comparison -----------------------------------------------------------
    def equals(self, other: "Dataset") -> bool:
        if self.schema != other.schema or self.n_rows != other.n_rows:
            return False
        for n in self.schema.names:
            if not np.array_equal(self._missing[n], other._missing[n]):
                return False
            a, b = self._columns[n], other._columns[n]
            ok = ~self._missing[n]
            if self.schema.get(n).numeric_storage:
                if not np.array_equal(a[ok], b[ok]):
                    return False
            elif list(a[ok]) != list(b[ok]):
                return False
        return True

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for n in self.schema.names:
            h.update(n.encode())
            h.update(self._missing[n].tobytes())
            col = self._columns[n]
            if self.schema.get(n).numeric_storage:
                h.update(np.where(self._missing[n], 0.0, col).tobytes())
            else:
                h.update("\x1f".join("" if v is None else v for v in col).encode())
        return h.hexdigest()


def _label(v):
    if isinstance(v, bool):
        return "True" if v else "False"
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


def binary_labels(spec: FeatureSpec, values: Iterable | None = None):
    """Return ``(negative, positive)`` labels for a binary feature.

    Declared ``allowed_values`` are taken in order; otherwise the observed labels
    must form a recognised pair such as 0/1, No/Yes or False/True.
    """
    if spec.allowed_values is not None:
        return spec.allowed_values
    seen = sorted({v for v in (values if values is not None else []) if v is not None})
    lowered = [s.lower() for s in seen]
    for neg, pos in _KNOWN_BINARY_PAIRS:
        if set(lowered) <= {neg, pos}:
            by_lower = dict(zip(lowered, seen))
            return by_lower.get(neg, neg), by_lower.get(pos, pos)
    raise ValidationError(f"cannot infer negative/positive labels of binary feature {spec.name!r} from {seen}")


# -- CSV ---------------------------------------------------------------------

def _format_number(v):
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(float(v))


def load_csv(path, schema: Schema) -> Dataset:
    """Read a comma-separated UTF-8 file with a header row into a dataset.

    Empty cells and each feature's ``missing_values`` sentinels become missing.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: file is empty (no header row)") from None
        header = [h.strip() for h in header]
        missing_cols = [n for n in schema.names if n not in header]
        extra_cols = [h for h in header if h not in schema.names]
        if missing_cols or extra_cols:
            raise SchemaError(f"{path}: header mismatch (missing {missing_cols}, extra {extra_cols})")
        pos = {h: i for i, h in enumerate(header)}
        raw = {n: [] for n in schema.names}
        for r, line in enumerate(reader):
            if not line:
                continue
            if len(line) != len(header):
                raise ParseError(f"{path}: row {r} has {len(line)} cells, expected {len(header)}", row=r)
            for spec in schema.features:
                cell = line[pos[spec.name]].strip()
                if cell == "" or cell in spec.missing_values:
                    raw[spec.name].append(None)
                elif spec.numeric_storage:
                    try:
                        raw[spec.name].append(float(cell))
                    except ValueError:
                        raise ParseError(
                            f"{path}: row {r}, column {spec.name!r}: cannot parse {cell!r} as a number",
                            row=r,
                            column=spec.name,
                        ) from None
                else:
                    raw[spec.name].append(cell)
    columns = {}
    for spec in schema.features:
        vals = raw[spec.name]
        if spec.numeric_storage:
            columns[spec.name] = np.array([np.nan if v is None else v for v in vals], dtype=np.float64)
        else:
            columns[spec.name] = np.array(vals, dtype=object)
    return Dataset(schema, columns)


def write_csv(d: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = d.schema.names
    numeric = {n: d.schema.get(n).numeric_storage for n in names}
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(d.n_rows):
            row = []
            for n in names:
                if d.missing(n)[i]:
                    row.append("")
                elif numeric[n]:
                    row.append(_format_number(float(d.column(n)[i])))
                else:
                    row.append(d.column(n)[i])
            w.writerow(row)


# -- cleaning ------------------------------------------------------------------

def drop_duplicates(d: Dataset) -> Dataset:
    """Keep the first occurrence of every identical row (missing equals missing)."""
    seen = set()
    keep = []
    for i, row in enumerate(d.rows()):
        if row not in seen:
            seen.add(row)
            keep.append(i)
    if len(keep) == d.n_rows:
        return d
    return d.take(keep)


_OPS = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "==": operator.eq,
    "!=": operator.ne,
}


@dataclass(frozen=True)
class ValidityRule:
    """A row passes when its ``feature`` value satisfies ``op value``.

    Missing cells pass every rule except ``not_missing``.
    """

    feature: str
    op: str
    value: object = None

    def __post_init__(self):
        if self.op not in (*_OPS, "in", "not_in", "not_missing"):
            raise ConfigError(f"rule on {self.feature!r}: unknown operator {self.op!r}")

    def mask(self, d: Dataset) -> np.ndarray:
        if self.feature not in d.schema:
            raise ConfigError(f"validity rule references unknown feature {self.feature!r}")
        col = d.column(self.feature)
        miss = d.missing(self.feature)
        if self.op == "not_missing":
            return ~miss
        numeric = d.schema.get(self.feature).numeric_storage
        conv = float if numeric else _label
        if self.op in ("in", "not_in"):
            allowed = {conv(v) for v in self.value}
            hit = np.array([(not m) and (v in allowed) for v, m in zip(col, miss)], dtype=bool)
            ok = hit if self.op == "in" else ~hit
        else:
            ref = conv(self.value)
            fn = _OPS[self.op]
            ok = np.array([m or bool(fn(v, ref)) for v, m in zip(col, miss)], dtype=bool)
        return ok | (miss & (self.op != "not_missing"))


def clean_invalid(d: Dataset, rules: Sequence[ValidityRule]):
    """Drop rows failing any rule. Returns ``(dataset, n_removed)``."""
    if not rules:
        return d, 0
    keep = np.ones(d.n_rows, dtype=bool)
    for rule in rules:
        keep &= rule.mask(d)
    removed = int((~keep).sum())
    if removed:
        log.info("removed %d invalid row(s)", removed)
        return d.take(np.flatnonzero(keep)), removed
    return d, 0


# -- splitting -------------------------------------------------------------------

@dataclass(frozen=True)
class Splits:
    train: Dataset
    validation: Dataset
    test: Dataset
    seed: int
    stratified: bool
    indices: tuple = field(default=(), repr=False)

    def sizes(self):
        return (self.train.n_rows, self.validation.n_rows, self.test.n_rows)


def split_sizes(n: int, ratios: Sequence[float]) -> tuple:
    """Floor each part, then hand the remainder to the test part, then validation.

    >>> split_sizes(13904, (0.8, 0.1, 0.1))
    (11123, 1390, 1391)
    """
    if len(ratios) != 3:
        raise ConfigError("ratios must have three entries (train, validation, test)")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be non-negative and sum to 1, got {tuple(ratios)}")
    sizes = [int(math.floor(r * n + 1e-9)) for r in ratios]
    rem = n - sum(sizes)
    order = [2, 1, 0]
    k = 0
    while rem > 0:
        part = order[k % 3]
        if ratios[part] > 0:
            sizes[part] += 1
            rem -= 1
        k += 1
    return tuple(sizes)


def _round_row(ideal, capacity):
    """Integer row summing to round(sum(ideal)), each entry floor/ceil of ideal, within capacity."""
    base = np.floor(ideal + 1e-12).astype(int)
    base = np.minimum(base, capacity)
    need = int(round(ideal.sum())) - int(base.sum())
    frac = ideal - base
    for j in np.argsort(-frac, kind="stable"):
        if need <= 0:
            break
        if base[j] < capacity[j]:
            base[j] += 1
            need -= 1
    # capacity clipping can leave a deficit; place it wherever room remains
    for j in range(len(base)):
        while need > 0 and base[j] < capacity[j]:
            base[j] += 1
            need -= 1
    return base


def split_dataset(d: Dataset, ratios=(0.8, 0.1, 0.1), stratified=False, seed=0) -> Splits:
    """Seeded train/validation/test split with exact, reproducible part sizes."""
    sizes = split_sizes(d.n_rows, ratios)
    if d.n_rows < 3 and all(r > 0 for r in ratios):
        raise ValidationError(f"cannot split {d.n_rows} row(s) into three non-empty parts")
    rng = np.random.default_rng(seed)
    if stratified:
        if not d.schema.is_classification:
            raise ConfigError("stratified splits need a classification task")
        y = d.target_vector()
        classes = np.unique(y)
        n = d.n_rows
        alloc = np.zeros((len(classes), 3), dtype=int)
        capacity = np.array(sizes)
        for ci, c in enumerate(classes):
            n_c = int((y == c).sum())
            if ci == len(classes) - 1:
                alloc[ci] = capacity
            else:
                ideal = np.array(sizes, dtype=float) * n_c / n
                alloc[ci] = _round_row(ideal, capacity)
            capacity = capacity - alloc[ci]
        parts = [[], [], []]
        for ci, c in enumerate(classes):
            idx = np.flatnonzero(y == c)
            idx = idx[rng.permutation(len(idx))]
            start = 0
            for p in range(3):
                parts[p].append(idx[start:start + alloc[ci, p]])
                start += alloc[ci, p]
        parts = [np.sort(np.concatenate(p)) if p else np.empty(0, dtype=np.intp) for p in parts]
    else:
        perm = rng.permutation(d.n_rows)
        a, b, _ = sizes
        parts = [np.sort(perm[:a]), np.sort(perm[a:a + b]), np.sort(perm[a + b:])]
    return Splits(
        train=d.take(parts[0]),
        validation=d.take(parts[1]),
        test=d.take(parts[2]),
        seed=seed,
        stratified=stratified,
        indices=tuple(parts),
    )


def check_category_coverage(splits: Splits) -> list:
    """Report categorical values present in the data but absent from train or test.

    The split is not reshuffled; callers decide what to do with the warnings.
    """
    warnings = []
    for spec in splits.train.schema.inputs:
        if spec.numeric_storage:
            continue
        seen = {}
        for part in ("train", "validation", "test"):
            d = getattr(splits, part)
            seen[part] = {v for v, m in zip(d.column(spec.name), d.missing(spec.name)) if not m}
        every = seen["train"] | seen["validation"] | seen["test"]
        for part in ("train", "test"):
            absent = sorted(every - seen[part])
            if absent:
                msg = f"{spec.name}: {len(absent)} value(s) absent from {part} split: {absent[:5]}"
                warnings.append(msg)
                log.warning(msg)
    return warnings


def replace_spec(spec: FeatureSpec, **changes) -> FeatureSpec:
    return replace(spec, **changes)
