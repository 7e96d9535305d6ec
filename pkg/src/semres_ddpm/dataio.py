"""Tabular data in and out: KEEL/CSV parsing, one-hot + min-max encoding, folds."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    pass


@dataclass
class FeatureSpec:
    name: str
    kind: str  # "numeric" | "categorical"
    categories: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "categorical" and len(self.categories) < 2:
            raise ValueError(f"categorical feature {self.name!r} needs at least 2 categories")


@dataclass
class Dataset:
    """Rows of raw feature values (floats for numeric, str for categorical) plus labels."""

    schema: list[FeatureSpec]
    rows: list[list]
    labels: list[str]
    positive_label: str
    name: str = ""

    def __post_init__(self):
        if len(self.rows) != len(self.labels):
            raise ValueError("rows and labels differ in length")
        for i, r in enumerate(self.rows):
            if len(r) != len(self.schema):
                raise DataFormatError(f"row {i} has {len(r)} values, schema has {len(self.schema)}")
        present = set(self.labels)
        if len(present) != 2:
            raise DataFormatError(f"need exactly two classes, found {sorted(present)}")
        if self.positive_label not in present:
            raise DataFormatError(f"positive label {self.positive_label!r} not present")

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def y(self) -> np.ndarray:
        """Binary labels, 1 for the minority/positive class."""
        return np.array([lab == self.positive_label for lab in self.labels], dtype=int)

    @property
    def negative_label(self) -> str:
        return next(lab for lab in self.labels if lab != self.positive_label)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.schema, [self.rows[i] for i in idx], [self.labels[i] for i in idx],
                       self.positive_label, self.name)

    def minority_rows(self) -> list[list]:
        return [r for r, lab in zip(self.rows, self.labels) if lab == self.positive_label]

    def fingerprint(self) -> str:
        desc = [(f.name, f.kind, f.categories) for f in self.schema]
        return hashlib.sha256(json.dumps(desc).encode()).hexdigest()[:16]


def _pick_minority(labels: list[str], order: list[str]) -> str:
    """Less frequent label; ties go to the label declared first."""
    counts = Counter(labels)
    order = [c for c in order if c in counts] + sorted(c for c in counts if c not in order)
    return min(order, key=lambda c: (counts[c], order.index(c)))


_ATTR_RE = re.compile(r"@attribute\s+('[^']*'|\S+)\s*(.*)$", re.IGNORECASE)


def _split_names(s: str) -> list[str]:
    return [p.strip().strip("'") for p in s.split(",") if p.strip()]


def parse_keel(text: str, name: str = "") -> Dataset:
    """Parse a KEEL ``.dat`` file into a binary Dataset.

    The class is the ``@outputs`` attribute when given, else the last one.
    Missing values (``?``) and more than two classes are rejected.
    """
    attrs: list[tuple[str, str, list[str]]] = []
    inputs = outputs = None
    data_lines: list[tuple[int, str]] = []
    in_data = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("%"):
            continue
        if in_data:
            data_lines.append((lineno, line))
            continue
        low = line.lower()
        if low.startswith("@relation"):
            parts = line.split(None, 1)
            if not name and len(parts) > 1:
                name = parts[1].strip()
        elif low.startswith("@attribute"):
            m = _ATTR_RE.match(line)
            if not m:
                raise DataFormatError(f"line {lineno}: malformed attribute declaration")
            aname, rest = m.group(1).strip("'"), m.group(2).strip()
            if rest.startswith("{"):
                if "}" not in rest:
                    raise DataFormatError(f"line {lineno}: unterminated category list")
                cats = _split_names(rest[1:rest.index("}")])
                attrs.append((aname, "categorical", cats))
            elif re.match(r"(real|integer|numeric)\b", rest, re.IGNORECASE):
                attrs.append((aname, "numeric", []))
            else:
                raise DataFormatError(f"line {lineno}: unknown attribute type {rest!r}")
        elif low.startswith("@inputs"):
            inputs = _split_names(line.split(None, 1)[1]) if len(line.split(None, 1)) > 1 else []
        elif low.startswith("@outputs") or low.startswith("@output"):
            outputs = _split_names(line.split(None, 1)[1])
        elif low.startswith("@data"):
            in_data = True
        elif not line.startswith("@"):
            raise DataFormatError(f"line {lineno}: data row before the @data section")
        else:
            raise DataFormatError(f"line {lineno}: unexpected header line {line[:40]!r}")
    if not attrs or not in_data:
        raise DataFormatError("missing @attribute declarations or @data section")

    names = [a[0] for a in attrs]
    dupes = sorted({a for a in names if names.count(a) > 1})
    if dupes:
        raise DataFormatError(f"duplicate attribute names {dupes}")
    cls_name = outputs[0] if outputs else names[-1]
    if cls_name not in names:
        raise DataFormatError(f"output attribute {cls_name!r} not declared")
    cls_idx = names.index(cls_name)
    feat_idx = [names.index(i) for i in inputs] if inputs else [i for i in range(len(attrs)) if i != cls_idx]

    schema = []
    for i in feat_idx:
        aname, kind, cats = attrs[i]
        if kind == "categorical" and len(cats) < 2:
            cats = cats + ["__other__"]  # keep the one-hot width stable
        schema.append(FeatureSpec(aname, kind, cats))

    rows, labels = [], []
    for lineno, line in data_lines:
        vals = [v.strip().strip("'") for v in line.split(",")]
        if len(vals) != len(attrs):
            raise DataFormatError(f"line {lineno}: expected {len(attrs)} values, got {len(vals)}")
        if any(v in ("?", "") for v in vals):
            raise DataFormatError(f"line {lineno}: missing values are not supported")
        row = []
        for spec, i in zip(schema, feat_idx):
            v = vals[i]
            if spec.kind == "numeric":
                try:
                    row.append(float(v))
                except ValueError:
                    raise DataFormatError(f"line {lineno}: {spec.name}={v!r} is not numeric") from None
            else:
                if v not in spec.categories:
                    raise DataFormatError(f"line {lineno}: {v!r} not a category of {spec.name}")
                row.append(v)
        rows.append(row)
        labels.append(vals[cls_idx])

    classes = sorted(set(labels))
    if len(classes) != 2:
        raise DataFormatError(f"binary data required, found {len(classes)} classes")
    declared = attrs[cls_idx][2]
    positive = _pick_minority(labels, declared)
    return Dataset(schema, rows, labels, positive, name)


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def parse_csv(text: str, positive_label: str | None = None, class_column: str | None = None,
              name: str = "") -> Dataset:
    """Parse a headed CSV; the class column is ``class_column`` or the last one.

    A column is numeric iff every value parses as a float.  Without
    ``positive_label`` the less frequent class is taken.
    """
    records = [r for r in csv.reader(io.StringIO(text)) if any(c.strip() for c in r)]
    if len(records) < 2:
        raise DataFormatError("CSV needs a header and at least one data row")
    header = [h.strip() for h in records[0]]
    body = [[c.strip() for c in r] for r in records[1:]]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataFormatError(f"line {i}: expected {len(header)} values, got {len(r)}")
    cls_idx = header.index(class_column) if class_column else len(header) - 1
    labels = [r[cls_idx] for r in body]
    schema, cols = [], []
    for j, h in enumerate(header):
        if j == cls_idx:
            continue
        col = [r[j] for r in body]
        if any(v in ("", "?") for v in col):
            raise DataFormatError(f"column {h!r} has missing values")
        if all(_is_number(v) for v in col):
            schema.append(FeatureSpec(h, "numeric"))
        else:
            cats = list(dict.fromkeys(col))
            if len(cats) < 2:
                cats = cats + ["__other__"]
            schema.append(FeatureSpec(h, "categorical", cats))
        cols.append(j)
    rows = [[float(r[j]) if s.kind == "numeric" else r[j] for s, j in zip(schema, cols)] for r in body]
    if len(set(labels)) != 2:
        raise DataFormatError(f"binary data required, found {len(set(labels))} classes")
    if positive_label is None:
        positive_label = _pick_minority(labels, list(dict.fromkeys(labels)))
    elif positive_label not in labels:
        raise DataFormatError(f"positive label {positive_label!r} absent from data")
    return Dataset(schema, rows, labels, positive_label, name)


def load_dataset(path) -> Dataset:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".csv":
        return parse_csv(text, name=path.stem)
    return parse_keel(text, name=path.stem)


# the 20 benchmark sets, in the order they are usually tabulated
KEEL_DATASETS = [
    "abalone9-18", "ecoli4", "page-blocks-1-3-vs-4", "yeast5", "yeast-0-5-6-7-9-vs-4",
    "yeast-2-vs-4", "ecoli1", "ecoli2", "ecoli3", "ecoli-0-vs-1", "glass-0-1-2-3-vs-4-5-6",
    "haberman", "newthyroid2", "segment0", "vehicle2", "yeast3", "heart", "ionosphere",
    "spambase", "titanic",
]


def keel_path(name: str):
    return resources.files("semres_ddpm") / "data" / "keel" / f"{name}.dat"


def load_keel(name: str) -> Dataset:
    """Load one of the bundled KEEL benchmark files by name."""
    if name not in KEEL_DATASETS:
        raise KeyError(f"unknown bundled dataset {name!r}")
    ds = parse_keel(keel_path(name).read_text(encoding="utf-8"))
    ds.name = name
    return ds


@dataclass
class Normalizer:
    """Fitted per-feature state: (min, max) for numeric, category order for categorical."""

    schema: list[FeatureSpec]
    mins: dict[int, float]
    maxs: dict[int, float]

    @property
    def column_map(self) -> list[tuple[int, int | None]]:
        """Origin of each encoded column: (feature index, category index or None)."""
        out = []
        for j, f in enumerate(self.schema):
            if f.kind == "numeric":
                out.append((j, None))
            else:
                out.extend((j, c) for c in range(len(f.categories)))
        return out

    @property
    def width(self) -> int:
        return len(self.column_map)

    def _scale(self, j: int) -> float:
        span = self.maxs[j] - self.mins[j]
        # constant feature: shift only, so fitted rows land on 0
        return span if span > 0 else 1.0

    def transform(self, rows) -> np.ndarray:
        if len(rows) == 0:
            return np.zeros((0, self.width))
        out = np.zeros((len(rows), self.width))
        col = 0
        for j, f in enumerate(self.schema):
            if f.kind == "numeric":
                v = np.array([float(r[j]) for r in rows])
                out[:, col] = (v - self.mins[j]) / self._scale(j)
                col += 1
            else:
                index = {c: k for k, c in enumerate(f.categories)}
                for i, r in enumerate(rows):
                    try:
                        out[i, col + index[r[j]]] = 1.0
                    except KeyError:
                        raise DataFormatError(f"category {r[j]!r} not in schema for {f.name}") from None
                col += len(f.categories)
        return out

    def inverse(self, matrix: np.ndarray) -> list[list]:
        """Decode: clamp numeric columns to [0, 1], argmax each one-hot group."""
        M = np.asarray(matrix, dtype=np.float64)
        if M.ndim != 2 or M.shape[1] != self.width:
            raise ValueError(f"matrix width {M.shape[-1]} does not match encoded width {self.width}")
        cols = []
        c = 0
        for j, f in enumerate(self.schema):
            if f.kind == "numeric":
                x = np.clip(M[:, c], 0.0, 1.0)
                cols.append(list(self.mins[j] + x * (self.maxs[j] - self.mins[j])))
                c += 1
            else:
                k = len(f.categories)
                picks = np.argmax(M[:, c:c + k], axis=1)  # first index wins ties
                cols.append([f.categories[p] for p in picks])
                c += k
        return [list(r) for r in zip(*cols)] if cols else [[] for _ in range(len(M))]

    def to_dict(self) -> dict:
        return {"features": [
            {"name": f.name, "kind": f.kind, "categories": f.categories,
             "min": self.mins.get(j), "max": self.maxs.get(j)}
            for j, f in enumerate(self.schema)]}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        schema, mins, maxs = [], {}, {}
        for j, f in enumerate(d["features"]):
            schema.append(FeatureSpec(f["name"], f["kind"], list(f["categories"])))
            if f["kind"] == "numeric":
                mins[j], maxs[j] = float(f["min"]), float(f["max"])
        return cls(schema, mins, maxs)


@dataclass
class EncodedMatrix:
    values: np.ndarray
    column_map: list[tuple[int, int | None]]


def fit_normalizer(rows, schema: list[FeatureSpec]) -> Normalizer:
    if len(rows) == 0:
        raise ValueError("cannot fit a normalizer on zero rows")
    mins, maxs = {}, {}
    for j, f in enumerate(schema):
        if f.kind == "numeric":
            v = [float(r[j]) for r in rows]
            mins[j], maxs[j] = min(v), max(v)
    return Normalizer(list(schema), mins, maxs)


def fit_encode(rows, schema: list[FeatureSpec]) -> tuple[EncodedMatrix, Normalizer]:
    norm = fit_normalizer(rows, schema)
    return EncodedMatrix(norm.transform(rows), norm.column_map), norm


def decode(matrix, normalizer: Normalizer, schema: list[FeatureSpec] | None = None) -> list[list]:
    if schema is not None and [f.name for f in schema] != [f.name for f in normalizer.schema]:
        raise ValueError("schema does not match the normalizer")
    return normalizer.inverse(matrix)


def class_stats(dataset: Dataset) -> tuple[int, int, float]:
    n_min = sum(1 for lab in dataset.labels if lab == dataset.positive_label)
    n_maj = dataset.n - n_min
    return n_min, n_maj, n_maj / n_min


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray

    def test_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def stratified_kfold(dataset: Dataset | np.ndarray, k: int, seed: int = 0) -> FoldPlan:
    """Shuffle each class and deal its members round-robin over the folds.

    Dealing continues where the previous class stopped so total fold sizes
    stay balanced too.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    y = dataset.y if isinstance(dataset, Dataset) else np.asarray(dataset)
    rng = np.random.default_rng(seed)
    assign = np.full(len(y), -1)
    offset = 0
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        if len(members) < k:
            raise ValueError(f"class {cls} has {len(members)} members, fewer than k={k}")
        members = rng.permutation(members)
        assign[members] = (np.arange(len(members)) + offset) % k
        offset = (offset + len(members)) % k
    return FoldPlan(k, assign)
