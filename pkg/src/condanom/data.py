"""Binary tabular datasets: schema, CSV I/O, projection and a seeded generator.

Every attribute is binary. One attribute is the *target* whose observed value
gets scored; the rest form the *context* that the target is conditioned on.
"""

from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed inputs: schema violations, bad cells, bad configs."""


@dataclass(frozen=True)
class AttributeSchema:
    attribute_names: tuple[str, ...]
    context_indices: tuple[int, ...]
    target_index: int

    def __post_init__(self):
        names = tuple(self.attribute_names)
        object.__setattr__(self, "attribute_names", names)
        object.__setattr__(self, "context_indices", tuple(int(i) for i in self.context_indices))
        if any(not n for n in names):
            raise DataError("attribute names must be nonempty")
        if len(set(names)) != len(names):
            raise DataError("attribute names must be unique")
        d = len(names)
        ctx = set(self.context_indices)
        if len(ctx) != len(self.context_indices):
            raise DataError("context indices repeat")
        if not 0 <= self.target_index < d:
            raise DataError(f"target index {self.target_index} out of range for {d} attributes")
        if self.target_index in ctx:
            raise DataError("target attribute cannot also be a context attribute")
        if ctx | {self.target_index} != set(range(d)):
            raise DataError("context and target must cover every attribute")

    @property
    def n_attributes(self) -> int:
        return len(self.attribute_names)

    @property
    def n_context(self) -> int:
        return len(self.context_indices)

    @property
    def target_name(self) -> str:
        return self.attribute_names[self.target_index]

    @property
    def context_names(self) -> tuple[str, ...]:
        return tuple(self.attribute_names[i] for i in self.context_indices)

    @classmethod
    def from_names(cls, names: Sequence[str], target: str,
                   context: Sequence[str] | None = None) -> "AttributeSchema":
        names = list(names)
        if target not in names:
            raise DataError(f"target column {target!r} not among attributes {names}")
        if context is None:
            context = [n for n in names if n != target]
        missing = [c for c in context if c not in names]
        if missing:
            raise DataError(f"context columns not found: {missing}")
        # columns named neither as context nor target are dropped by the caller
        keep = [n for n in names if n == target or n in set(context)]
        return cls(tuple(keep), tuple(keep.index(c) for c in context), keep.index(target))


@dataclass(frozen=True)
class SchemaSpec:
    """Role assignment read from a ``key = value`` file: ``target`` and optional ``context``."""

    target: str
    context: tuple[str, ...] | None = None


def read_schema_spec(path: str | Path) -> SchemaSpec:
    parser = configparser.ConfigParser()
    text = Path(path).read_text()
    parser.read_string("[schema]\n" + text)
    sec = parser["schema"]
    if "target" not in sec or not sec["target"].strip():
        raise DataError(f"{path}: schema spec must name 'target = <column>'")
    context = None
    if "context" in sec:
        context = tuple(c.strip() for c in sec["context"].replace("\n", ",").split(",") if c.strip())
    return SchemaSpec(sec["target"].strip(), context)


@dataclass(frozen=True)
class Instance:
    values: np.ndarray
    case_id: str | None = None


def project(instance: Instance | np.ndarray, schema: AttributeSchema) -> tuple[np.ndarray, int]:
    """Split a full attribute vector into (context vector, target value)."""
    values = instance.values if isinstance(instance, Instance) else instance
    values = np.asarray(values)
    if values.shape != (schema.n_attributes,):
        raise DataError(
            f"instance has shape {values.shape}, schema expects ({schema.n_attributes},)")
    return values[list(schema.context_indices)], int(values[schema.target_index])


@dataclass(frozen=True)
class Dataset:
    schema: AttributeSchema
    rows: np.ndarray
    case_ids: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.int8, copy=True)
        if rows.ndim != 2 or rows.shape[1] != self.schema.n_attributes:
            raise DataError(
                f"rows must be n x {self.schema.n_attributes}, got shape {rows.shape}")
        bad = np.argwhere((rows != 0) & (rows != 1))
        if bad.size:
            r, c = bad[0]
            raise DataError(f"non-binary value in row {r}, column {self.schema.attribute_names[c]!r}")
        ids = tuple(str(i) for i in self.case_ids)
        if len(ids) != rows.shape[0]:
            raise DataError(f"{len(ids)} case ids for {rows.shape[0]} rows")
        index = {cid: i for i, cid in enumerate(ids)}
        if len(index) != len(ids):
            raise DataError("duplicate case ids")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "case_ids", ids)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def contexts(self) -> np.ndarray:
        """Context columns as a float matrix, n x d_c."""
        return self.rows[:, list(self.schema.context_indices)].astype(float)

    @property
    def targets(self) -> np.ndarray:
        return self.rows[:, self.schema.target_index].astype(int)

    def __contains__(self, case_id: str) -> bool:
        return case_id in self._index

    def index_of(self, case_id: str) -> int:
        try:
            return self._index[case_id]
        except KeyError:
            raise KeyError(f"unknown case id {case_id!r}") from None

    def instance(self, case_id: str) -> Instance:
        # copy so callers can mutate the extracted row freely
        return Instance(self.rows[self.index_of(case_id)].copy(), case_id)

    def without(self, case_ids: Iterable[str]) -> "Dataset":
        drop = {self.index_of(c) for c in case_ids}
        keep = [i for i in range(len(self)) if i not in drop]
        return self.subset(keep)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = list(indices)
        return Dataset(self.schema, self.rows[indices], tuple(self.case_ids[i] for i in indices))


def load_csv(path: str | Path, schema_spec: SchemaSpec) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        has_id = "id" in header
        columns = [h for h in header if h != "id"]
        if schema_spec.target not in columns:
            raise DataError(f"{path}: target column {schema_spec.target!r} absent from header")
        schema = AttributeSchema.from_names(columns, schema_spec.target, schema_spec.context)
        col_pos = [header.index(n) for n in schema.attribute_names]
        id_pos = header.index("id") if has_id else None

        rows, ids = [], []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(record)}")
            row = []
            for name, pos in zip(schema.attribute_names, col_pos):
                cell = record[pos].strip()
                if cell not in ("0", "1"):
                    raise DataError(
                        f"{path}:{lineno}: non-binary value {cell!r} in column {name!r}")
                row.append(int(cell))
            rows.append(row)
            ids.append(record[id_pos].strip() if has_id else str(len(ids)))
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise DataError(f"{path}: duplicate id {dup!r}")
    matrix = np.array(rows, dtype=np.int8).reshape(len(rows), schema.n_attributes)
    return Dataset(schema, matrix, tuple(ids))


def write_csv(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *dataset.schema.attribute_names])
        for cid, row in zip(dataset.case_ids, dataset.rows):
            writer.writerow([cid, *(int(v) for v in row)])


# ---------------------------------------------------------------------------
# Synthetic PORT-shaped data
# ---------------------------------------------------------------------------

PORT_CONTEXT = (
    "age_gt_50",
    "male",
    "congestive_heart_failure",
    "cerebrovascular_disease",
    "neoplastic_disease",
    "renal_disease",
    "liver_disease",
    "altered_mental_status",
    "pulse_ge_125",
    "resp_rate_ge_30",
    "systolic_bp_lt_90",
    "temp_abnormal",
    "bun_ge_30",
    "glucose_ge_250",
    "hematocrit_lt_30",
    "sodium_lt_130",
    "pao2_lt_60",
    "arterial_ph_lt_7_35",
    "pleural_effusion",
)
PORT_TARGET = "hospitalization"


def port_schema() -> AttributeSchema:
    names = PORT_CONTEXT + (PORT_TARGET,)
    return AttributeSchema(names, tuple(range(len(PORT_CONTEXT))), len(PORT_CONTEXT))


# Arbitrary fixed coefficients. They are not estimates of any clinical
# distribution; they only give the data relevant, duplicated and
# irrelevant features so metric choice matters.
DEFAULT_MARGINALS = {
    "age_gt_50": 0.55,
    "male": 0.5,
    "congestive_heart_failure": 0.1,
    "cerebrovascular_disease": 0.08,
    "neoplastic_disease": 0.06,
    "renal_disease": 0.1,
    "liver_disease": 0.05,
    "altered_mental_status": 0.12,
    "pulse_ge_125": 0.3,
    "resp_rate_ge_30": 0.15,
    "systolic_bp_lt_90": 0.05,
    "temp_abnormal": 0.25,
    "bun_ge_30": 0.1,
    "glucose_ge_250": 0.06,
    "hematocrit_lt_30": 0.06,
    "sodium_lt_130": 0.07,
    "pao2_lt_60": 0.1,
    "arterial_ph_lt_7_35": 0.06,
    "pleural_effusion": 0.2,
}

# (parent, child, P(child=1 | parent=1), P(child=1 | parent=0))
DEFAULT_DEPENDENCIES = (
    ("renal_disease", "bun_ge_30", 0.9, 0.1),
    ("age_gt_50", "congestive_heart_failure", 0.25, 0.05),
    ("pulse_ge_125", "temp_abnormal", 0.8, 0.2),
    ("hematocrit_lt_30", "pleural_effusion", 0.85, 0.15),
    ("resp_rate_ge_30", "pao2_lt_60", 0.7, 0.05),
)

DEFAULT_WEIGHTS = {
    "age_gt_50": 2.5,
    "congestive_heart_failure": 2.0,
    "neoplastic_disease": 3.0,
    "renal_disease": 3.0,
    "altered_mental_status": 3.0,
    "resp_rate_ge_30": 3.5,
    "pao2_lt_60": 1.0,
}
DEFAULT_INTERCEPT = -4.0


@dataclass(frozen=True)
class SyntheticConfig:
    n_cases: int = 2300
    anomaly_rate: float = 0.1
    seed: int = 0
    marginals: dict = field(default_factory=lambda: dict(DEFAULT_MARGINALS))
    dependencies: tuple = DEFAULT_DEPENDENCIES
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    intercept: float = DEFAULT_INTERCEPT

    def validate(self) -> None:
        if self.n_cases < 1:
            raise DataError("n_cases must be positive")
        if not 0.0 <= self.anomaly_rate < 0.5:
            raise DataError(f"anomaly_rate must lie in [0, 0.5), got {self.anomaly_rate}")
        if not 0 <= self.seed < 2**64:
            raise DataError("seed must be a 64-bit unsigned integer")
        names = set(PORT_CONTEXT)
        if set(self.marginals) != names:
            raise DataError(f"marginals must cover exactly {sorted(names)}")
        for name, p in self.marginals.items():
            if not 0.0 < p < 1.0:
                raise DataError(f"marginal for {name!r} must lie in (0, 1), got {p}")
        unknown = set(self.weights) - names
        if unknown:
            raise DataError(f"weights for unknown attributes: {sorted(unknown)}")
        children = [dep[1] for dep in self.dependencies]
        if len(set(children)) != len(children):
            raise DataError("an attribute may have at most one parent")
        for parent, child, p1, p0 in self.dependencies:
            if parent not in names or child not in names:
                raise DataError(f"dependency {parent!r} -> {child!r} names unknown attributes")
            if parent in children:
                raise DataError(f"dependency parent {parent!r} is itself a child (two levels only)")
            if not (0.0 < p1 < 1.0 and 0.0 < p0 < 1.0):
                raise DataError(f"dependency {parent!r} -> {child!r} probabilities must lie in (0, 1)")


@dataclass(frozen=True)
class GroundTruth:
    case_ids: tuple[str, ...]
    anomaly_flags: np.ndarray
    true_conditional: np.ndarray

    def flagged_ids(self) -> list[str]:
        return [c for c, f in zip(self.case_ids, self.anomaly_flags) if f]

    def as_dict(self) -> dict[str, bool]:
        return {c: bool(f) for c, f in zip(self.case_ids, self.anomaly_flags)}


def n_planted(n_cases: int, anomaly_rate: float) -> int:
    """round(rate * n) with halves rounded up."""
    return int(np.floor(anomaly_rate * n_cases + 0.5))


def generate_synthetic(config: SyntheticConfig) -> tuple[Dataset, GroundTruth]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, schema = config.n_cases, port_schema()
    col = {name: j for j, name in enumerate(PORT_CONTEXT)}

    u = rng.random((n, len(PORT_CONTEXT)))
    context = np.zeros((n, len(PORT_CONTEXT)), dtype=np.int8)
    parent_of = {child: (parent, p1, p0) for parent, child, p1, p0 in config.dependencies}
    # roots first, then children that read their parent's sampled column
    for name in sorted(PORT_CONTEXT, key=lambda nm: nm in parent_of):
        j = col[name]
        if name in parent_of:
            parent, p1, p0 = parent_of[name]
            p = np.where(context[:, col[parent]] == 1, p1, p0)
        else:
            p = config.marginals[name]
        context[:, j] = u[:, j] < p

    w = np.array([config.weights.get(name, 0.0) for name in PORT_CONTEXT])
    p_true = 1.0 / (1.0 + np.exp(-(config.intercept + context @ w)))
    target = (rng.random(n) < p_true).astype(np.int8)

    flags = np.zeros(n, dtype=bool)
    m = n_planted(n, config.anomaly_rate)
    if m:
        flipped = rng.choice(n, size=m, replace=False)
        flags[flipped] = True
        target[flipped] = 1 - target[flipped]

    width = max(5, len(str(n - 1)))
    ids = tuple(f"c{i:0{width}d}" for i in range(n))
    rows = np.column_stack([context, target])
    flags.setflags(write=False)
    p_true.setflags(write=False)
    return Dataset(schema, rows, ids), GroundTruth(ids, flags, p_true)


def write_truth_csv(truth: GroundTruth, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "is_anomaly", "p_true"])
        for cid, f, p in zip(truth.case_ids, truth.anomaly_flags, truth.true_conditional):
            writer.writerow([cid, int(f), f"{p:.17g}"])


def load_truth_csv(path: str | Path) -> GroundTruth:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    ids, flags, probs = [], [], []
    with path.open(newline="") as fh:
        for rec in csv.DictReader(fh):
            ids.append(rec["id"])
            flags.append(rec["is_anomaly"].strip() == "1")
            probs.append(float(rec.get("p_true") or "nan"))
    return GroundTruth(tuple(ids), np.array(flags, dtype=bool), np.array(probs))
