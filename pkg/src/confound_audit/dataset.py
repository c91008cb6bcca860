"""Tabular ingestion, value filtering, binarization, imputation and patient-level splits.

A :class:`Dataset` holds one row per radiograph (or sample): typed covariate
columns, a patient identifier, and an optional dense feature matrix. Every
operation returns a new dataset; inputs are never modified.
"""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import yaml

from confound_audit.errors import ConfigError, DataError, DegenerateFitWarning, ParseWarning

log = logging.getLogger(__name__)

KINDS = ("continuous", "categorical", "binary")
GROUPS = ("OUTCOME", "PT", "HP", "IMG", "META")
MISSING_LEVEL = "(Missing)"
MISSING_SENTINELS = ("", "NA")
FEATURE_COLUMN = re.compile(r"^f(\d+)$")
# regression imputation falls back to the median above this design condition number
MAX_CONDITION_NUMBER = 1e10


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str
    group: str
    unit: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if self.group not in GROUPS:
            raise ConfigError(f"variable {self.name!r}: unknown group {self.group!r}")


@dataclass(frozen=True)
class Schema:
    variables: tuple[VariableSpec, ...]
    id_column: str = "row_id"
    patient_column: str = "patient_id"
    delimiter: str = ","
    features_file: str | None = None

    def __post_init__(self):
        validate_schema(self.variables)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]


def validate_schema(variables: Sequence[VariableSpec]) -> None:
    names = [v.name for v in variables]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"duplicate variable names in schema: {dupes}")
    outcomes = [v for v in variables if v.group == "OUTCOME"]
    if len(outcomes) != 1 or outcomes[0].kind != "binary":
        raise ConfigError("schema needs exactly one OUTCOME variable of kind binary")


def load_schema(path: str | Path) -> Schema:
    """Read a YAML (or JSON) schema file.

    Variables may be given as a mapping ``name: {kind, group, unit}`` or as a
    list of mappings with a ``name`` key.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"schema file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse schema {path}: {exc}") from exc
    return schema_from_dict(raw or {})


def schema_from_dict(raw: Mapping) -> Schema:
    entries = raw.get("variables")
    if not entries:
        raise ConfigError("schema has no variables")
    if isinstance(entries, Mapping):
        entries = [{"name": k, **(v or {})} for k, v in entries.items()]
    try:
        variables = tuple(
            VariableSpec(str(e["name"]), str(e["kind"]), str(e["group"]), str(e.get("unit", "")))
            for e in entries
        )
    except KeyError as exc:
        raise ConfigError(f"schema variable missing field {exc}") from exc
    return Schema(
        variables,
        id_column=raw.get("id_column", "row_id"),
        patient_column=raw.get("patient_column", "patient_id"),
        delimiter=raw.get("delimiter", ","),
        features_file=raw.get("features_file"),
    )


def schema_to_dict(schema: Schema) -> dict:
    out = {
        "id_column": schema.id_column,
        "patient_column": schema.patient_column,
        "delimiter": schema.delimiter,
        "variables": [
            {"name": v.name, "kind": v.kind, "group": v.group, **({"unit": v.unit} if v.unit else {})}
            for v in schema.variables
        ],
    }
    if schema.features_file:
        out["features_file"] = schema.features_file
    return out


@dataclass(frozen=True)
class Dataset:
    schema: tuple[VariableSpec, ...]
    table: pd.DataFrame = field(repr=False)
    patient_id: np.ndarray = field(repr=False)
    features: np.ndarray | None = field(default=None, repr=False)
    parse_warnings: int = 0
    binary_levels: Mapping[str, tuple[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        validate_schema(self.schema)
        if list(self.table.columns) != [v.name for v in self.schema]:
            raise DataError("table columns do not match the schema order")
        if len(self.patient_id) != len(self.table):
            raise DataError("patient_id length differs from row count")
        if self.features is not None:
            if self.features.ndim != 2 or self.features.shape[0] != len(self.table):
                raise DataError("features must be an n x D matrix aligned with rows")

    def __len__(self) -> int:
        return len(self.table)

    @property
    def row_ids(self) -> np.ndarray:
        return self.table.index.to_numpy()

    @property
    def missing_mask(self) -> pd.DataFrame:
        return self.table.isna()

    @property
    def outcome(self) -> str:
        return next(v.name for v in self.schema if v.group == "OUTCOME")

    def spec(self, name: str) -> VariableSpec:
        for v in self.schema:
            if v.name == name:
                return v
        raise DataError(f"unknown variable {name!r}")

    def names_in(self, *groups: str) -> list[str]:
        return [v.name for v in self.schema if v.group in groups]

    def covariates(self) -> list[str]:
        return self.names_in("PT", "HP")

    def column(self, name: str) -> pd.Series:
        self.spec(name)
        return self.table[name]

    def subset(self, positions) -> "Dataset":
        positions = np.asarray(positions, dtype=int)
        return replace(
            self,
            table=self.table.iloc[positions],
            patient_id=self.patient_id[positions],
            features=None if self.features is None else self.features[positions],
        )

    def with_columns(self, values: Mapping[str, pd.Series], kinds: Mapping[str, str] | None = None,
                     binary_levels: Mapping[str, tuple[str, str]] | None = None) -> "Dataset":
        kinds = kinds or {}
        table = self.table.copy()
        for name, series in values.items():
            self.spec(name)
            table[name] = series
        schema = tuple(replace(v, kind=kinds[v.name]) if v.name in kinds else v for v in self.schema)
        levels = dict(self.binary_levels)
        levels.update(binary_levels or {})
        return replace(self, schema=schema, table=table, binary_levels=levels)


# --------------------------------------------------------------------------- ingest


def _exact_float(cell) -> float:
    # pd.to_numeric is not round-trip exact; float() is
    if not isinstance(cell, str):
        return np.nan
    try:
        value = float(cell)
    except ValueError:
        return np.nan
    return value if np.isfinite(value) else np.nan


def _parse_column(raw: pd.Series, spec: VariableSpec) -> tuple[pd.Series, int]:
    missing = raw.isin(MISSING_SENTINELS)
    if spec.kind == "continuous":
        values = raw.where(~missing).map(_exact_float)
        bad = int((values.isna() & ~missing).sum())
        return values.astype(float), bad
    values = raw.where(~missing).astype(object)
    if spec.kind == "binary":
        numeric = values.map(_exact_float).astype(float)
        present = values.notna()
        if present.any() and numeric[present].isin([0.0, 1.0]).all():
            return numeric.astype(float), 0
        if spec.group == "OUTCOME":
            bad = int((present & ~numeric.isin([0.0, 1.0])).sum())
            return numeric.where(numeric.isin([0.0, 1.0])).astype(float), bad
    values[values.isna()] = np.nan
    return values, 0


def load_table(path: str | Path, schema: Schema | Sequence[VariableSpec], *,
               features_path: str | Path | None = None) -> Dataset:
    """Read a delimited file with a header row into a :class:`Dataset`.

    Empty cells and the literal ``NA`` are missing. Cells that cannot be parsed
    for their declared kind are also marked missing and counted in
    ``parse_warnings``. Feature vectors come from ``f0..f{D-1}`` columns in the
    same file or from ``features_path`` (keyed by the id column).
    """
    if not isinstance(schema, Schema):
        schema = Schema(tuple(schema))
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    frame = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False,
                        encoding="utf-8")
    required = [schema.id_column, schema.patient_column, *schema.names]
    absent = [c for c in required if c not in frame.columns]
    if absent:
        raise DataError(f"{path.name}: header lacks columns {absent}")
    ids = frame[schema.id_column]
    if ids.duplicated().any():
        raise DataError(f"{path.name}: duplicate row identifiers {sorted(ids[ids.duplicated()].unique())[:5]}")

    columns, bad_total = {}, 0
    for spec in schema.variables:
        parsed, bad = _parse_column(frame[spec.name], spec)
        columns[spec.name] = parsed.to_numpy()
        if bad:
            bad_total += bad
            warnings.warn(f"{path.name}: {bad} unparseable cell(s) in {spec.name!r} set missing",
                          ParseWarning, stacklevel=2)
    table = pd.DataFrame(columns, index=pd.Index(ids.to_numpy(), name=schema.id_column))

    features = None
    feat_cols = sorted((c for c in frame.columns if FEATURE_COLUMN.match(c)),
                       key=lambda c: int(FEATURE_COLUMN.match(c).group(1)))
    features_path = features_path or (path.parent / schema.features_file if schema.features_file else None)
    if feat_cols:
        features = _numeric_block(frame[feat_cols], path.name)
    elif features_path is not None:
        features = _load_features(Path(features_path), schema, table.index)

    return Dataset(tuple(schema.variables), table, frame[schema.patient_column].to_numpy(dtype=object),
                   features, parse_warnings=bad_total)


def _numeric_block(block: pd.DataFrame, where: str) -> np.ndarray:
    try:
        values = block.to_numpy(dtype=str).astype(float)
    except ValueError as exc:
        raise DataError(f"{where}: feature vectors must be complete and numeric") from exc
    if not np.all(np.isfinite(values)):
        raise DataError(f"{where}: feature vectors must be complete and numeric")
    return values


def _load_features(path: Path, schema: Schema, ids: pd.Index) -> np.ndarray:
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    frame = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False)
    if schema.id_column not in frame.columns:
        raise DataError(f"{path.name}: feature file lacks id column {schema.id_column!r}")
    frame = frame.set_index(schema.id_column)
    if frame.index.duplicated().any():
        raise DataError(f"{path.name}: duplicate row identifiers")
    missing = ids.difference(frame.index)
    if len(missing):
        raise DataError(f"{path.name}: no feature vector for rows {list(missing[:5])}")
    cols = sorted((c for c in frame.columns if FEATURE_COLUMN.match(c)),
                  key=lambda c: int(FEATURE_COLUMN.match(c).group(1)))
    return _numeric_block(frame.loc[ids, cols], path.name)


def write_table(ds: Dataset, path: str | Path, schema: Schema | None = None) -> None:
    """Write ``ds`` in the format :func:`load_table` reads, features inline as ``f0..``."""
    schema = schema or Schema(ds.schema)
    out = ds.table.copy()
    for spec in ds.schema:
        if spec.kind == "binary" and pd.api.types.is_float_dtype(out[spec.name]):
            out[spec.name] = out[spec.name].map(lambda v: "" if pd.isna(v) else str(int(v)))
    out.insert(0, schema.patient_column, ds.patient_id)
    out.index.name = schema.id_column
    if ds.features is not None:
        feats = pd.DataFrame(ds.features, index=out.index,
                             columns=[f"f{j}" for j in range(ds.features.shape[1])])
        out = pd.concat([out, feats], axis=1)
    out.to_csv(path, sep=schema.delimiter, na_rep="NA", float_format="%.17g")


# --------------------------------------------------------------------------- filtering


@dataclass(frozen=True)
class FilterRule:
    variable: str
    min: float | None = None
    max: float | None = None
    action: str = "set-missing"

    def __post_init__(self):
        if self.min is not None and self.max is not None and not self.min < self.max:
            raise ConfigError(f"filter on {self.variable!r}: min must be below max")
        if self.action != "set-missing":
            raise ConfigError(f"filter on {self.variable!r}: unsupported action {self.action!r}")


def apply_filters(ds: Dataset, rules: Iterable[FilterRule]) -> tuple[Dataset, int]:
    """Set values outside each rule's ``[min, max]`` to missing.

    Returns the filtered dataset and the number of cells altered.
    """
    updates, altered = {}, 0
    for rule in rules:
        spec = ds.spec(rule.variable)
        if spec.kind != "continuous":
            raise ConfigError(f"filter on {rule.variable!r}: only continuous variables can be range-filtered")
        col = updates.get(rule.variable, ds.table[rule.variable])
        out = pd.Series(False, index=col.index)
        if rule.min is not None:
            out |= col < rule.min
        if rule.max is not None:
            out |= col > rule.max
        altered += int(out.sum())
        updates[rule.variable] = col.mask(out)
    return (ds.with_columns(updates) if updates else ds), altered


# --------------------------------------------------------------------------- binarization


@dataclass(frozen=True)
class BinarizationRule:
    variable: str
    method: str = "median-split"
    level_map: Mapping[str, int | None] | None = None

    def __post_init__(self):
        if self.method not in ("median-split", "top-two-levels", "level-map"):
            raise ConfigError(f"binarize {self.variable!r}: unknown method {self.method!r}")
        if self.method == "level-map" and not self.level_map:
            raise ConfigError(f"binarize {self.variable!r}: level-map needs a level_map")


def _level_labels(col: pd.Series) -> pd.Series:
    if pd.api.types.is_numeric_dtype(col):
        return col.map(lambda v: np.nan if pd.isna(v) else (str(int(v)) if float(v).is_integer() else repr(float(v))))
    return col.map(lambda v: np.nan if pd.isna(v) else str(v))


def binarize(ds: Dataset, rules: Iterable[BinarizationRule]) -> Dataset:
    """Coerce each rule's variable to a 0/1 column (missing preserved).

    ``median-split``: 1 when strictly greater than the median of observed values.
    ``top-two-levels``: the most frequent level maps to 0, the runner-up to 1,
    every other level becomes missing; frequency ties break alphabetically.
    Levels named ``0``/``1`` keep their own values. ``level-map``: explicit
    mapping, unmapped levels become missing.
    """
    updates, kinds, labels = {}, {}, {}
    for rule in rules:
        spec = ds.spec(rule.variable)
        col = ds.table[rule.variable]
        present = col.dropna()
        if present.nunique() < 2:
            raise DataError(f"binarize {rule.variable!r}: fewer than two distinct observed values")

        if rule.method == "median-split":
            if spec.kind != "continuous":
                raise ConfigError(f"binarize {rule.variable!r}: median-split needs a continuous variable")
            median = float(np.median(present.to_numpy(dtype=float)))
            out = (col > median).astype(float).where(col.notna())
            labels[rule.variable] = (f"<= {median:g}", f"> {median:g}")
        elif rule.method == "top-two-levels":
            names = _level_labels(col)
            counts = names.value_counts()
            order = sorted(counts.index, key=lambda lv: (-counts[lv], lv))
            first, second = order[0], order[1]
            if {first, second} == {"0", "1"}:
                first, second = "0", "1"
            out = names.map({first: 0.0, second: 1.0}).astype(float)
            labels[rule.variable] = (first, second)
        else:
            names = _level_labels(col)
            mapping = {str(k): (np.nan if v is None else float(v)) for k, v in rule.level_map.items()}
            bad = {v for v in mapping.values() if not (np.isnan(v) or v in (0.0, 1.0))}
            if bad:
                raise ConfigError(f"binarize {rule.variable!r}: level_map targets must be 0, 1 or null")
            out = names.map(mapping).astype(float)
            zero = sorted(k for k, v in mapping.items() if v == 0.0)
            one = sorted(k for k, v in mapping.items() if v == 1.0)
            labels[rule.variable] = ("|".join(zero), "|".join(one))

        if out.dropna().nunique() != 2:
            raise DataError(f"binarize {rule.variable!r}: result does not have two observed levels")
        updates[rule.variable] = out
        kinds[rule.variable] = "binary"
    return ds.with_columns(updates, kinds=kinds, binary_levels=labels)


# --------------------------------------------------------------------------- imputation


def encode_columns(table: pd.DataFrame, specs: Sequence[VariableSpec]) -> pd.DataFrame:
    """Numeric design block: continuous and 0/1 binary as-is, other levels one-hot.

    Categorical columns drop their most frequent level (ties alphabetical) as
    the reference, so ``(Missing)`` becomes its own indicator column.
    """
    blocks = []
    for spec in specs:
        col = table[spec.name]
        if pd.api.types.is_numeric_dtype(col):
            blocks.append(col.astype(float).rename(spec.name))
            continue
        names = col.astype(str)
        counts = names.value_counts()
        levels = sorted(counts.index, key=lambda lv: (-counts[lv], lv))
        for lv in sorted(levels[1:]):
            blocks.append((names == lv).astype(float).rename(f"{spec.name}={lv}"))
    if not blocks:
        return pd.DataFrame(index=table.index)
    return pd.concat(blocks, axis=1)


def impute(ds: Dataset, regression_targets: Sequence[str] = ()) -> Dataset:
    """Fill every missing covariate cell (PT and HP groups).

    Categorical (and binary) gaps become an explicit ``(Missing)`` level;
    continuous gaps take the observed median, except ``regression_targets``,
    which are predicted by least squares on all other covariates (themselves
    median/``(Missing)``-filled first). Observed cells are never changed.
    """
    covariates = ds.covariates()
    for name in regression_targets:
        if name not in covariates:
            raise ConfigError(f"regression imputation target {name!r} is not a PT/HP covariate")
        if ds.spec(name).kind != "continuous":
            raise ConfigError(f"regression imputation target {name!r} must be continuous")

    filled, kinds = {}, {}
    for name in covariates:
        spec, col = ds.spec(name), ds.table[name]
        if not col.isna().any():
            filled[name] = col
        elif spec.kind == "continuous":
            if col.notna().sum() == 0:
                raise DataError(f"impute {name!r}: no observed values")
            filled[name] = col.fillna(float(np.median(col.dropna())))
        else:
            filled[name] = _level_labels(col).fillna(MISSING_LEVEL).astype(object)
            kinds[name] = "categorical"

    table_filled = pd.DataFrame(filled, index=ds.table.index)
    specs = [replace(ds.spec(n), kind=kinds.get(n, ds.spec(n).kind)) for n in covariates]
    updates = dict(filled)
    for name in regression_targets:
        target = ds.table[name]
        observed = target.notna().to_numpy()
        if not observed.any():
            raise DataError(f"regression imputation of {name!r}: zero observed rows")
        if observed.all():
            continue
        others = [s for s in specs if s.name != name]
        design = encode_columns(table_filled, others).to_numpy(dtype=float)
        design = np.column_stack([np.ones(len(design)), design])
        fit_rows = design[observed]
        cond = np.linalg.cond(fit_rows) if fit_rows.shape[0] >= fit_rows.shape[1] else np.inf
        if not np.isfinite(cond) or cond > MAX_CONDITION_NUMBER:
            warnings.warn(f"regression imputation of {name!r}: design condition number {cond:.3g} "
                          "too large, falling back to the median", DegenerateFitWarning, stacklevel=2)
            continue
        beta, *_ = np.linalg.lstsq(fit_rows, target.to_numpy(dtype=float)[observed], rcond=None)
        predicted = design[~observed] @ beta
        col = target.copy()
        col[~observed] = predicted
        updates[name] = col
        log.info("imputed %d value(s) of %s by regression on %d rows", (~observed).sum(), name,
                 observed.sum())
    return ds.with_columns(updates, kinds=kinds)


# --------------------------------------------------------------------------- partitioning


@dataclass(frozen=True)
class Partition:
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int
    ratio: float

    @property
    def achieved_ratio(self) -> float:
        return len(self.train_indices) / (len(self.train_indices) + len(self.test_indices))


def partition_by_patient(ds: Dataset, ratio: float = 0.75, seed: int = 0) -> Partition:
    """Randomly assign whole patients to train (fraction ``ratio`` of patients) or test."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"partition ratio must be in (0, 1), got {ratio}")
    patients = np.unique(ds.patient_id.astype(str))
    if len(patients) < 2:
        raise DataError("partitioning needs at least two patients")
    n_train = int(np.clip(round(ratio * len(patients)), 1, len(patients) - 1))
    rng = np.random.default_rng(seed)
    train_patients = set(rng.permutation(patients)[:n_train].tolist())
    in_train = np.array([p in train_patients for p in ds.patient_id.astype(str)])
    return Partition(np.flatnonzero(in_train), np.flatnonzero(~in_train), int(seed), float(ratio))
