"""Case-control cohorts: random control downsampling, Gower-distance greedy matching, balance checks."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from confound_audit import stats
from confound_audit.dataset import Dataset
from confound_audit.errors import ConfigError, DataError, DegenerateFitWarning

log = logging.getLogger(__name__)

LEVELS = ("random", "demographics", "PT", "PT+HP")
LEVEL_ALIASES = {"random": "random", "rnd": "random", "dem": "demographics", "demographics": "demographics",
                 "pt": "PT", "pthp": "PT+HP", "pt+hp": "PT+HP"}
DEMOGRAPHICS = ("age", "gender")


@dataclass(frozen=True)
class MatchSpec:
    variables: tuple[str, ...]
    level: str = "PT+HP"
    seed: int = 0
    caliper: float | None = None

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"unknown matching level {self.level!r}; expected one of {LEVELS}")
        if self.caliper is not None and not self.caliper >= 0:
            raise ConfigError("caliper must be non-negative")

    @classmethod
    def preset(cls, level: str, ds: Dataset, seed: int = 0, caliper: float | None = None) -> "MatchSpec":
        """Expand a ladder level to its variable list against ``ds``'s schema."""
        key = LEVEL_ALIASES.get(level.lower())
        if key is None:
            raise ConfigError(f"unknown matching level {level!r}")
        if key == "random":
            variables: Sequence[str] = ()
        elif key == "demographics":
            variables = DEMOGRAPHICS
        elif key == "PT":
            variables = ds.names_in("PT")
        else:
            variables = ds.names_in("PT", "HP")
        spec = cls(tuple(variables), key, int(seed), caliper)
        spec.check(ds)
        return spec

    def check(self, ds: Dataset) -> None:
        known = set(ds.covariates())
        missing = [v for v in self.variables if v not in known]
        if missing:
            raise ConfigError(f"matching variables not among the schema covariates: {missing}")


@dataclass(frozen=True)
class MatchedCohort:
    pairs: list[tuple[str, str]]
    unmatched_cases: list[str] = field(default_factory=list)
    spec: MatchSpec | None = None
    distances: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        controls = [c for _, c in self.pairs]
        if len(set(controls)) != len(controls):
            raise DataError("a control appears in more than one pair")

    @property
    def cases(self) -> list[str]:
        return [c for c, _ in self.pairs]

    @property
    def controls(self) -> list[str]:
        return [c for _, c in self.pairs]

    @property
    def row_ids(self) -> list[str]:
        """Cases first, then controls, in pair order."""
        return self.cases + self.controls

    def __len__(self) -> int:
        return 2 * len(self.pairs)

    def select(self, ds: Dataset) -> Dataset:
        positions = ds.table.index.get_indexer(self.row_ids)
        if np.any(positions < 0):
            raise DataError("cohort references rows absent from the dataset")
        return ds.subset(positions)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"pair": i, "case_id": a, "control_id": b,
                 "distance": np.nan if self.distances is None else float(self.distances[i])}
                for i, (a, b) in enumerate(self.pairs)]
        rows += [{"pair": -1, "case_id": a, "control_id": "", "distance": np.nan} for a in self.unmatched_cases]
        return pd.DataFrame(rows, columns=["pair", "case_id", "control_id", "distance"])


def _case_control_positions(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    y = ds.table[ds.outcome].to_numpy(dtype=float)
    cases, controls = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    if len(cases) == 0:
        raise DataError("the test set has no cases")
    return cases, controls


def random_case_control(test: Dataset, seed: int = 0) -> MatchedCohort:
    """Pair every case with a distinct, uniformly drawn control."""
    cases, controls = _case_control_positions(test)
    if len(controls) < len(cases):
        raise DataError(f"random case-control needs at least {len(cases)} controls, found {len(controls)}")
    rng = np.random.default_rng(seed)
    drawn = rng.choice(controls, size=len(cases), replace=False)
    ids = test.row_ids
    return MatchedCohort([(ids[a], ids[b]) for a, b in zip(cases, drawn)], [], MatchSpec((), "random", int(seed)))


# --------------------------------------------------------------------------- distance


def _is_continuous(ds: Dataset, name: str) -> bool:
    return ds.spec(name).kind == "continuous"


def variable_ranges(table: pd.DataFrame, continuous: Sequence[str]) -> dict[str, float]:
    """Observed max - min of each continuous column; zero-range variables trigger a warning."""
    ranges = {}
    for name in continuous:
        values = table[name].to_numpy(dtype=float)
        ranges[name] = float(np.nanmax(values) - np.nanmin(values)) if len(values) else 0.0
    flat = [n for n, r in ranges.items() if not r > 0]
    if flat:
        warnings.warn(f"zero-range matching variables contribute nothing to the distance: {flat}",
                      DegenerateFitWarning, stacklevel=2)
    return ranges


def mixed_distance(a: Mapping, b: Mapping, variables: Sequence[str], kinds: Mapping[str, str],
                   ranges: Mapping[str, float]) -> float:
    """Gower distance between two records.

    Continuous variables contribute ``|a - b| / range``; anything else
    contributes a mismatch indicator. A zero-range variable contributes 0.
    """
    if not variables:
        return 0.0
    total = 0.0
    for name in variables:
        if kinds[name] == "continuous":
            r = ranges.get(name, 0.0)
            total += abs(float(a[name]) - float(b[name])) / r if r > 0 else 0.0
        else:
            total += float(str(a[name]) != str(b[name]))
    return total / len(variables)


def distance_matrix(ds: Dataset, rows_a: np.ndarray, rows_b: np.ndarray, variables: Sequence[str],
                    ranges: Mapping[str, float] | None = None) -> np.ndarray:
    """Gower distances between row positions ``rows_a`` and ``rows_b`` of ``ds``."""
    D = np.zeros((len(rows_a), len(rows_b)))
    if not variables:
        return D
    for name in variables:
        col = ds.table[name]
        if col.isna().any():
            raise DataError(f"matching variable {name!r} has missing cells; impute first")
    cont = [v for v in variables if _is_continuous(ds, v)]
    if ranges is None:
        ranges = variable_ranges(ds.table, cont)
    for name in variables:
        if name in cont:
            r = ranges[name]
            if not r > 0:
                continue
            values = ds.table[name].to_numpy(dtype=float)
            D += np.abs(values[rows_a][:, None] - values[rows_b][None, :]) / r
        else:
            labels = ds.table[name].astype(str).to_numpy()
            D += labels[rows_a][:, None] != labels[rows_b][None, :]
    return D / len(variables)


def matched_case_control(test: Dataset, spec: MatchSpec) -> MatchedCohort:
    """Greedy nearest-neighbour matching without replacement.

    Cases are visited in a seeded random order. Each takes the closest unused
    control; distance ties go to the control that comes first in a seeded
    random ranking, so an empty variable list reduces to random pairing.
    Ranges for continuous variables are taken over the whole test set.
    With a caliper, a case whose best available distance exceeds it stays
    unmatched. Cases left when controls run out are unmatched as well.
    """
    if spec.level == "random" and not spec.variables:
        log.debug("empty matching spec: pairing is uniformly random")
    spec.check(test)
    cases, controls = _case_control_positions(test)
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(cases))
    rank = rng.permutation(len(controls))
    controls = controls[np.argsort(rank, kind="stable")]
    D = distance_matrix(test, cases, controls, spec.variables)

    ids = test.row_ids
    used = np.zeros(len(controls), dtype=bool)
    pairs, dists, unmatched = [], [], []
    for i in order:
        if used.all():
            unmatched.append(ids[cases[i]])
            continue
        row = np.where(used, np.inf, D[i])
        j = int(np.argmin(row))
        if spec.caliper is not None and row[j] > spec.caliper:
            unmatched.append(ids[cases[i]])
            continue
        used[j] = True
        pairs.append((ids[cases[i]], ids[controls[j]]))
        dists.append(row[j])
    if unmatched:
        log.info("%s matching left %d case(s) unmatched", spec.level, len(unmatched))
    return MatchedCohort(pairs, unmatched, spec, np.asarray(dists))


# --------------------------------------------------------------------------- balance


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    before: stats.AssociationResult
    after: stats.AssociationResult

    @property
    def testable(self) -> bool:
        return self.after.status == "ok"


@dataclass(frozen=True)
class BalanceReport:
    rows: list[BalanceRow]
    level: str = ""

    @property
    def n_significant_before(self) -> int:
        return sum(r.before.significant for r in self.rows)

    @property
    def n_significant(self) -> int:
        return sum(r.after.significant for r in self.rows)

    def to_frame(self) -> pd.DataFrame:
        records = []
        for r in self.rows:
            records.append({
                "level": self.level, "covariate": r.covariate,
                "odds_ratio_before": r.before.odds_ratio, "p_before": r.before.p_value,
                "odds_ratio_after": r.after.odds_ratio, "p_after": r.after.p_value,
                "significant_before": r.before.significant, "significant_after": r.after.significant,
                "status_after": "ok" if r.testable else "non-testable",
            })
        cols = ["level", "covariate", "odds_ratio_before", "p_before", "odds_ratio_after", "p_after",
                "significant_before", "significant_after", "status_after"]
        return pd.DataFrame(records, columns=cols)


def _binary_values(ds: Dataset, name: str) -> np.ndarray:
    col = ds.table[name]
    if not pd.api.types.is_numeric_dtype(col):
        raise ConfigError(f"balance covariate {name!r} is not binarized")
    values = col.to_numpy(dtype=float)
    if not np.isin(values[~np.isnan(values)], (0.0, 1.0)).all():
        raise ConfigError(f"balance covariate {name!r} is not binarized")
    return values


def balance_report(cohort: MatchedCohort, binarized: Dataset, covariates: Sequence[str] | None = None) -> BalanceReport:
    """Fisher test of each binarized covariate against case status.

    "Before" uses every labelled row of ``binarized`` (normally the whole test
    partition); "after" uses only the cohort rows. A covariate constant within
    the cohort is reported as non-testable with p = 1.
    """
    if covariates is None:
        covariates = [n for n in binarized.covariates() if binarized.spec(n).kind == "binary"]
    y_all = binarized.table[binarized.outcome].to_numpy(dtype=float)
    sub = cohort.select(binarized)
    y_sub = sub.table[sub.outcome].to_numpy(dtype=float)
    rows = []
    for name in covariates:
        before = stats.associate(_binary_values(binarized, name), y_all)
        after = stats.associate(_binary_values(sub, name), y_sub)
        rows.append(BalanceRow(name, before, after))
    level = cohort.spec.level if cohort.spec is not None else ""
    return BalanceReport(rows, level)


def association_table(binarized: Dataset, covariates: Sequence[str] | None = None,
                      stratify_by: str | None = None, strata_labels: pd.Series | None = None) -> pd.DataFrame:
    """Odds ratio and Fisher p of each binarized covariate vs the outcome.

    With ``stratify_by``, the test is repeated within every observed level of
    that variable (the stratifier itself is skipped). ``strata_labels`` can
    supply the raw, pre-binarization levels to stratify on.
    """
    if covariates is None:
        covariates = [n for n in binarized.covariates() if binarized.spec(n).kind == "binary"]
    y = binarized.table[binarized.outcome].to_numpy(dtype=float)
    strata: list[tuple[str, np.ndarray]] = [("all", np.ones(len(y), dtype=bool))]
    if stratify_by is not None:
        binarized.spec(stratify_by)
        labels = binarized.table[stratify_by] if strata_labels is None else strata_labels.reindex(binarized.table.index)
        strata = [(str(lv), (labels == lv).to_numpy()) for lv in sorted(labels.dropna().unique(), key=str)]
    records = []
    for stratum, mask in strata:
        for name in covariates:
            if name == stratify_by:
                continue
            x = _binary_values(binarized, name)
            res = stats.associate(x[mask], y[mask])
            (a, b), (c, d) = res.table
            records.append({"stratum": stratum, "covariate": name, "n": a + b + c + d,
                            "a": a, "b": b, "c": c, "d": d, "odds_ratio": res.odds_ratio,
                            "p_value": res.p_value, "status": res.status})
    return pd.DataFrame(records, columns=["stratum", "covariate", "n", "a", "b", "c", "d", "odds_ratio",
                                          "p_value", "status"])
