"""End-to-end confounding audit: one config in, a directory of report tables out."""

from __future__ import annotations

import hashlib
import json
import logging
import pickle
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
import yaml

from confound_audit import __version__, stats
from confound_audit.dataset import (
    BinarizationRule,
    Dataset,
    FilterRule,
    Partition,
    _level_labels,
    apply_filters,
    binarize,
    impute,
    load_schema,
    load_table,
    partition_by_patient,
)
from confound_audit.errors import AuditError, ConfigError, DataError
from confound_audit.features import DEFAULT_COMPONENTS, PcaModel, fit_pca
from confound_audit.matching import (
    LEVEL_ALIASES,
    LEVELS,
    MatchedCohort,
    MatchSpec,
    association_table,
    balance_report,
    matched_case_control,
    random_case_control,
)
from confound_audit.models import (
    DesignEncoder,
    PredictorSet,
    ensemble_naive_bayes,
    fit_logistic_cv,
    out_of_fold_scores,
    predict_proba,
    predictability_screen,
    regression_screen,
)
from confound_audit.seeding import sub_seed

log = logging.getLogger(__name__)

COHORT_NAMES = {"random": "cc-rnd-test", "demographics": "cc-dem-test", "PT": "cc-pt-test",
                "PT+HP": "cc-pthp-test"}
MATCHING_LABELS = {"random": "Random", "demographics": "AgeGender", "PT": "Pt", "PT+HP": "PtHp"}
PREDICTOR_SETS = ("img", "pt", "hp", "pt,hp", "img,pt", "img,pt,hp")
ENSEMBLES = (("nb_imgPt", "img", "pt"), ("nb_imgPtHp", "img", "pt,hp"))
SUMMARY_CLASSIFIERS = ("pt", "ptHp", "imgPt", "imgPtHp", "nb_imgPtHp", "nb_imgPt")
PAIRED_COMPARISONS = (
    ("nb_imgPt", "pt"), ("imgPt", "nb_imgPt"), ("nb_imgPtHp", "ptHp"), ("imgPtHp", "nb_imgPtHp"),
    ("imgPt", "pt"), ("imgPtHp", "ptHp"), ("imgPt", "img"), ("imgPtHp", "img"),
)
METRIC_COLUMNS = ["auc", "ci_low", "ci_high", "auprc", "threshold", "specificity", "sensitivity", "accuracy",
                  "npv", "ppv", "tn", "tp", "fn", "fp", "n_cases", "n_controls"]
TABLE_FILES = {
    "cohorts": "cohorts.csv",
    "predictability": "predictability.csv",
    "regression": "regression.csv",
    "associations": "associations.csv",
    "balance": "balance.csv",
    "ladder": "ladder.csv",
    "classifiers": "classifiers.csv",
    "comparisons": "comparisons.csv",
    "curves": "curves.csv",
}
FLOAT_FORMAT = "%.12g"


# --------------------------------------------------------------------------- config


@dataclass
class AuditConfig:
    data: Path
    schema: Path
    features: Path | None = None
    output: Path = Path("audit-out")
    filters: list[FilterRule] = field(default_factory=list)
    binarization: list[BinarizationRule] = field(default_factory=list)
    regression_impute: list[str] = field(default_factory=list)
    pca_k: int = DEFAULT_COMPONENTS
    match_levels: tuple[str, ...] = LEVELS
    n_boot: int = 2000
    seed: int = 0
    train_ratio: float = 0.75
    n_folds: int = 10
    device_variable: str | None = None
    caliper: float | None = None
    n_jobs: int = 1
    resume: bool = False

    def validate(self) -> None:
        for label, path in (("data", self.data), ("schema", self.schema), ("features", self.features)):
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{label} file not found: {path}")
        if self.n_boot < 100:
            raise ConfigError(f"bootstrap replicates must be at least 100, got {self.n_boot}")
        if self.pca_k < 1:
            raise ConfigError("PCA component count must be positive")
        levels = []
        for lv in self.match_levels:
            key = LEVEL_ALIASES.get(str(lv).lower())
            if key is None:
                raise ConfigError(f"unknown matching level {lv!r}")
            levels.append(key)
        self.match_levels = tuple(dict.fromkeys(levels))

    def fingerprint_dict(self) -> dict:
        """Everything that affects results (not output location, threads or resume)."""
        return {
            "filters": [vars(r) for r in self.filters],
            "binarization": [{"variable": r.variable, "method": r.method, "level_map": dict(r.level_map or {})}
                             for r in self.binarization],
            "regression_impute": list(self.regression_impute), "pca_k": self.pca_k,
            "match_levels": list(self.match_levels), "n_boot": self.n_boot, "seed": self.seed,
            "train_ratio": self.train_ratio, "n_folds": self.n_folds, "device_variable": self.device_variable,
            "caliper": self.caliper,
        }


def _resolve(base: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def config_from_dict(raw: dict, base: Path = Path(".")) -> AuditConfig:
    if "data" not in raw or "schema" not in raw:
        raise ConfigError("config needs 'data' and 'schema' entries")
    try:
        filters = [FilterRule(f["variable"], f.get("min"), f.get("max")) for f in raw.get("filters", []) or []]
        rules = [BinarizationRule(b["variable"], b["method"], b.get("level_map"))
                 for b in raw.get("binarize", []) or []]
    except KeyError as exc:
        raise ConfigError(f"config rule missing field {exc}") from exc
    matching = raw.get("matching", {}) or {}
    cfg = AuditConfig(
        data=_resolve(base, raw["data"]),
        schema=_resolve(base, raw["schema"]),
        features=_resolve(base, raw.get("features")),
        output=_resolve(base, raw.get("output", "audit-out")),
        filters=filters,
        binarization=rules,
        regression_impute=list((raw.get("impute", {}) or {}).get("regression", [])),
        pca_k=int((raw.get("pca", {}) or {}).get("k", DEFAULT_COMPONENTS)),
        match_levels=tuple(matching.get("levels", LEVELS)),
        caliper=matching.get("caliper"),
        n_boot=int(raw.get("bootstrap", 2000)),
        seed=int(raw.get("seed", 0)),
        train_ratio=float((raw.get("partition", {}) or {}).get("ratio", 0.75)),
        n_folds=int(raw.get("n_folds", 10)),
        device_variable=raw.get("device_variable"),
        n_jobs=int(raw.get("n_jobs", 1)),
    )
    return cfg


def load_config(path: str | Path) -> AuditConfig:
    """Read a YAML audit config; relative paths resolve against the config's directory."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(raw, path.parent)


# --------------------------------------------------------------------------- report


@dataclass
class AuditReport:
    tables: dict[str, pd.DataFrame] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "metadata": self.metadata,
            "tables": {name: {"columns": list(df.columns), "data": df.astype(object).where(df.notna(), None)
                              .values.tolist()}
                       for name, df in self.tables.items()},
        }
        return json.dumps(payload, indent=1, sort_keys=False, default=_json_default)

    @classmethod
    def from_json(cls, text: str) -> "AuditReport":
        raw = json.loads(text)
        tables = {}
        for name, body in raw.get("tables", {}).items():
            df = pd.DataFrame(body["data"], columns=body["columns"])
            tables[name] = df.infer_objects()
        return cls(tables, raw.get("metadata", {}))

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = {}
        for name, df in self.tables.items():
            path = out / TABLE_FILES.get(name, f"{name}.csv")
            df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
            written[name] = path
        path = out / "report.json"
        path.write_text(self.to_json(), encoding="utf-8")
        written["report"] = path
        return written


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# --------------------------------------------------------------------------- reusable steps


def evaluate_scores(name: str, scores, labels, n_boot: int, seed: int, n_jobs: int = 1
                    ) -> tuple[dict, pd.DataFrame]:
    """Metrics row (AUC with bootstrap CI, Youden point, AUPRC) plus ROC/PRC points."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    roc = stats.roc_analysis(scores, labels, n_boot, seed, n_jobs)
    op = stats.youden_point(scores, labels)
    prc = stats.prc_auc(scores, labels)
    row = {"name": name, "auc": roc.auc, "ci_low": roc.ci_low, "ci_high": roc.ci_high, "auprc": prc.auprc}
    row.update({k: v for k, v in op.as_dict().items() if k != "degenerate"})
    row.update(n_cases=roc.n_cases, n_controls=roc.n_controls)
    curves = pd.concat([
        pd.DataFrame({"panel": name, "curve": "roc", "x": roc.fpr, "y": roc.tpr}),
        pd.DataFrame({"panel": name, "curve": "prc", "x": prc.recall, "y": prc.precision}),
    ], ignore_index=True)
    return row, curves


def default_binarization(ds: Dataset, explicit: Sequence[BinarizationRule]) -> list[BinarizationRule]:
    """Explicit rules plus median-split / top-two-levels for every other non-0/1 covariate."""
    rules = list(explicit)
    covered = {r.variable for r in rules}
    for name in ds.covariates():
        if name in covered:
            continue
        col = ds.table[name]
        if col.dropna().nunique() < 2:
            log.warning("covariate %s has fewer than two observed values; left out of binary analyses", name)
            continue
        kind = ds.spec(name).kind
        if kind == "continuous":
            rules.append(BinarizationRule(name, "median-split"))
        elif not (pd.api.types.is_numeric_dtype(col) and np.isin(col.dropna().to_numpy(float), (0.0, 1.0)).all()):
            rules.append(BinarizationRule(name, "top-two-levels"))
    return rules


def build_ladder(test: Dataset, levels: Sequence[str], seed: int, caliper: float | None = None
                 ) -> dict[str, MatchedCohort]:
    """Case-control cohorts for each requested level, keyed by cohort name."""
    cohorts = {}
    for level in levels:
        level_seed = sub_seed(seed, f"cohort:{level}")
        if level == "random":
            cohorts[COHORT_NAMES[level]] = random_case_control(test, level_seed)
        else:
            spec = MatchSpec.preset(level, test, level_seed, caliper)
            cohorts[COHORT_NAMES[level]] = matched_case_control(test, spec)
    return cohorts


def fit_predictor_set(predictors: str, train: Dataset, pca: PcaModel, seed: int, n_folds: int = 10):
    """Ridge-logistic model on one predictor set; returns (encoder, model)."""
    encoder = DesignEncoder(PredictorSet.parse(predictors), pca).fit(train)
    X = encoder.transform(train)
    y = train.table[train.outcome].to_numpy(dtype=float)
    model = fit_logistic_cv(X, y, n_folds=n_folds, seed=seed)
    return encoder, model


def fit_classifiers(train: Dataset, test: Dataset, pca: PcaModel, seed: int, n_folds: int = 10
                    ) -> dict[str, np.ndarray]:
    """Test-set probabilities of every direct predictor-set model and both NB ensembles.

    Ensembles combine out-of-fold training scores of the image model and a
    covariate model; predictor sets whose groups have no variables are skipped.
    """
    y_train = train.table[train.outcome].to_numpy(dtype=float)
    scores, oof = {}, {}
    for predictors in PREDICTOR_SETS:
        label = PredictorSet.parse(predictors).label
        try:
            encoder, model = fit_predictor_set(predictors, train, pca, sub_seed(seed, label), n_folds)
        except DataError as exc:
            log.warning("predictor set %s skipped: %s", label, exc)
            continue
        scores[label] = predict_proba(model, encoder.transform(test))
        if label in ("img", "pt", "ptHp"):
            oof[label] = out_of_fold_scores(encoder.transform(train), y_train, n_folds,
                                            sub_seed(seed, f"oof:{label}"), model.ridge_lambda)
    for name, img, cov in ENSEMBLES:
        cov_label = PredictorSet.parse(cov).label
        if img in oof and cov_label in oof:
            scores[name] = ensemble_naive_bayes(oof[img], scores[img], oof[cov_label], scores[cov_label], y_train)
    return scores


def cohort_characteristics(groups: dict[str, Dataset], sampling: dict[str, tuple[str, str, str]]) -> pd.DataFrame:
    """Per-cohort counts and covariate summaries; one column per cohort."""
    names = list(groups)
    first = groups[names[0]]
    rows: list[tuple[str, list]] = [
        ("Sampling", [sampling[n][0] for n in names]),
        ("Matching", [sampling[n][1] for n in names]),
        ("Partition", [sampling[n][2] for n in names]),
        ("No. rows", [len(groups[n]) for n in names]),
        ("No. patients", [len(np.unique(groups[n].patient_id.astype(str))) for n in names]),
    ]
    for name in first.covariates():
        kind = first.spec(name).kind
        cells = []
        for n in names:
            col = groups[n].table[name]
            present = col.dropna()
            if kind == "continuous":
                v = present.to_numpy(dtype=float)
                cells.append(f"{v.mean():.1f} ({v.std(ddof=1):.1f})" if len(v) > 1 else "NA")
            elif kind == "binary" and pd.api.types.is_numeric_dtype(col):
                k = int((present == 1).sum())
                cells.append(f"{k} ({100 * k / max(len(present), 1):.0f})")
            else:
                cells.append(str(present.nunique()))
        label = {"continuous": f"{name}, mean (SD)", "binary": f"{name} = 1, No. (%)"}.get(kind, f"No. {name} levels")
        if kind == "binary" and not pd.api.types.is_numeric_dtype(first.table[name]):
            label = f"No. {name} levels"
        rows.append((label, cells))
    outcome = first.outcome
    cells = []
    for n in names:
        y = groups[n].table[outcome].to_numpy(dtype=float)
        k = int(np.nansum(y))
        cells.append(f"{k} ({100 * k / max(int(np.sum(~np.isnan(y))), 1):.0f})")
    rows.append((f"{outcome} frequency, No. (%)", cells))
    return pd.DataFrame([[label] + [str(c) for c in cells] for label, cells in rows],
                        columns=["characteristic"] + names)


# --------------------------------------------------------------------------- orchestration


class StageFailure(AuditError):
    """Wraps a stage error; keeps the wrapped error's exit code."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


def file_digest(path: Path | None) -> str | None:
    if path is None:
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class _Stages:
    """Runs named stages in order, caching each result under ``output/.cache`` for restarts."""

    def __init__(self, cfg: AuditConfig, fingerprint: str):
        self.cfg = cfg
        self.fingerprint = fingerprint
        self.cache_dir = Path(cfg.output) / ".cache"
        self.completed: list[str] = []

    def run(self, name: str, fn: Callable):
        path = self.cache_dir / f"{name}.pkl"
        if self.cfg.resume and path.is_file():
            with open(path, "rb") as fh:
                cached = pickle.load(fh)
            if cached.get("fingerprint") == self.fingerprint:
                log.info("stage %s: reusing cached result", name)
                self.completed.append(name)
                return cached["value"]
        log.info("stage %s", name)
        try:
            value = fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageFailure(name, exc) from exc
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            pickle.dump({"fingerprint": self.fingerprint, "value": value}, fh)
        self.completed.append(name)
        return value


def _versions() -> dict:
    import scipy
    import sklearn

    return {"confound_audit": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pandas": pd.__version__, "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def run_audit(cfg: AuditConfig) -> AuditReport:
    """Run every stage and write tables, ``report.json`` and ``MANIFEST.json`` to ``cfg.output``.

    On failure the tables finished so far are still written, the manifest is
    marked incomplete with the failing stage, and the error is re-raised.
    """
    cfg.validate()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"data": file_digest(cfg.data), "schema": file_digest(cfg.schema),
              "features": file_digest(cfg.features)}
    fingerprint = hashlib.sha256(json.dumps([cfg.fingerprint_dict(), inputs], sort_keys=True,
                                            default=str).encode()).hexdigest()
    seeds = {label: sub_seed(cfg.seed, label) for label in
             ("partition", "screens", "cohorts", "models", "bootstrap")}
    report = AuditReport(metadata={
        "seed": cfg.seed, "stage_seeds": seeds, "inputs": inputs, "versions": _versions(),
        "config": cfg.fingerprint_dict(),
    })
    stages = _Stages(cfg, fingerprint)
    try:
        _run_stages(cfg, stages, seeds, report)
    except StageFailure as exc:
        report.metadata["status"] = "incomplete"
        report.metadata["failed_stage"] = exc.stage
        report.metadata["error"] = str(exc)
        _flush(report, out, stages, inputs)
        raise
    report.metadata["status"] = "complete"
    _flush(report, out, stages, inputs)
    return report


def _flush(report: AuditReport, out: Path, stages: _Stages, inputs: dict) -> None:
    written = report.write(out)
    manifest = {
        "status": report.metadata.get("status"),
        "failed_stage": report.metadata.get("failed_stage"),
        "error": report.metadata.get("error"),
        "completed_stages": stages.completed,
        "seed": report.metadata["seed"],
        "stage_seeds": report.metadata["stage_seeds"],
        "inputs": inputs,
        "versions": report.metadata["versions"],
        "outputs": {p.name: file_digest(p) for _, p in sorted(written.items())},
    }
    (out / "MANIFEST.json").write_text(json.dumps(manifest, indent=1, default=str), encoding="utf-8")


def _labelled(ds: Dataset) -> Dataset:
    y = ds.table[ds.outcome].to_numpy(dtype=float)
    keep = np.flatnonzero(~np.isnan(y))
    if len(keep) < len(ds):
        log.warning("dropping %d row(s) without an outcome", len(ds) - len(keep))
    return ds.subset(keep)


def _run_stages(cfg: AuditConfig, stages: _Stages, seeds: dict, report: AuditReport) -> None:
    raw = stages.run("ingest", lambda: _labelled(load_table(cfg.data, load_schema(cfg.schema),
                                                            features_path=cfg.features)))
    filtered, n_altered = stages.run("filter", lambda: apply_filters(raw, cfg.filters))
    report.metadata["filtered_cells"] = int(n_altered)
    report.metadata["parse_warnings"] = int(raw.parse_warnings)
    imputed = stages.run("impute", lambda: impute(filtered, cfg.regression_impute))
    binarized = stages.run("binarize", lambda: binarize(filtered, default_binarization(filtered, cfg.binarization)))
    part: Partition = stages.run("partition", lambda: partition_by_patient(imputed, cfg.train_ratio,
                                                                          seeds["partition"]))
    if raw.features is None:
        raise StageFailure("pca", DataError("the audit needs feature vectors"))
    pca = stages.run("pca", lambda: fit_pca(raw.features[part.train_indices], cfg.pca_k))
    report.metadata["pca_explained_fraction"] = float(pca.explained_variance.sum() / pca.total_variance)

    binary_targets = [binarized.outcome] + [n for n in binarized.covariates() if binarized.spec(n).kind == "binary"]
    continuous = [n for n in filtered.covariates() if filtered.spec(n).kind == "continuous"]

    def screens():
        a = predictability_screen(binarized, binary_targets, part, pca=pca, n_boot=cfg.n_boot,
                                  seed=seeds["screens"], n_folds=cfg.n_folds, n_jobs=cfg.n_jobs)
        b = regression_screen(filtered, continuous, part, pca=pca, seed=seeds["screens"], n_jobs=cfg.n_jobs)
        return a, b

    predictability, regression = stages.run("screens", screens)
    report.tables["predictability"] = predictability
    report.tables["regression"] = regression.reindex(columns=["target", "group", "n_train", "n_test", "r2",
                                                               "rmse", "train_r2", "status"])

    covs = binary_targets[1:]

    def associations():
        overall = association_table(binarized, covs)
        if cfg.device_variable is None:
            return overall
        labels = _level_labels(filtered.table[cfg.device_variable])
        strat = association_table(binarized, covs, cfg.device_variable, labels)
        return pd.concat([overall, strat], ignore_index=True)

    report.tables["associations"] = stages.run("associations", associations)

    test_imp = imputed.subset(part.test_indices)
    test_bin = binarized.subset(part.test_indices)
    cohorts = stages.run("cohorts", lambda: build_ladder(test_imp, cfg.match_levels, seeds["cohorts"], cfg.caliper))

    groups = {"cs-train": filtered.subset(part.train_indices), "cs-test": filtered.subset(part.test_indices)}
    sampling = {"cs-train": ("Cross-Sectional", "NA", "train"), "cs-test": ("Cross-Sectional", "NA", "test")}
    level_of = {v: k for k, v in COHORT_NAMES.items()}
    for name, cohort in cohorts.items():
        groups[name] = cohort.select(filtered)
        sampling[name] = ("Case-Control", MATCHING_LABELS[level_of[name]], "test")
    report.tables["cohorts"] = cohort_characteristics(groups, sampling)

    balance = []
    for name, cohort in cohorts.items():
        frame = balance_report(cohort, test_bin, covs).to_frame()
        frame.insert(0, "cohort", name)
        balance.append(frame)
    report.tables["balance"] = pd.concat(balance, ignore_index=True) if balance else pd.DataFrame()
    report.metadata["significant_covariates"] = {
        "cs-test": int(balance[0]["significant_before"].sum()) if balance else None,
        **{name: int(f["significant_after"].sum()) for name, f in zip(cohorts, balance)},
    }

    train = imputed.subset(part.train_indices)
    y_test = test_imp.table[test_imp.outcome].to_numpy(dtype=float)

    def models():
        return fit_classifiers(train, test_imp, pca, seeds["models"], cfg.n_folds)

    scores = stages.run("models", models)
    if "img" not in scores:
        raise StageFailure("models", DataError("image-only model could not be fit"))
    img_by_id = pd.Series(scores["img"], index=test_imp.table.index)

    def ladder():
        rows, curves, comps = [], [], []
        panels = {"cs-test": (scores["img"], y_test)}
        for name, cohort in cohorts.items():
            ids = cohort.row_ids
            panels[name] = (img_by_id.loc[ids].to_numpy(), np.r_[np.ones(len(cohort.pairs)), np.zeros(len(cohort.pairs))])
        for name, (s, y) in panels.items():
            row, curve = evaluate_scores(name, s, y, cfg.n_boot, sub_seed(seeds["bootstrap"], f"ladder:{name}"),
                                         cfg.n_jobs)
            row["cohort"] = row.pop("name")
            row["unmatched_cases"] = len(cohorts[name].unmatched_cases) if name in cohorts else 0
            rows.append(row)
            curve.insert(0, "figure", "fig3")
            curves.append(curve)
        ref = COHORT_NAMES["random"]
        if ref in panels:
            for name, (s, y) in panels.items():
                if name == ref:
                    continue
                cmp = stats.auc_test_unpaired(s, y, *panels[ref], n_boot=cfg.n_boot,
                                              seed=sub_seed(seeds["bootstrap"], f"compare:{name}"), n_jobs=cfg.n_jobs)
                comps.append(_comparison_row("ladder", name, ref, cmp))
        table = pd.DataFrame(rows).reindex(columns=["cohort"] + METRIC_COLUMNS + ["unmatched_cases"])
        return table, pd.concat(curves, ignore_index=True), comps

    ladder_table, ladder_curves, ladder_comps = stages.run("ladder", ladder)
    report.tables["ladder"] = ladder_table

    def classifiers():
        rows, curves, comps = [], [], []
        for name, s in scores.items():
            row, curve = evaluate_scores(name, s, y_test, cfg.n_boot, sub_seed(seeds["bootstrap"], f"clf:{name}"),
                                         cfg.n_jobs)
            row["classifier"] = row.pop("name")
            row["kind"] = "ensemble" if name.startswith("nb_") else "direct"
            rows.append(row)
            curve.insert(0, "figure", "fig4" if name in SUMMARY_CLASSIFIERS else "fig2c")
            curves.append(curve)
        for a, b in PAIRED_COMPARISONS:
            if a in scores and b in scores:
                comps.append(_comparison_row("classifiers", a, b, stats.delong_test(scores[a], scores[b], y_test)))
        table = pd.DataFrame(rows).reindex(columns=["classifier", "kind"] + METRIC_COLUMNS)
        return table, pd.concat(curves, ignore_index=True), comps

    clf_table, clf_curves, clf_comps = stages.run("classifiers", classifiers)
    report.tables["classifiers"] = clf_table
    report.tables["comparisons"] = pd.DataFrame(ladder_comps + clf_comps, columns=[
        "family", "a", "b", "auc_a", "auc_b", "delta", "statistic", "p_value", "method", "note"])
    report.tables["curves"] = pd.concat([ladder_curves, clf_curves], ignore_index=True)


def _comparison_row(family: str, a: str, b: str, cmp: stats.AucComparison) -> dict:
    return {"family": family, "a": a, "b": b, "auc_a": cmp.auc_a, "auc_b": cmp.auc_b, "delta": cmp.delta,
            "statistic": cmp.statistic, "p_value": cmp.p_value, "method": cmp.method, "note": cmp.note}


# --------------------------------------------------------------------------- plot data


PLOT_IDS = ("fig2a", "fig2b", "fig2c", "fig3", "fig4", "figS5")


def _write(df: pd.DataFrame, path: Path) -> Path:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def _curve_files(curves: pd.DataFrame, figure: str, out: Path, panels: Sequence[str] | None = None) -> list[Path]:
    paths = []
    sel = curves[curves["figure"] == figure]
    for panel in (panels if panels is not None else dict.fromkeys(sel["panel"])):
        for kind, (xname, yname) in (("roc", ("fpr", "tpr")), ("prc", ("recall", "precision"))):
            part = sel[(sel["panel"] == panel) & (sel["curve"] == kind)]
            if len(part):
                paths.append(_write(part[["x", "y"]].set_axis([xname, yname], axis=1),
                                    out / f"{figure}_{kind}_{panel}.csv"))
    return paths


def emit_plot_data(report: AuditReport, which: str, out_dir: str | Path) -> list[Path]:
    """Write the point and bar-table files for one panel id (one file per panel)."""
    if which not in PLOT_IDS:
        raise ConfigError(f"unknown figure id {which!r}; expected one of {PLOT_IDS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = report.tables

    def need(name: str) -> pd.DataFrame:
        if name not in t or t[name] is None or len(t[name].columns) == 0:
            raise DataError(f"report has no {name!r} section for {which}")
        return t[name]

    if which == "fig2a":
        df = need("predictability")
        return [_write(df[["target", "auc", "ci_low", "ci_high", "n_cases", "n_controls"]], out / "fig2a_predictability.csv")]
    if which == "fig2b":
        df = need("regression")
        return [_write(df[["target", "r2", "rmse", "n_train", "n_test"]], out / "fig2b_regression.csv")]
    if which == "figS5":
        return [_write(need("associations"), out / "figS5_associations.csv")]
    curves = need("curves")
    if which == "fig3":
        ladder = need("ladder")
        paths = _curve_files(curves, "fig3", out, list(ladder["cohort"]))
        paths.append(_write(ladder[["cohort", "auc", "ci_low", "ci_high", "n_cases", "n_controls"]],
                            out / "fig3_summary.csv"))
        if "balance" in t and len(t["balance"]):
            paths.append(_write(t["balance"], out / "fig3_balance.csv"))
        return paths
    clf = need("classifiers")
    if which == "fig2c":
        direct = clf[clf["kind"] == "direct"]
        paths = _curve_files(curves, "fig2c", out) + _curve_files(curves, "fig4", out,
                                                                   [c for c in direct["classifier"]
                                                                    if c in SUMMARY_CLASSIFIERS])
        paths.append(_write(direct[["classifier", "auc", "ci_low", "ci_high", "n_cases", "n_controls"]],
                            out / "fig2c_summary.csv"))
        return paths
    summary = clf.set_index("classifier").reindex([c for c in SUMMARY_CLASSIFIERS if c in set(clf["classifier"])])
    summary = summary.reset_index()[["classifier"] + METRIC_COLUMNS]
    paths = _curve_files(curves, "fig4", out, list(summary["classifier"]))
    paths.append(_write(summary, out / "fig4_summary.csv"))
    return paths
