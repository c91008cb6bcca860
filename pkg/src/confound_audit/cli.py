"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from confound_audit import __version__, stats
from confound_audit.audit import (
    AuditReport,
    PLOT_IDS,
    config_from_dict,
    default_binarization,
    emit_plot_data,
    load_config,
    run_audit,
)
from confound_audit.dataset import Dataset, apply_filters, binarize, impute, load_schema, load_table, partition_by_patient
from confound_audit.errors import AuditError, ConfigError, DataError
from confound_audit.features import TsneConfig, fit_pca, project, tsne
from confound_audit.matching import MatchSpec, balance_report, matched_case_control, random_case_control
from confound_audit.models import (
    DesignEncoder,
    PredictorSet,
    fit_logistic_cv,
    predict_proba,
    predictability_screen,
    regression_screen,
)
from confound_audit.seeding import sub_seed
from confound_audit.synth import PRESETS, generate, load_spec, write_synth

log = logging.getLogger("confound_audit")


# --------------------------------------------------------------------------- shared input handling


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="audit config; supplies data, schema and rules")
    p.add_argument("--data", type=Path, help="delimited data file")
    p.add_argument("--schema", type=Path, help="schema file (YAML)")
    p.add_argument("--features", type=Path, help="companion feature file keyed by row id")


def _load_views(args) -> tuple[Dataset, Dataset, Dataset, object]:
    """(filtered, imputed, binarized, config) from either --config or --data/--schema."""
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.data is not None and args.schema is not None:
        cfg = config_from_dict({"data": str(args.data), "schema": str(args.schema),
                                "features": None if args.features is None else str(args.features)})
    else:
        raise ConfigError("give --config, or both --data and --schema")
    raw = load_table(cfg.data, load_schema(cfg.schema), features_path=cfg.features)
    y = raw.table[raw.outcome].to_numpy(dtype=float)
    raw = raw.subset(np.flatnonzero(~np.isnan(y)))
    filtered, _ = apply_filters(raw, cfg.filters)
    imputed = impute(filtered, cfg.regression_impute)
    binarized = binarize(filtered, default_binarization(filtered, cfg.binarization))
    return filtered, imputed, binarized, cfg


def _read_vector(path: Path) -> np.ndarray:
    """One number per line, or the last column of a delimited file with a header."""
    text = path.read_text(encoding="utf-8").strip().splitlines()
    try:
        return np.array([float(line) for line in text])
    except ValueError:
        frame = pd.read_csv(path, sep=None, engine="python")
        return frame.iloc[:, -1].to_numpy(dtype=float)


# --------------------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    if args.spec is not None:
        spec = load_spec(args.spec)
    elif args.preset is not None:
        spec = PRESETS[args.preset](args.n_rows, args.seed)
    else:
        raise ConfigError("give --spec or --preset")
    ds, truth = generate(spec)
    paths = write_synth(ds, spec, args.out)
    print(f"wrote {len(ds)} rows (prevalence {truth.outcome.mean():.4f}) to {paths['data']}")
    return 0


def cmd_audit(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output = args.out
    if args.n_jobs is not None:
        cfg.n_jobs = args.n_jobs
    if args.boot is not None:
        cfg.n_boot = args.boot
    cfg.resume = args.resume
    report = run_audit(cfg)
    for which in args.plots or ():
        emit_plot_data(report, which, Path(cfg.output) / "plots")
    ladder = report.tables.get("ladder")
    if ladder is not None and len(ladder):
        print(ladder[["cohort", "auc", "ci_low", "ci_high", "n_cases", "n_controls"]].to_string(index=False))
    print(f"report written to {cfg.output}")
    return 0


def cmd_match(args) -> int:
    _, imputed, binarized, cfg = _load_views(args)
    seed = sub_seed(args.seed, f"cohort:{args.level}")
    if args.level in ("random", "rnd"):
        cohort = random_case_control(imputed, seed)
    else:
        cohort = matched_case_control(imputed, MatchSpec.preset(args.level, imputed, seed, args.caliper))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort.to_frame().to_csv(out / "cohort.csv", index=False, lineterminator="\n")
    report = balance_report(cohort, binarized)
    report.to_frame().to_csv(out / "balance.csv", index=False, float_format="%.12g", lineterminator="\n")
    print(f"{len(cohort.pairs)} pairs, {len(cohort.unmatched_cases)} unmatched; "
          f"significant covariates {report.n_significant_before} -> {report.n_significant}")
    return 0


def cmd_fit(args) -> int:
    _, imputed, binarized, cfg = _load_views(args)
    target = args.target or imputed.outcome
    predictors = PredictorSet.parse(args.predictors)
    y = binarized.table[target].to_numpy(dtype=float) if target in binarized.table else None
    if y is None or binarized.spec(target).kind != "binary":
        raise ConfigError(f"fit target {target!r} must be a binary (or binarizable) variable")
    part = partition_by_patient(imputed, cfg.train_ratio, sub_seed(args.seed, "partition"))
    if imputed.features is None and "IMG" in predictors.groups:
        raise DataError("IMG predictors need feature vectors")
    pca = fit_pca(imputed.features[part.train_indices], args.k) if imputed.features is not None else None
    train, test = imputed.subset(part.train_indices), imputed.subset(part.test_indices)
    encoder = DesignEncoder(predictors, pca).fit(train)
    if target in encoder.columns or any(c.startswith(f"{target}=") for c in encoder.columns):
        raise ConfigError(f"target {target!r} is also a predictor in {predictors.label}")
    ytr, yte = y[part.train_indices], y[part.test_indices]
    ok_tr, ok_te = ~np.isnan(ytr), ~np.isnan(yte)
    model = fit_logistic_cv(encoder.transform(train)[ok_tr], ytr[ok_tr], n_folds=args.folds,
                            seed=sub_seed(args.seed, "fit"))
    scores = predict_proba(model, encoder.transform(test)[ok_te])
    roc = stats.roc_analysis(scores, yte[ok_te], args.boot, sub_seed(args.seed, "fit:boot"))
    artifact = {"target": target, "predictors": predictors.label, "encoder": encoder.to_dict(),
                "model": model.to_dict(), "test_auc": roc.auc, "test_ci": [roc.ci_low, roc.ci_high],
                "seed": args.seed}
    Path(args.out).write_text(json.dumps(artifact, indent=1), encoding="utf-8")
    print(f"{predictors.label} -> {target}: test AUC {roc.auc:.4f} ({roc.ci_low:.4f}-{roc.ci_high:.4f})")
    return 0


def cmd_screen(args) -> int:
    filtered, _, binarized, cfg = _load_views(args)
    if filtered.features is None:
        raise DataError("screens need feature vectors")
    part = partition_by_patient(filtered, cfg.train_ratio, sub_seed(args.seed, "partition"))
    pca = fit_pca(filtered.features[part.train_indices], args.k)
    if args.kind == "binary":
        targets = [binarized.outcome] + [n for n in binarized.covariates() if binarized.spec(n).kind == "binary"]
        table = predictability_screen(binarized, targets, part, pca=pca, n_boot=args.boot,
                                      seed=sub_seed(args.seed, "screens"), n_jobs=args.n_jobs)
    else:
        targets = [n for n in filtered.covariates() if filtered.spec(n).kind == "continuous"]
        table = regression_screen(filtered, targets, part, pca=pca, seed=sub_seed(args.seed, "screens"),
                                  n_jobs=args.n_jobs)
    table.to_csv(args.out, index=False, float_format="%.12g", lineterminator="\n")
    print(table.to_string(index=False))
    return 0


def cmd_roc(args) -> int:
    scores, labels = _read_vector(args.scores), _read_vector(args.labels)
    if len(scores) != len(labels):
        raise DataError(f"{len(scores)} scores but {len(labels)} labels")
    roc = stats.roc_analysis(scores, labels, args.boot, args.seed)
    op = stats.youden_point(scores, labels)
    prc = stats.prc_auc(scores, labels)
    payload = {"auc": roc.auc, "ci_low": roc.ci_low, "ci_high": roc.ci_high, "n_cases": roc.n_cases,
               "n_controls": roc.n_controls, "auprc": prc.auprc, "n_boot": args.boot, "seed": args.seed,
               **{k: v for k, v in op.as_dict().items()}}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "roc.json").write_text(json.dumps(payload, indent=1), encoding="utf-8")
    pd.DataFrame({"fpr": roc.fpr, "tpr": roc.tpr}).to_csv(out / "roc_curve.csv", index=False,
                                                          float_format="%.12g", lineterminator="\n")
    pd.DataFrame({"recall": prc.recall, "precision": prc.precision}).to_csv(
        out / "prc_curve.csv", index=False, float_format="%.12g", lineterminator="\n")
    print(json.dumps(payload, indent=1))
    return 0


def cmd_report(args) -> int:
    report = AuditReport.from_json(Path(args.report).read_text(encoding="utf-8"))
    written = []
    for which in args.figure:
        written += emit_plot_data(report, which, args.out)
    for path in written:
        print(path)
    return 0


def _feature_matrix(args) -> tuple[np.ndarray, np.ndarray]:
    if args.matrix is not None:
        frame = pd.read_csv(args.matrix, sep=None, engine="python", index_col=0)
        return frame.index.to_numpy(), frame.to_numpy(dtype=float)
    filtered, _, _, _ = _load_views(args)
    if filtered.features is None:
        raise DataError("the dataset has no feature vectors")
    return filtered.row_ids, filtered.features


def cmd_features(args) -> int:
    ids, X = _feature_matrix(args)
    if args.method == "pca":
        model = fit_pca(X, args.k)
        scores = project(model, X)
        frame = pd.DataFrame(scores, index=ids, columns=[f"pc{j + 1}" for j in range(model.k)])
        print(f"explained variance fraction: {model.explained_variance.sum() / model.total_variance:.4f}",
              file=sys.stderr)
    else:
        cfg = TsneConfig(perplexity=args.perplexity, iterations=args.iters, seed=args.seed)
        res = tsne(X, cfg)
        frame = pd.DataFrame(res.embedding, index=ids, columns=["tsne1", "tsne2"])
        print(f"KL divergence {res.kl_initial:.4f} -> {res.kl_final:.4f}", file=sys.stderr)
    frame.index.name = "row_id"
    frame.to_csv(args.out, sep=args.delimiter, float_format="%.12g", lineterminator="\n")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="confound-audit",
                                     description="Audit whether classifier skill comes from signal or confounders.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic confounded dataset")
    p.add_argument("--spec", type=Path, help="synth spec (YAML)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--n-rows", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("audit", help="run the full audit from a config file")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--boot", type=int)
    p.add_argument("--n-jobs", type=int)
    p.add_argument("--resume", action="store_true", help="reuse cached stages from a previous run")
    p.add_argument("--plots", nargs="*", choices=PLOT_IDS, help="also emit plot data for these panels")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("match", help="build one case-control cohort and its balance table")
    _add_data_args(p)
    p.add_argument("--level", required=True, choices=["random", "dem", "pt", "pthp"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--caliper", type=float)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("fit", help="fit a ridge-logistic model on one predictor set")
    _add_data_args(p)
    p.add_argument("--predictors", required=True, help="comma list of img, pt, hp")
    p.add_argument("--target", help="binary target (default: the outcome)")
    p.add_argument("--k", type=int, default=10, help="principal components for img")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--boot", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="model artifact (JSON)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("screen", help="image-only predictability screens")
    _add_data_args(p)
    p.add_argument("--kind", choices=["binary", "continuous"], required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--boot", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("roc", help="ROC analysis of a score file against a label file")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--boot", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("report", help="emit plot data from a saved report.json")
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--figure", nargs="+", choices=PLOT_IDS, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("features", help="PCA scores or t-SNE coordinates of the feature vectors")
    p.add_argument("method", choices=["pca", "tsne"])
    _add_data_args(p)
    p.add_argument("--matrix", type=Path, help="plain feature matrix (first column row id)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except yaml.YAMLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
