"""Supervised models over image principal components and/or covariates.

Logistic regression is fit by ridge-penalized maximum likelihood (Newton/IRLS)
and its penalty is chosen by cross-validated AUC. Linear regression handles
continuous targets. A kernel Naive Bayes model combines independent score
sources the way a clinician combining evidence would.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import expit, logsumexp
from sklearn.model_selection import StratifiedKFold

from confound_audit import stats
from confound_audit.dataset import Dataset, Partition, partition_by_patient
from confound_audit.errors import ConfigError, DataError, DegenerateFitWarning, NumericalError
from confound_audit.features import DEFAULT_COMPONENTS, PcaModel, fit_pca, project
from confound_audit.seeding import sub_seed

log = logging.getLogger(__name__)

LAMBDA_GRID = (1e-6, 1e-4, 1e-2, 1.0)
PREDICTOR_GROUPS = ("IMG", "PT", "HP")
# predictions are kept strictly inside (0, 1)
PROBABILITY_FLOOR = 1e-15


# --------------------------------------------------------------------------- design matrices


@dataclass(frozen=True)
class PredictorSet:
    groups: tuple[str, ...]
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.groups:
            raise ConfigError("predictor set must name at least one group")
        unknown = set(self.groups) - set(PREDICTOR_GROUPS)
        if unknown:
            raise ConfigError(f"unknown predictor groups {sorted(unknown)}")

    @property
    def label(self) -> str:
        order = [g for g in PREDICTOR_GROUPS if g in self.groups]
        return order[0].lower() + "".join(g.capitalize() for g in order[1:])

    @classmethod
    def parse(cls, text: str) -> "PredictorSet":
        groups = tuple(dict.fromkeys(g.strip().upper() for g in text.replace("+", ",").split(",") if g.strip()))
        return cls(groups)


@dataclass
class DesignEncoder:
    """Turns a dataset into a numeric design matrix with train-fitted encodings.

    IMG expands to the principal component scores; continuous covariates are
    standardized; 0/1 covariates pass through; categorical covariates are
    one-hot coded against their most frequent training level (so an imputed
    ``(Missing)`` level gets its own indicator).
    """

    predictors: PredictorSet
    pca: PcaModel | None = None
    columns: list[str] = field(default_factory=list)
    _plan: list = field(default_factory=list, repr=False)

    def fit(self, ds: Dataset) -> "DesignEncoder":
        self.columns, self._plan = [], []
        if "IMG" in self.predictors.groups:
            if self.pca is None:
                if ds.features is None:
                    raise DataError("IMG predictors need feature vectors")
                self.pca = fit_pca(ds.features, DEFAULT_COMPONENTS)
            scores = project(self.pca, ds.features)
            mu, sd = scores.mean(axis=0), scores.std(axis=0)
            sd[sd == 0] = 1.0
            self._plan.append(("img", mu, sd))
            self.columns += [f"pc{j + 1}" for j in range(self.pca.k)]
        for name in ds.names_in(*[g for g in ("PT", "HP") if g in self.predictors.groups]):
            col = ds.table[name]
            if col.isna().any():
                raise DataError(f"covariate {name!r} has missing cells; impute first")
            if pd.api.types.is_numeric_dtype(col):
                values = col.to_numpy(dtype=float)
                if np.isin(values, (0.0, 1.0)).all():
                    self._plan.append(("raw", name))
                    self.columns.append(name)
                else:
                    sd = values.std()
                    self._plan.append(("scale", name, values.mean(), sd if sd > 0 else 1.0))
                    self.columns.append(name)
            else:
                labels = col.astype(str)
                counts = labels.value_counts()
                levels = sorted(counts.index, key=lambda lv: (-counts[lv], lv))
                others = sorted(levels[1:])
                self._plan.append(("onehot", name, others))
                self.columns += [f"{name}={lv}" for lv in others]
        if not self.columns:
            raise DataError(f"predictor set {self.predictors.groups} resolves to no columns")
        return self

    def to_dict(self) -> dict:
        plan = []
        for step in self._plan:
            plan.append([v.tolist() if isinstance(v, np.ndarray) else v for v in step])
        return {"groups": list(self.predictors.groups), "columns": list(self.columns), "plan": plan,
                "pca": None if self.pca is None else self.pca.to_dict()}

    @classmethod
    def from_dict(cls, raw: dict) -> "DesignEncoder":
        pca = None if raw.get("pca") is None else PcaModel.from_dict(raw["pca"])
        plan = []
        for step in raw["plan"]:
            if step[0] == "img":
                plan.append(("img", np.asarray(step[1], float), np.asarray(step[2], float)))
            else:
                plan.append(tuple(step))
        return cls(PredictorSet(tuple(raw["groups"])), pca, list(raw["columns"]), plan)

    def transform(self, ds: Dataset) -> np.ndarray:
        blocks = []
        for step in self._plan:
            if step[0] == "img":
                if ds.features is None:
                    raise DataError("IMG predictors need feature vectors")
                blocks.append((project(self.pca, ds.features) - step[1]) / step[2])
            elif step[0] == "raw":
                blocks.append(ds.table[step[1]].to_numpy(dtype=float)[:, None])
            elif step[0] == "scale":
                blocks.append(((ds.table[step[1]].to_numpy(dtype=float) - step[2]) / step[3])[:, None])
            else:
                labels = ds.table[step[1]].astype(str).to_numpy()
                blocks.append(np.column_stack([labels == lv for lv in step[2]]).astype(float)
                              if step[2] else np.empty((len(ds), 0)))
        X = np.hstack(blocks)
        if np.isnan(X).any():
            raise DataError("design matrix contains missing values")
        return X


# --------------------------------------------------------------------------- logistic regression


@dataclass(frozen=True)
class LogisticModel:
    coefficients: np.ndarray
    intercept: float
    ridge_lambda: float
    predictor_set: PredictorSet | None = None
    columns: tuple[str, ...] = ()
    n_iter: int = 0
    gradient_norm: float = 0.0
    cv_auc: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": "logistic",
            "coefficients": dict(zip(self.columns or [f"x{j}" for j in range(len(self.coefficients))],
                                     self.coefficients.tolist())),
            "intercept": self.intercept,
            "ridge_lambda": self.ridge_lambda,
            "predictors": list(self.predictor_set.groups) if self.predictor_set else [],
            "n_iter": self.n_iter,
            "gradient_norm": self.gradient_norm,
            "cv_auc": {repr(k): v for k, v in self.cv_auc.items()},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "LogisticModel":
        names = tuple(raw["coefficients"])
        return cls(np.array([raw["coefficients"][n] for n in names], dtype=float), float(raw["intercept"]),
                   float(raw["ridge_lambda"]),
                   PredictorSet(tuple(raw["predictors"])) if raw.get("predictors") else None,
                   names, int(raw.get("n_iter", 0)), float(raw.get("gradient_norm", 0.0)))


def _check_binary(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise DataError("target must be binary 0/1 without missing values")
    if y.min() == y.max():
        raise DataError("target has a single class")
    return y


def logistic_objective(coef, intercept, X, y, ridge_lambda) -> float:
    """Mean negative Bernoulli log-likelihood plus ``ridge_lambda / 2 * ||coef||^2``."""
    eta = intercept + X @ coef
    # log(1 + exp(eta)) - y * eta, computed stably
    nll = np.logaddexp(0.0, eta) - y * eta
    return float(nll.mean() + 0.5 * ridge_lambda * coef @ coef)


def logistic_gradient(coef, intercept, X, y, ridge_lambda) -> tuple[np.ndarray, float]:
    resid = expit(intercept + X @ coef) - y
    n = len(y)
    return X.T @ resid / n + ridge_lambda * coef, float(resid.sum() / n)


def fit_logistic(X, y, ridge_lambda: float = 1e-6, max_iter: int = 100, tol: float = 1e-8) -> LogisticModel:
    """Ridge logistic regression by Newton-Raphson with step halving.

    The intercept is not penalized. Converges when the gradient norm falls
    below ``tol``; otherwise raises :class:`NumericalError` reporting it.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise DataError("X must be n x p and aligned with y")
    if not np.all(np.isfinite(X)):
        raise DataError("X contains missing or non-finite values")
    y = _check_binary(y)
    n, p = X.shape
    Xa = np.column_stack([np.ones(n), X])
    penalty = np.full(p + 1, ridge_lambda)
    penalty[0] = 0.0
    beta = np.zeros(p + 1)
    beta[0] = np.log(y.mean() / (1 - y.mean()))
    obj = logistic_objective(beta[1:], beta[0], X, y, ridge_lambda)
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        prob = expit(Xa @ beta)
        grad = Xa.T @ (prob - y) / n + penalty * beta
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            return LogisticModel(beta[1:].copy(), float(beta[0]), ridge_lambda, n_iter=it - 1, gradient_norm=gnorm)
        w = prob * (1 - prob)
        hess = (Xa.T * w) @ Xa / n + np.diag(penalty)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            candidate = beta - t * step
            new_obj = logistic_objective(candidate[1:], candidate[0], X, y, ridge_lambda)
            if new_obj <= obj + 1e-15 * max(1.0, abs(obj)) or t < 1e-10:
                break
            t /= 2.0
        beta, obj = candidate, new_obj
    grad = Xa.T @ (expit(Xa @ beta) - y) / n + penalty * beta
    gnorm = float(np.linalg.norm(grad))
    if gnorm < tol:
        return LogisticModel(beta[1:].copy(), float(beta[0]), ridge_lambda, n_iter=max_iter, gradient_norm=gnorm)
    raise NumericalError(f"logistic fit did not converge in {max_iter} iterations "
                         f"(gradient norm {gnorm:.3g}, lambda {ridge_lambda:g})")


def predict_proba(model: LogisticModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(model.coefficients):
        raise DataError(f"expected {len(model.coefficients)} columns, got {X.shape[1]}")
    prob = expit(model.intercept + X @ model.coefficients)
    return np.clip(prob, PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)


def stratified_folds(y, n_folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified (train, validation) index pairs; fold count shrinks to the minority class size."""
    y = np.asarray(y)
    minority = int(min(np.sum(y == 1), np.sum(y == 0)))
    k = min(n_folds, minority)
    if k < 2:
        raise DataError("cross-validation needs at least two rows of each class")
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed % (2**32))
    return list(splitter.split(np.zeros(len(y)), y))


def fit_logistic_cv(X, y, grid: Sequence[float] = LAMBDA_GRID, n_folds: int = 10, seed: int = 0) -> LogisticModel:
    """Pick the ridge penalty with the best mean validation AUC, then refit on all rows.

    Ties go to the larger penalty.
    """
    X = np.asarray(X, dtype=float)
    y = _check_binary(y)
    folds = stratified_folds(y, n_folds, seed)
    scores = {}
    for lam in grid:
        aucs = []
        for train, valid in folds:
            try:
                model = fit_logistic(X[train], y[train], lam)
            except (NumericalError, DataError):
                aucs = []
                break
            aucs.append(stats.roc_auc(predict_proba(model, X[valid]), y[valid]).auc)
        if aucs:
            scores[lam] = float(np.mean(aucs))
    if not scores:
        raise NumericalError("no ridge penalty in the grid produced a converged fit")
    best_auc = max(scores.values())
    best = max(lam for lam, auc in scores.items() if auc >= best_auc - 1e-12)
    model = fit_logistic(X, y, best)
    return LogisticModel(model.coefficients, model.intercept, best, n_iter=model.n_iter,
                         gradient_norm=model.gradient_norm, cv_auc=scores)


def out_of_fold_scores(X, y, n_folds: int = 10, seed: int = 0, ridge_lambda: float | None = None) -> np.ndarray:
    """Training-set probabilities where each row is scored by a model that never saw it.

    The penalty is chosen once by :func:`fit_logistic_cv` on all rows unless given.
    """
    X = np.asarray(X, dtype=float)
    y = _check_binary(y)
    if ridge_lambda is None:
        ridge_lambda = fit_logistic_cv(X, y, n_folds=n_folds, seed=seed).ridge_lambda
    out = np.empty(len(y))
    for train, valid in stratified_folds(y, n_folds, sub_seed(seed, "oof")):
        out[valid] = predict_proba(fit_logistic(X[train], y[train], ridge_lambda), X[valid])
    return out


# --------------------------------------------------------------------------- linear regression


@dataclass(frozen=True)
class LinearModel:
    coefficients: np.ndarray
    intercept: float
    train_rmse: float
    r_squared: float
    ridge_lambda: float = 0.0
    columns: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "kind": "linear",
            "coefficients": dict(zip(self.columns or [f"x{j}" for j in range(len(self.coefficients))],
                                     self.coefficients.tolist())),
            "intercept": self.intercept,
            "train_rmse": self.train_rmse,
            "r_squared": self.r_squared,
            "ridge_lambda": self.ridge_lambda,
        }


def fit_linear(X, y) -> LinearModel:
    """Least squares with intercept; rank-deficient designs get a 1e-8 ridge and a warning."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise DataError("X must be n x p and aligned with y")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("linear fit inputs contain missing or non-finite values")
    n, p = X.shape
    if n <= p:
        raise DataError(f"linear fit needs more rows than columns ({n} <= {p})")
    Xa = np.column_stack([np.ones(n), X])
    lam = 0.0
    if np.linalg.matrix_rank(Xa) < p + 1:
        lam = 1e-8
        warnings.warn("rank-deficient design; applying ridge 1e-8", DegenerateFitWarning, stacklevel=2)
        penalty = np.full(p + 1, lam)
        penalty[0] = 0.0
        beta = np.linalg.solve(Xa.T @ Xa + np.diag(penalty) * n, Xa.T @ y)
    else:
        beta = np.linalg.lstsq(Xa, y, rcond=None)[0]
    fitted = Xa @ beta
    rmse = float(np.sqrt(np.mean((y - fitted) ** 2)))
    return LinearModel(beta[1:], float(beta[0]), rmse, r_squared_score(y, fitted), lam)


def predict_linear(model: LinearModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(model.coefficients):
        raise DataError(f"expected {len(model.coefficients)} columns, got {X.shape[1]}")
    return model.intercept + X @ model.coefficients


def r_squared_score(y, predicted) -> float:
    """1 - SSE/SST around the mean of ``y``; negative when worse than that mean."""
    y = np.asarray(y, dtype=float)
    sst = float(np.sum((y - y.mean()) ** 2))
    sse = float(np.sum((y - np.asarray(predicted, dtype=float)) ** 2))
    if sst == 0.0:
        return 1.0 if sse == 0.0 else float("-inf")
    return 1.0 - sse / sst


# --------------------------------------------------------------------------- kernel Naive Bayes


def silverman_bandwidth(x: np.ndarray) -> float:
    """Rule-of-thumb Gaussian kernel bandwidth ``0.9 * min(sd, IQR/1.34) * n^(-1/5)``."""
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd or abs(float(x[0])) or 1.0
    return 0.9 * spread * len(x) ** -0.2


@dataclass(frozen=True)
class KernelNaiveBayes:
    class_priors: np.ndarray
    samples: tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]] = field(repr=False)
    bandwidths: np.ndarray = field(default=None)
    features: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "kind": "kernel_nb",
            "class_priors": self.class_priors.tolist(),
            "bandwidths": self.bandwidths.tolist(),
            "features": list(self.features),
            "samples": [[s.tolist() for s in per_class] for per_class in self.samples],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "KernelNaiveBayes":
        samples = tuple(tuple(np.asarray(s, float) for s in per_class) for per_class in raw["samples"])
        return cls(np.asarray(raw["class_priors"], float), samples,
                   np.asarray(raw["bandwidths"], float), tuple(raw["features"]))


def fit_kernel_nb(X, y, features: Sequence[str] | None = None) -> KernelNaiveBayes:
    """Per-class, per-feature Gaussian KDEs with class-frequency priors."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = _check_binary(y)
    if not np.all(np.isfinite(X)):
        raise DataError("Naive Bayes inputs must be finite")
    priors = np.array([np.mean(y == 0), np.mean(y == 1)])
    overall_sd = X.std(axis=0, ddof=1)
    bandwidths = np.empty((2, X.shape[1]))
    samples = []
    for c in (0, 1):
        rows = X[y == c]
        samples.append(tuple(rows[:, j].copy() for j in range(X.shape[1])))
        for j in range(X.shape[1]):
            floor = max(1e-6 * overall_sd[j], 1e-12)
            bandwidths[c, j] = max(silverman_bandwidth(rows[:, j]), floor)
    names = tuple(features) if features is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    return KernelNaiveBayes(priors, (samples[0], samples[1]), bandwidths, names)


def kde_log_density(points: np.ndarray, sample: np.ndarray, bandwidth: float, chunk: int = 512) -> np.ndarray:
    """Log of the Gaussian KDE of ``sample`` evaluated at ``points``."""
    points = np.asarray(points, dtype=float)
    out = np.empty(len(points))
    norm = np.log(len(sample) * bandwidth * np.sqrt(2 * np.pi))
    for start in range(0, len(points), chunk):
        z = (points[start:start + chunk, None] - sample[None, :]) / bandwidth
        out[start:start + chunk] = logsumexp(-0.5 * z * z, axis=1) - norm
    return out


def nb_log_joint(model: KernelNaiveBayes, X) -> np.ndarray:
    """``log prior(c) + sum_j log density_cj(x_j)`` as an n x 2 array."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if len(model.features) == 1 else X[None, :]
    if X.shape[1] != len(model.features):
        raise DataError(f"expected {len(model.features)} features, got {X.shape[1]}")
    out = np.zeros((len(X), 2))
    for c in (0, 1):
        out[:, c] = np.log(model.class_priors[c])
        for j in range(X.shape[1]):
            out[:, c] += kde_log_density(X[:, j], model.samples[c][j], model.bandwidths[c, j])
    return out


def nb_posterior(model: KernelNaiveBayes, X) -> np.ndarray:
    """Posterior probability of class 1; falls back to the prior where both densities vanish."""
    joint = nb_log_joint(model, X)
    with np.errstate(invalid="ignore"):
        post = np.exp(joint[:, 1] - np.logaddexp(joint[:, 0], joint[:, 1]))
    vanished = np.isneginf(joint).all(axis=1)
    post[vanished] = model.class_priors[1]
    return post


def ensemble_naive_bayes(img_train, img_test, cov_train, cov_test, y_train) -> np.ndarray:
    """Combine an image-model score and a covariate-model score as independent evidence.

    ``img_train``/``cov_train`` must be out-of-fold training predictions (see
    :func:`out_of_fold_scores`); the kernel Naive Bayes model is fit on those two
    probability columns and applied to the test scores.
    """
    train = np.column_stack([np.asarray(img_train, float), np.asarray(cov_train, float)])
    test = np.column_stack([np.asarray(img_test, float), np.asarray(cov_test, float)])
    for block in (train, test):
        if np.any(block <= 0) or np.any(block >= 1):
            raise DataError("ensemble inputs must be probabilities strictly inside (0, 1)")
    model = fit_kernel_nb(train, y_train, features=("img", "cov"))
    return nb_posterior(model, test)


# --------------------------------------------------------------------------- screens


def _screen_partition(ds: Dataset, partition: Partition | None, seed: int) -> Partition:
    return partition or partition_by_patient(ds, 0.75, sub_seed(seed, "partition"))


def _img_scores(ds: Dataset, part: Partition, pca: PcaModel | None, k: int):
    if ds.features is None:
        raise DataError("screens need feature vectors")
    pca = pca or fit_pca(ds.features[part.train_indices], k)
    scores = project(pca, ds.features)
    mu = scores[part.train_indices].mean(axis=0)
    sd = scores[part.train_indices].std(axis=0)
    sd[sd == 0] = 1.0
    return (scores - mu) / sd


def _parallel_map(fn, items, n_jobs: int):
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def predictability_screen(ds: Dataset, targets: Sequence[str], partition: Partition | None = None, *,
                          pca: PcaModel | None = None, k: int = DEFAULT_COMPONENTS, n_boot: int = 2000,
                          seed: int = 0, n_folds: int = 10, n_jobs: int = 1) -> pd.DataFrame:
    """Image-only logistic model per binarized target, scored by test AUC with bootstrap CI.

    Rows missing a target are dropped for that target only. Targets with one
    class in train or test yield a row with ``status`` set and NaN metrics.
    """
    part = _screen_partition(ds, partition, seed)
    Z = _img_scores(ds, part, pca, k)

    def one(target: str) -> dict:
        values = ds.table[target].to_numpy(dtype=float)
        if ds.spec(target).kind != "binary" or not np.all(np.isin(values[~np.isnan(values)], (0.0, 1.0))):
            raise ConfigError(f"screen target {target!r} must be binarized first")
        tr = part.train_indices[~np.isnan(values[part.train_indices])]
        te = part.test_indices[~np.isnan(values[part.test_indices])]
        row = {"target": target, "group": ds.spec(target).group, "n_train": len(tr), "n_test": len(te),
               "n_cases": int(values[te].sum()), "n_controls": int(len(te) - values[te].sum()),
               "auc": np.nan, "ci_low": np.nan, "ci_high": np.nan, "status": "ok"}
        if len(np.unique(values[tr])) < 2:
            row["status"] = "single class in train"
            return row
        if len(np.unique(values[te])) < 2:
            row["status"] = "single class in test"
            return row
        tseed = sub_seed(seed, f"screen:{target}")
        model = fit_logistic_cv(Z[tr], values[tr], n_folds=n_folds, seed=tseed)
        res = stats.roc_analysis(predict_proba(model, Z[te]), values[te], n_boot, tseed)
        row.update(auc=res.auc, ci_low=res.ci_low, ci_high=res.ci_high, ridge_lambda=model.ridge_lambda)
        return row

    rows = _parallel_map(one, list(targets), n_jobs)
    cols = ["target", "group", "n_train", "n_test", "n_cases", "n_controls", "auc", "ci_low", "ci_high",
            "ridge_lambda", "status"]
    return pd.DataFrame(rows).reindex(columns=cols)


def regression_screen(ds: Dataset, targets: Sequence[str], partition: Partition | None = None, *,
                      pca: PcaModel | None = None, k: int = DEFAULT_COMPONENTS, seed: int = 0,
                      n_jobs: int = 1) -> pd.DataFrame:
    """Image-only linear model per continuous target, scored by out-of-sample R^2.

    The raw test R^2 is reported, including negative values.
    """
    part = _screen_partition(ds, partition, seed)
    Z = _img_scores(ds, part, pca, k)

    def one(target: str) -> dict:
        if ds.spec(target).kind != "continuous":
            raise ConfigError(f"regression target {target!r} must be continuous")
        values = ds.table[target].to_numpy(dtype=float)
        tr = part.train_indices[~np.isnan(values[part.train_indices])]
        te = part.test_indices[~np.isnan(values[part.test_indices])]
        row = {"target": target, "group": ds.spec(target).group, "n_train": len(tr), "n_test": len(te),
               "r2": np.nan, "rmse": np.nan, "train_r2": np.nan, "status": "ok"}
        if len(tr) <= Z.shape[1] + 1 or len(te) < 2:
            row["status"] = "too few observed rows"
            return row
        model = fit_linear(Z[tr], values[tr])
        pred = predict_linear(model, Z[te])
        row.update(r2=r_squared_score(values[te], pred), rmse=float(np.sqrt(np.mean((values[te] - pred) ** 2))),
                   train_r2=model.r_squared)
        return row

    return pd.DataFrame(_parallel_map(one, list(targets), n_jobs))
