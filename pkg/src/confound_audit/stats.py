"""ROC/PRC analysis, bootstrap and DeLong AUC tests, Fisher's exact test, Youden points.

Threshold convention used throughout: ``score >= threshold`` is a positive call.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp
from scipy.stats import norm, rankdata

from confound_audit.errors import DataError
from confound_audit.seeding import replicate_rng

# relative slack when collecting tables "as or less probable" than the observed one
FISHER_RELATIVE_TOLERANCE = 1e-7


@dataclass(frozen=True)
class AssociationResult:
    odds_ratio: float
    p_value: float
    table: tuple[tuple[int, int], tuple[int, int]]
    status: str = "ok"

    @property
    def significant(self) -> bool:
        return self.status == "ok" and self.p_value < 0.05


@dataclass(frozen=True)
class RocAnalysis:
    auc: float
    ci_low: float
    ci_high: float
    fpr: np.ndarray = field(repr=False)
    tpr: np.ndarray = field(repr=False)
    n_cases: int = 0
    n_controls: int = 0

    @property
    def curve(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    @property
    def excludes_chance(self) -> bool:
        return not (self.ci_low <= 0.5 <= self.ci_high)


@dataclass(frozen=True)
class PrcAnalysis:
    auprc: float
    recall: np.ndarray = field(repr=False)
    precision: np.ndarray = field(repr=False)
    n_cases: int = 0
    n_controls: int = 0

    @property
    def prevalence(self) -> float:
        return self.n_cases / (self.n_cases + self.n_controls)


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    accuracy: float
    npv: float
    ppv: float
    tn: int
    tp: int
    fn: int
    fp: int
    degenerate: bool = False

    @property
    def youden_j(self) -> float:
        return self.sensitivity + self.specificity - 1.0

    @classmethod
    def from_counts(cls, tn: int, tp: int, fn: int, fp: int, threshold: float = float("nan"),
                    degenerate: bool = False) -> "OperatingPoint":
        n = tn + tp + fn + fp
        return cls(
            threshold=float(threshold),
            sensitivity=_ratio(tp, tp + fn),
            specificity=_ratio(tn, tn + fp),
            accuracy=_ratio(tp + tn, n),
            npv=_ratio(tn, tn + fn),
            ppv=_ratio(tp, tp + fp),
            tn=int(tn), tp=int(tp), fn=int(fn), fp=int(fp),
            degenerate=degenerate,
        )

    def as_dict(self) -> dict:
        return {
            "threshold": self.threshold, "specificity": self.specificity,
            "sensitivity": self.sensitivity, "accuracy": self.accuracy,
            "npv": self.npv, "ppv": self.ppv,
            "tn": self.tn, "tp": self.tp, "fn": self.fn, "fp": self.fp,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class AucComparison:
    auc_a: float
    auc_b: float
    delta: float
    p_value: float
    method: str
    statistic: float = float("nan")
    note: str = ""


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else float("nan")


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError(f"scores and labels must be 1-D of equal length, got {scores.shape} and {labels.shape}")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores contain non-finite values")
    lab = labels.astype(float)
    if not np.all((lab == 0) | (lab == 1)):
        raise DataError("labels must be binary 0/1")
    cases, controls = scores[lab == 1], scores[lab == 0]
    if len(cases) == 0 or len(controls) == 0:
        raise DataError("both classes must be present")
    return cases, controls


# --------------------------------------------------------------------------- Fisher


def _log_choose(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def odds_ratio(table) -> float:
    (a, b), (c, d) = table
    if min(a, b, c, d) == 0:
        a, b, c, d = a + 0.5, b + 0.5, c + 0.5, d + 0.5
    return (a * d) / (b * c)


def fisher_exact(table) -> AssociationResult:
    """Two-sided Fisher exact test on a 2x2 table ``[[a, b], [c, d]]``.

    The p-value sums the hypergeometric probability of every table with the
    observed margins that is no more probable than the observed table.
    Zero margins make the test undefined; p is then reported as 1 with
    ``status="degenerate"``.
    """
    arr = np.asarray(table)
    if arr.shape != (2, 2) or np.any(arr < 0) or np.any(arr != np.round(arr)):
        raise DataError(f"expected a 2x2 table of non-negative integers, got {table!r}")
    (a, b), (c, d) = (int(v) for v in arr[0]), (int(v) for v in arr[1])
    tbl = ((a, b), (c, d))
    row1, col1, n = a + b, a + c, a + b + c + d
    if min(row1, c + d, col1, b + d) == 0:
        return AssociationResult(odds_ratio(tbl), 1.0, tbl, status="degenerate")

    lo, hi = max(0, row1 + col1 - n), min(row1, col1)
    support = np.arange(lo, hi + 1)
    logp = _log_choose(col1, support) + _log_choose(n - col1, row1 - support) - _log_choose(n, row1)
    observed = logp[a - lo]
    keep = logp <= observed + math.log1p(FISHER_RELATIVE_TOLERANCE)
    p = float(np.exp(logsumexp(logp[keep])))
    return AssociationResult(odds_ratio(tbl), min(1.0, p), tbl)


def contingency(x, y) -> tuple[tuple[int, int], tuple[int, int]]:
    """Cross-tabulate binary covariate ``x`` against binary outcome ``y``.

    Row 0 is ``x == 1``, column 0 is ``y == 1``. Pairs with a missing ``x`` are dropped.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = ~np.isnan(x) & ~np.isnan(y)
    x, y = x[ok], y[ok]
    a = int(np.sum((x == 1) & (y == 1)))
    b = int(np.sum((x == 1) & (y == 0)))
    c = int(np.sum((x == 0) & (y == 1)))
    d = int(np.sum((x == 0) & (y == 0)))
    return (a, b), (c, d)


def associate(x, y) -> AssociationResult:
    return fisher_exact(contingency(x, y))


# --------------------------------------------------------------------------- ROC


def auc_from_groups(cases: np.ndarray, controls: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    ctrl = np.sort(controls)
    below = np.searchsorted(ctrl, cases, side="left")
    at_or_below = np.searchsorted(ctrl, cases, side="right")
    wins = below.sum() + 0.5 * (at_or_below - below).sum()
    return float(wins) / (len(cases) * len(controls))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Empirical ROC as (fpr, tpr, thresholds), from (0, 0) to (1, 1).

    Tied scores move the curve diagonally, which makes the trapezoidal area
    equal to the Mann-Whitney AUC.
    """
    cases, controls = _split(scores, labels)
    thresholds = np.unique(np.concatenate([cases, controls]))[::-1]
    case_sorted, ctrl_sorted = np.sort(cases), np.sort(controls)
    tp = len(cases) - np.searchsorted(case_sorted, thresholds, side="left")
    fp = len(controls) - np.searchsorted(ctrl_sorted, thresholds, side="left")
    fpr = np.concatenate([[0.0], fp / len(controls)])
    tpr = np.concatenate([[0.0], tp / len(cases)])
    return fpr, tpr, np.concatenate([[np.inf], thresholds])


def roc_auc(scores, labels) -> RocAnalysis:
    """Point-estimate ROC analysis; the CI fields collapse onto the AUC."""
    cases, controls = _split(scores, labels)
    auc = auc_from_groups(cases, controls)
    fpr, tpr, _ = roc_curve(scores, labels)
    return RocAnalysis(auc, auc, auc, fpr, tpr, len(cases), len(controls))


def _bootstrap_aucs(groups_a, groups_b, n_boot: int, seed: int, n_jobs: int) -> np.ndarray:
    def one(i: int) -> tuple[float, float]:
        out = []
        for side, (cases, controls) in enumerate((groups_a, groups_b)):
            if cases is None:
                out.append(np.nan)
                continue
            rng = replicate_rng(seed, i) if side == 0 else np.random.default_rng(
                np.random.SeedSequence([int(seed), int(i), 1]))
            bc = cases[rng.integers(0, len(cases), len(cases))]
            bn = controls[rng.integers(0, len(controls), len(controls))]
            out.append(auc_from_groups(bc, bn))
        return out[0], out[1]

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, range(n_boot)))
    else:
        results = [one(i) for i in range(n_boot)]
    return np.asarray(results, dtype=float).reshape(n_boot, 2)


def bootstrap_aucs(scores, labels, n_boot: int = 2000, seed: int = 0, n_jobs: int = 1) -> np.ndarray:
    """AUCs of ``n_boot`` stratified resamples (cases and controls drawn separately).

    Replicate ``i`` draws from its own stream keyed on ``(seed, i)``, so the
    result does not depend on ``n_jobs`` or execution order.
    """
    cases, controls = _split(scores, labels)
    return _bootstrap_aucs((cases, controls), (None, None), n_boot, seed, n_jobs)[:, 0]


def bootstrap_auc_ci(scores, labels, n_boot: int = 2000, seed: int = 0, level: float = 0.95,
                     n_jobs: int = 1) -> tuple[float, float]:
    """Percentile bootstrap CI of the AUC from stratified resamples."""
    cases, controls = _split(scores, labels)
    if len(cases) < 2 or len(controls) < 2:
        raise DataError("bootstrap CI needs at least two cases and two controls")
    aucs = bootstrap_aucs(scores, labels, n_boot, seed, n_jobs)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(aucs, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def roc_analysis(scores, labels, n_boot: int = 2000, seed: int = 0, n_jobs: int = 1) -> RocAnalysis:
    """AUC, curve and stratified-bootstrap 95% CI.

    The percentile interval is widened to include the point estimate when
    resampling skews it past the estimate (possible near AUC 0 or 1).
    """
    point = roc_auc(scores, labels)
    lo, hi = bootstrap_auc_ci(scores, labels, n_boot, seed, n_jobs=n_jobs)
    return RocAnalysis(point.auc, min(lo, point.auc), max(hi, point.auc), point.fpr, point.tpr,
                       point.n_cases, point.n_controls)


def auc_test_unpaired(scores_a, labels_a, scores_b, labels_b, n_boot: int = 2000, seed: int = 0,
                      n_jobs: int = 1) -> AucComparison:
    """Two-sided bootstrap test for the AUC difference of two independent samples.

    Each replicate resamples both sides independently (stratified by class);
    ``p = 2 * Phi(-|delta| / sd(boot deltas))``.
    """
    ga, gb = _split(scores_a, labels_a), _split(scores_b, labels_b)
    auc_a, auc_b = auc_from_groups(*ga), auc_from_groups(*gb)
    delta = auc_a - auc_b
    boots = _bootstrap_aucs(ga, gb, n_boot, seed, n_jobs)
    se = float(np.std(boots[:, 0] - boots[:, 1], ddof=1))
    if se == 0.0:
        if delta == 0.0:
            return AucComparison(auc_a, auc_b, 0.0, 1.0, "bootstrap_unpaired", 0.0)
        return AucComparison(auc_a, auc_b, delta, 0.0, "bootstrap_unpaired", float("inf"),
                             note=f"zero bootstrap variance; p < {1.0 / n_boot:g}")
    z = delta / se
    return AucComparison(auc_a, auc_b, delta, float(2.0 * norm.sf(abs(z))), "bootstrap_unpaired", z)


def delong_components(scores, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """AUC and DeLong placement values.

    Returns ``(auc, v_cases, v_controls)`` where ``v_cases[i]`` is the fraction of
    controls case ``i`` outscores (ties 1/2) and ``v_controls[j]`` is the fraction
    of cases that outscore control ``j``.
    """
    cases, controls = _split(scores, labels)
    m, n = len(cases), len(controls)
    pooled = rankdata(np.concatenate([cases, controls]))
    within_cases = rankdata(cases)
    within_controls = rankdata(controls)
    v_cases = (pooled[:m] - within_cases) / n
    v_controls = 1.0 - (pooled[m:] - within_controls) / m
    return float(v_cases.mean()), v_cases, v_controls


def delong_covariance(score_sets, labels) -> tuple[np.ndarray, np.ndarray]:
    """AUC vector and DeLong covariance matrix for paired score sets on one cohort."""
    comps = [delong_components(s, labels) for s in score_sets]
    aucs = np.array([c[0] for c in comps])
    v10 = np.vstack([c[1] for c in comps])
    v01 = np.vstack([c[2] for c in comps])
    m, n = v10.shape[1], v01.shape[1]
    s10 = np.atleast_2d(np.cov(v10, ddof=1)) if m > 1 else np.zeros((len(comps), len(comps)))
    s01 = np.atleast_2d(np.cov(v01, ddof=1)) if n > 1 else np.zeros((len(comps), len(comps)))
    return aucs, s10 / m + s01 / n


def delong_test(scores_a, scores_b, labels) -> AucComparison:
    """Paired two-sided DeLong test of ``AUC(a) - AUC(b)`` on shared rows."""
    aucs, cov = delong_covariance([scores_a, scores_b], labels)
    delta = float(aucs[0] - aucs[1])
    var = float(cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1])
    if var <= 1e-300 or not np.isfinite(var):
        p = 1.0 if abs(delta) < 1e-15 else 0.0
        return AucComparison(float(aucs[0]), float(aucs[1]), delta, p, "delong_paired",
                             0.0 if p == 1.0 else float("inf"),
                             note="zero variance of the AUC difference")
    z = delta / math.sqrt(var)
    return AucComparison(float(aucs[0]), float(aucs[1]), delta, float(2.0 * norm.sf(abs(z))),
                         "delong_paired", z)


# --------------------------------------------------------------------------- operating points


def confusion_at(scores, labels, threshold: float) -> OperatingPoint:
    cases, controls = _split(scores, labels)
    tp = int(np.sum(cases >= threshold))
    fp = int(np.sum(controls >= threshold))
    return OperatingPoint.from_counts(tn=len(controls) - fp, tp=tp, fn=len(cases) - tp, fp=fp,
                                      threshold=threshold)


def youden_point(scores, labels) -> OperatingPoint:
    """Operating point maximizing sensitivity + specificity - 1.

    Candidates are -inf, +inf and midpoints between adjacent distinct scores;
    ties in J go to the candidate with the higher specificity. A maximal J of
    zero or less is flagged ``degenerate``.
    """
    cases, controls = _split(scores, labels)
    uniq = np.unique(np.concatenate([cases, controls]))
    candidates = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2.0, [np.inf]])
    case_sorted, ctrl_sorted = np.sort(cases), np.sort(controls)
    tp = len(cases) - np.searchsorted(case_sorted, candidates, side="left")
    fp = len(controls) - np.searchsorted(ctrl_sorted, candidates, side="left")
    sens = tp / len(cases)
    spec = 1.0 - fp / len(controls)
    j = sens + spec - 1.0
    best = np.flatnonzero(j >= j.max() - 1e-12)
    k = best[np.argmax(spec[best])]
    return OperatingPoint.from_counts(
        tn=int(len(controls) - fp[k]), tp=int(tp[k]), fn=int(len(cases) - tp[k]), fp=int(fp[k]),
        threshold=float(candidates[k]), degenerate=bool(j[k] <= 1e-12),
    )


# --------------------------------------------------------------------------- precision-recall


def prc_auc(scores, labels) -> PrcAnalysis:
    """Average precision: sum of precision times recall increments over distinct thresholds."""
    cases, controls = _split(scores, labels)
    thresholds = np.unique(np.concatenate([cases, controls]))[::-1]
    tp = len(cases) - np.searchsorted(np.sort(cases), thresholds, side="left")
    fp = len(controls) - np.searchsorted(np.sort(controls), thresholds, side="left")
    precision = tp / (tp + fp)
    recall = tp / len(cases)
    increments = np.diff(np.concatenate([[0.0], recall]))
    auprc = float(np.sum(increments * precision))
    return PrcAnalysis(
        auprc,
        np.concatenate([[0.0], recall]),
        np.concatenate([[precision[0]], precision]),
        len(cases), len(controls),
    )
