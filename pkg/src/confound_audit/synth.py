"""Synthetic datasets with dialable confounding, plus the Bayes-optimal AUC they admit.

Generative model, per row:

    logit P(y=1) = b0 + sum_i effect_i * code_i + patient_effect
    x = noise_sd * (direct_signal * y * u_0 + sum_i leak_i * code_i * u_i + N(0, I_D))

``code_i`` is the standardized value for continuous covariates, the 0/1
value for binary ones and ``level_index / (levels - 1)`` for categorical
ones. The ``u`` are fixed orthonormal directions and ``b0`` is solved so
the realized mean risk equals the target prevalence.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
import yaml
from scipy.optimize import brentq
from scipy.special import expit, logsumexp
from scipy.stats import norm

from confound_audit.dataset import Dataset, Schema, VariableSpec, schema_to_dict, write_table
from confound_audit.errors import ConfigError
from confound_audit.seeding import sub_seed
from confound_audit.stats import auc_from_groups

log = logging.getLogger(__name__)

INTERCEPT_BRACKET = (-40.0, 40.0)
MAX_ORACLE_COMPONENTS = 4000


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str = "binary"
    group: str = "PT"
    effect: float = 0.0
    leak: float = 0.0
    missing_rate: float = 0.0
    p: float = 0.5
    levels: tuple[str, ...] = ()
    probs: tuple[float, ...] = ()
    mean: float = 0.0
    sd: float = 1.0
    unit: str = ""

    def __post_init__(self):
        if self.kind not in ("continuous", "binary", "categorical"):
            raise ConfigError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        if self.group not in ("PT", "HP", "META"):
            raise ConfigError(f"covariate {self.name!r}: group must be PT, HP or META")
        if self.leak < 0:
            raise ConfigError(f"covariate {self.name!r}: leak strength must be non-negative")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError(f"covariate {self.name!r}: missing_rate must be in [0, 1)")
        if self.kind == "binary" and not 0.0 < self.p < 1.0:
            raise ConfigError(f"covariate {self.name!r}: p must be in (0, 1)")
        if self.kind == "categorical":
            if len(self.levels) < 2:
                raise ConfigError(f"covariate {self.name!r}: categorical needs at least two levels")
            if self.probs and (len(self.probs) != len(self.levels) or abs(sum(self.probs) - 1) > 1e-9):
                raise ConfigError(f"covariate {self.name!r}: probs must match levels and sum to 1")
        if self.kind == "continuous" and not self.sd > 0:
            raise ConfigError(f"covariate {self.name!r}: sd must be positive")

    @property
    def level_probs(self) -> np.ndarray:
        if self.probs:
            return np.asarray(self.probs, dtype=float)
        return np.full(len(self.levels), 1.0 / len(self.levels))

    def draw_codes(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "continuous":
            return rng.standard_normal(n)
        if self.kind == "binary":
            return (rng.random(n) < self.p).astype(float)
        idx = rng.choice(len(self.levels), size=n, p=self.level_probs)
        return idx / (len(self.levels) - 1)

    def values(self, codes: np.ndarray) -> pd.Series:
        """Map codes to the values written into the table."""
        if self.kind == "continuous":
            return pd.Series(self.mean + self.sd * codes)
        if self.kind == "binary":
            return pd.Series(codes.astype(float))
        idx = np.rint(codes * (len(self.levels) - 1)).astype(int)
        return pd.Series(np.asarray(self.levels, dtype=object)[idx], dtype=object)


@dataclass(frozen=True)
class ConfoundSpec:
    n_patients: int = 5000
    rows_per_patient: tuple[int, int] = (1, 5)
    prevalence: float = 0.2
    covariates: tuple[CovariateSpec, ...] = ()
    direct_signal: float = 0.0
    feature_dim: int = 32
    noise_sd: float = 1.0
    patient_sd: float = 0.2
    outcome_name: str = "outcome"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ConfigError("prevalence must be in (0, 1)")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be at least 1")
        if self.feature_dim < 1 + len(self.covariates):
            raise ConfigError(f"feature_dim {self.feature_dim} cannot hold {1 + len(self.covariates)} "
                              "orthonormal signal directions")
        if self.direct_signal < 0 or self.noise_sd <= 0 or self.patient_sd < 0:
            raise ConfigError("direct_signal and patient_sd must be non-negative, noise_sd positive")
        lo, hi = self.rows_per_patient
        if not 1 <= lo <= hi:
            raise ConfigError("rows_per_patient must be a range 1 <= lo <= hi")
        if self.n_patients < 2:
            raise ConfigError("need at least two patients")
        names = [c.name for c in self.covariates] + [self.outcome_name]
        if len(set(names)) != len(names):
            raise ConfigError("covariate names must be unique and differ from the outcome name")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["rows_per_patient"] = list(self.rows_per_patient)
        out["covariates"] = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in c.items()}
                             for c in out["covariates"]]
        return out

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ConfoundSpec":
        raw = dict(raw)
        covs = []
        for c in raw.pop("covariates", []) or []:
            c = dict(c)
            for key in ("levels", "probs"):
                if key in c:
                    c[key] = tuple(c[key])
            try:
                covs.append(CovariateSpec(**c))
            except TypeError as exc:
                raise ConfigError(f"bad covariate entry {c!r}: {exc}") from exc
        if "rows_per_patient" in raw:
            raw["rows_per_patient"] = tuple(raw["rows_per_patient"])
        try:
            return cls(covariates=tuple(covs), **raw)
        except TypeError as exc:
            raise ConfigError(f"bad synth spec: {exc}") from exc


def load_spec(path: str | Path) -> ConfoundSpec:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"synth spec not found: {path}") from exc
    return ConfoundSpec.from_dict(raw or {})


@dataclass(frozen=True)
class GroundTruth:
    probabilities: np.ndarray = field(repr=False)
    feature_means: np.ndarray = field(repr=False)
    directions: np.ndarray = field(repr=False)
    intercept: float
    codes: pd.DataFrame = field(repr=False)
    patient_effects: np.ndarray = field(repr=False)
    outcome: np.ndarray = field(repr=False)


def signal_directions(dim: int, count: int, seed: int) -> np.ndarray:
    """``count`` orthonormal rows in R^dim from Gram-Schmidt on seeded Gaussian vectors."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, count)))
    q = q * np.sign(np.diag(r))
    return q.T


def solve_intercept(eta: np.ndarray, prevalence: float) -> float:
    """Intercept b0 with mean(expit(b0 + eta)) equal to ``prevalence``."""
    lo, hi = INTERCEPT_BRACKET

    def gap(b0: float) -> float:
        return float(np.mean(expit(b0 + eta))) - prevalence

    if gap(lo) > 0 or gap(hi) < 0:
        achievable = (float(np.mean(expit(lo + eta))), float(np.mean(expit(hi + eta))))
        raise ConfigError(f"prevalence {prevalence} infeasible; achievable range {achievable}")
    return float(brentq(gap, lo, hi, xtol=1e-12))


def generate(spec: ConfoundSpec) -> tuple[Dataset, GroundTruth]:
    """Draw a dataset from ``spec``; identical specs give bit-identical output."""
    seed = spec.seed
    rng_rows = np.random.default_rng(sub_seed(seed, "synth:rows"))
    lo, hi = spec.rows_per_patient
    per_patient = rng_rows.integers(lo, hi + 1, size=spec.n_patients)
    patient_index = np.repeat(np.arange(spec.n_patients), per_patient)
    n = len(patient_index)

    codes = {}
    for cov in spec.covariates:
        codes[cov.name] = cov.draw_codes(np.random.default_rng(sub_seed(seed, f"synth:cov:{cov.name}")), n)
    rng_pat = np.random.default_rng(sub_seed(seed, "synth:patient"))
    patient_effects = rng_pat.normal(0.0, spec.patient_sd, size=spec.n_patients)[patient_index]

    eta = patient_effects.copy()
    for cov in spec.covariates:
        eta += cov.effect * codes[cov.name]
    b0 = solve_intercept(eta, spec.prevalence)
    prob = expit(b0 + eta)
    y = (np.random.default_rng(sub_seed(seed, "synth:outcome")).random(n) < prob).astype(float)

    U = signal_directions(spec.feature_dim, 1 + len(spec.covariates), sub_seed(seed, "synth:directions"))
    means = spec.direct_signal * y[:, None] * U[0]
    for i, cov in enumerate(spec.covariates, start=1):
        means = means + cov.leak * codes[cov.name][:, None] * U[i]
    noise = np.random.default_rng(sub_seed(seed, "synth:noise")).standard_normal((n, spec.feature_dim))
    features = spec.noise_sd * (means + noise)

    ids = [f"r{i:07d}" for i in range(n)]
    columns = {spec.outcome_name: y}
    for cov in spec.covariates:
        col = cov.values(codes[cov.name])
        if cov.missing_rate > 0:
            rng_miss = np.random.default_rng(sub_seed(seed, f"synth:missing:{cov.name}"))
            col[rng_miss.random(n) < cov.missing_rate] = np.nan
        columns[cov.name] = col.to_numpy()
    table = pd.DataFrame(columns, index=pd.Index(ids, name="row_id"))
    schema = (VariableSpec(spec.outcome_name, "binary", "OUTCOME"),) + tuple(
        VariableSpec(c.name, c.kind, c.group, c.unit) for c in spec.covariates)
    patients = np.array([f"p{i:06d}" for i in patient_index], dtype=object)
    ds = Dataset(schema, table, patients, features)
    truth = GroundTruth(prob, spec.noise_sd * means, U, b0, pd.DataFrame(codes, index=table.index),
                        patient_effects, y)
    log.info("synth: %d rows, %d patients, prevalence %.4f, b0 %.4f", n, spec.n_patients, y.mean(), b0)
    return ds, truth


def write_synth(ds: Dataset, spec: ConfoundSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write ``data.csv``, ``schema.yaml`` and the generating ``spec.yaml``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = Schema(ds.schema)
    paths = {"data": out / "data.csv", "schema": out / "schema.yaml", "spec": out / "spec.yaml"}
    write_table(ds, paths["data"], schema)
    paths["schema"].write_text(yaml.safe_dump(schema_to_dict(schema), sort_keys=False), encoding="utf-8")
    paths["spec"].write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False), encoding="utf-8")
    return paths


# --------------------------------------------------------------------------- oracle


def _support(cov: CovariateSpec, grid: int) -> tuple[np.ndarray, np.ndarray]:
    """Discrete (codes, weights) standing in for a covariate's distribution."""
    if cov.kind == "binary":
        return np.array([0.0, 1.0]), np.array([1 - cov.p, cov.p])
    if cov.kind == "categorical":
        k = len(cov.levels)
        return np.arange(k) / (k - 1), cov.level_probs
    z = np.linspace(-8.0, 8.0, grid)
    w = norm.pdf(z)
    return z, w / w.sum()


def oracle_bayes_auc(spec: ConfoundSpec, which: str = "full", n_draws: int = 1_000_000,
                     seed: int | None = None, chunk: int = 50_000) -> float:
    """Bayes-optimal AUC of predicting the outcome from features alone.

    ``matched`` is the AUC once covariates are balanced between cases and
    controls: only the direct direction still separates the classes, giving
    ``Phi(direct_signal / sqrt(2))``. ``full`` is estimated by Monte Carlo:
    rows are drawn from the model, projected onto the signal directions and
    scored by the exact likelihood ratio of a finite mixture over the leaking
    covariates (continuous ones on a fine grid).
    """
    if which == "matched":
        return float(norm.cdf(spec.direct_signal / np.sqrt(2.0)))
    if which != "full":
        raise ConfigError(f"unknown oracle variant {which!r}")
    rng = np.random.default_rng(sub_seed(spec.seed if seed is None else seed, "oracle"))
    covs = list(spec.covariates)
    codes = np.column_stack([c.draw_codes(rng, n_draws) for c in covs]) if covs else np.empty((n_draws, 0))
    effects = np.array([c.effect for c in covs])
    leaks = np.array([c.leak for c in covs])
    rest = rng.normal(0.0, spec.patient_sd, n_draws)
    eta = rest + codes @ effects
    b0 = solve_intercept(eta, spec.prevalence)
    y = rng.random(n_draws) < expit(b0 + eta)

    leaking = np.flatnonzero(leaks > 0)
    d = spec.direct_signal
    t0 = d * y + rng.standard_normal(n_draws)
    score = d * t0
    if len(leaking):
        n_cont = sum(covs[i].kind == "continuous" for i in leaking)
        grid = int(min(161, max(9, MAX_ORACLE_COMPONENTS ** (1 / n_cont)))) if n_cont else 0
        supports = [_support(covs[i], grid) for i in leaking]
        n_comp = int(np.prod([len(s[0]) for s in supports]))
        if n_comp > MAX_ORACLE_COMPONENTS:
            raise ConfigError(f"oracle mixture would need {n_comp} components; too many leaking covariates")
        comp_codes = np.array(list(itertools.product(*[s[0] for s in supports])))
        comp_w = np.prod(np.array(list(itertools.product(*[s[1] for s in supports]))), axis=1)
        # P(y=1 | leaking codes), marginalizing the other covariates and patient effect
        others = np.setdiff1d(np.arange(len(covs)), leaking)
        background = (rest + codes[:, others] @ effects[others])[:20000]
        comp_eta = comp_codes @ effects[leaking]
        p1 = np.array([np.mean(expit(b0 + e + background)) for e in comp_eta])
        centers = comp_codes * leaks[leaking]
        T = codes[:, leaking] * leaks[leaking] + rng.standard_normal((n_draws, len(leaking)))
        log_w1 = np.log(comp_w) + np.log(np.maximum(p1, 1e-300))
        log_w0 = np.log(comp_w) + np.log(np.maximum(1 - p1, 1e-300))
        for start in range(0, n_draws, chunk):
            block = T[start:start + chunk]
            sq = -0.5 * ((block[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            score[start:start + chunk] += logsumexp(sq + log_w1, axis=1) - logsumexp(sq + log_w0, axis=1)
    return auc_from_groups(score[y], score[~y])


# --------------------------------------------------------------------------- presets


def leak_only_spec(n_rows: int = 20000, seed: int = 0, effect: float = 2.0, leak: float = 3.0) -> ConfoundSpec:
    """No direct signal; one hospital-process confounder drives both outcome and features."""
    return ConfoundSpec(
        n_patients=max(2, n_rows // 3), rows_per_patient=(1, 5), prevalence=0.2,
        covariates=(
            CovariateSpec("age", "continuous", "PT", mean=60.0, sd=15.0, unit="years"),
            CovariateSpec("gender", "binary", "PT"),
            CovariateSpec("scanner", "binary", "HP", effect=effect, leak=leak, p=0.35),
        ),
        direct_signal=0.0, feature_dim=32, seed=seed,
    )


def direct_signal_spec(n_rows: int = 20000, seed: int = 0, signal: float = 2.0) -> ConfoundSpec:
    """Features depend on the outcome only; covariates carry no leak."""
    return ConfoundSpec(
        n_patients=max(2, n_rows // 3), rows_per_patient=(1, 5), prevalence=0.2,
        covariates=(
            CovariateSpec("age", "continuous", "PT", effect=0.5, mean=60.0, sd=15.0, unit="years"),
            CovariateSpec("gender", "binary", "PT", effect=0.5),
            CovariateSpec("scanner", "binary", "HP", effect=1.0),
        ),
        direct_signal=signal, feature_dim=32, seed=seed,
    )


def overlap_spec(n_rows: int = 20000, seed: int = 0) -> ConfoundSpec:
    """Image and covariates both carry outcome information and partly the same information."""
    return ConfoundSpec(
        n_patients=max(2, n_rows // 3), rows_per_patient=(1, 5), prevalence=0.2,
        covariates=(
            CovariateSpec("age", "continuous", "PT", effect=1.0, leak=1.0, mean=60.0, sd=15.0, unit="years"),
            CovariateSpec("gender", "binary", "PT", effect=0.5),
            CovariateSpec("scanner", "categorical", "HP", effect=1.5, leak=2.0, levels=("A", "B", "C")),
            CovariateSpec("priority", "binary", "HP", effect=1.0),
        ),
        direct_signal=1.0, feature_dim=32, seed=seed,
    )


PRESETS = {"leak-only": leak_only_spec, "direct-signal": direct_signal_spec, "overlap": overlap_spec}


def spec_summary(spec: ConfoundSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)
