"""Embedding reduction: PCA for model inputs and exact t-SNE for visual structure."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from confound_audit.errors import ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

DEFAULT_COMPONENTS = 10
EXACT_TSNE_LIMIT = 5000


@dataclass(frozen=True)
class PcaModel:
    means: np.ndarray = field(repr=False)
    components: np.ndarray = field(repr=False)
    explained_variance: np.ndarray
    total_variance: float = float("nan")
    n_samples: int = 0

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "total_variance": self.total_variance,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PcaModel":
        return cls(np.asarray(raw["means"], float), np.asarray(raw["components"], float),
                   np.asarray(raw["explained_variance"], float), float(raw["total_variance"]),
                   int(raw["n_samples"]))


def fit_pca(X, k: int = DEFAULT_COMPONENTS) -> PcaModel:
    """Top-``k`` principal directions of the column-centered data, via SVD.

    Features are centered but not rescaled. Each component is signed so its
    largest-magnitude loading is positive. If the data has rank below ``k``,
    only ``rank`` components are returned (with a warning).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("PCA needs an n x D matrix with n >= 2")
    if not np.all(np.isfinite(X)):
        raise DataError("PCA input contains non-finite values")
    if k < 1:
        raise ConfigError("number of components must be positive")
    n, d = X.shape
    means = X.mean(axis=0)
    centered = X - means
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(n, d) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol))
    if k > rank:
        warnings.warn(f"requested {k} components but the data has rank {rank}; returning {rank}",
                      RuntimeWarning, stacklevel=2)
        k = rank
    components = vt[:k].copy()
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(k), pivots])
    components *= signs[:, None]
    variance = s[:k] ** 2 / (n - 1)
    total = float(np.sum(centered**2) / (n - 1))
    return PcaModel(means, components, variance, total, n)


def project(model: PcaModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.dim:
        raise DataError(f"feature dimension {X.shape[1]} does not match the PCA model ({model.dim})")
    return (X - model.means) @ model.components.T


def reconstruct(model: PcaModel, scores) -> np.ndarray:
    return np.asarray(scores, dtype=float) @ model.components + model.means


def explained_fraction(model: PcaModel, total_variance: float | None = None) -> float:
    """Share of total variance captured by the model's components."""
    total = model.total_variance if total_variance is None else float(total_variance)
    if not total > 0:
        raise DataError("total variance must be positive")
    return float(min(1.0, max(0.0, model.explained_variance.sum() / total)))


# --------------------------------------------------------------------------- t-SNE


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    pca_dims: int = 50
    theta: float = 0.0
    initial_momentum: float = 0.5
    final_momentum: float = 0.8
    learning_rate: float = 200.0
    iterations: int = 1000
    seed: int = 0
    exaggeration: float = 12.0
    exaggeration_fraction: float = 0.1
    momentum_switch_fraction: float = 0.25

    def validate(self, n: int) -> None:
        if not self.perplexity > 0:
            raise ConfigError("perplexity must be positive")
        if self.perplexity >= (n - 1) / 3:
            raise ConfigError(f"perplexity {self.perplexity} too large for {n} points; needs < (n-1)/3")
        for m in (self.initial_momentum, self.final_momentum):
            if not 0.0 <= m < 1.0:
                raise ConfigError("momentum must lie in [0, 1)")
        if self.iterations < 1 or self.learning_rate <= 0:
            raise ConfigError("iterations and learning rate must be positive")


@dataclass(frozen=True)
class TsneResult:
    embedding: np.ndarray
    kl_initial: float
    kl_final: float
    kl_history: list[tuple[int, float]] = field(default_factory=list, repr=False)


def _squared_distances(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X**2, axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.maximum(dist, 0.0, out=dist)
    np.fill_diagonal(dist, 0.0)
    return dist


def conditional_probabilities(dist: np.ndarray, perplexity: float, tol: float = 1e-5,
                              max_iter: int = 200) -> np.ndarray:
    """Row-stochastic P(j|i) with each row's entropy matched to ``log(perplexity)``.

    Precisions are found by a vectorized bisection over all rows at once.
    """
    n = dist.shape[0]
    target = np.log(perplexity)
    beta = np.ones(n)
    lo = np.full(n, 0.0)
    hi = np.full(n, np.inf)
    off = ~np.eye(n, dtype=bool)
    # shift by the nearest neighbour distance for stability; P(j|i) is shift-invariant
    nearest = np.where(off, dist, np.inf).min(axis=1, keepdims=True)
    d = np.where(off, dist - nearest, 0.0)
    done = np.zeros(n, dtype=bool)
    for _ in range(max_iter):
        w = np.exp(-d * beta[:, None])
        w[~off] = 0.0
        total = w.sum(axis=1)
        p = w / total[:, None]
        entropy = np.log(total) + beta * np.sum(d * p, axis=1)
        gap = entropy - target
        done = np.abs(gap) < tol
        if done.all():
            break
        # entropy decreases with beta
        up = gap > 0
        lo = np.where(up & ~done, beta, lo)
        hi = np.where(~up & ~done, beta, hi)
        new = np.where(np.isinf(hi), beta * 2.0, (lo + hi) / 2.0)
        beta = np.where(done, beta, new)
    if not done.all():
        bad = int(np.flatnonzero(~done)[0])
        raise NumericalError(f"perplexity search did not converge for point {bad}")
    return p


def joint_probabilities(X: np.ndarray, perplexity: float) -> np.ndarray:
    cond = conditional_probabilities(_squared_distances(X), perplexity)
    P = (cond + cond.T) / (2.0 * X.shape[0])
    return np.maximum(P, 1e-300)


def _kl(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 1e-300
    np.fill_diagonal(mask, False)
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def _student_q(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + _squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def tsne(X, cfg: TsneConfig | None = None) -> TsneResult:
    """Exact-gradient t-SNE to two dimensions.

    The input is first reduced to ``cfg.pca_dims`` principal components when
    wider. Early exaggeration applies for the first ``exaggeration_fraction``
    of iterations and momentum switches after ``momentum_switch_fraction``.
    """
    cfg = cfg or TsneConfig()
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n > EXACT_TSNE_LIMIT:
        raise ConfigError(f"exact t-SNE is limited to {EXACT_TSNE_LIMIT} points, got {n}")
    cfg.validate(n)
    if X.shape[1] > cfg.pca_dims:
        pca = fit_pca(X, min(cfg.pca_dims, n - 1))
        X = project(pca, X)

    P = joint_probabilities(X, cfg.perplexity)
    rng = np.random.default_rng(cfg.seed)
    Y = rng.normal(scale=1e-4, size=(n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    stop_exaggeration = int(round(cfg.exaggeration_fraction * cfg.iterations))
    momentum_switch = int(round(cfg.momentum_switch_fraction * cfg.iterations))

    Q, _ = _student_q(Y)
    kl_initial = _kl(P, Q)
    history = [(0, kl_initial)]
    for it in range(cfg.iterations):
        scale = cfg.exaggeration if it < stop_exaggeration else 1.0
        Q, num = _student_q(Y)
        W = (scale * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        momentum = cfg.initial_momentum if it < momentum_switch else cfg.final_momentum
        update = momentum * update - cfg.learning_rate * gains * grad
        Y = Y + update
        Y -= Y.mean(axis=0)
        if (it + 1) % 50 == 0:
            history.append((it + 1, _kl(P, _student_q(Y)[0])))
    kl_final = _kl(P, _student_q(Y)[0])
    if not history or history[-1][0] != cfg.iterations:
        history.append((cfg.iterations, kl_final))
    log.debug("t-SNE KL %.4f -> %.4f", kl_initial, kl_final)
    return TsneResult(Y, kl_initial, kl_final, history)
