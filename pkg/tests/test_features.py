import numpy as np
import pytest
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist

from confound_audit.errors import ConfigError, DataError
from confound_audit.features import (
    TsneConfig,
    conditional_probabilities,
    explained_fraction,
    fit_pca,
    joint_probabilities,
    project,
    reconstruct,
    tsne,
    _squared_distances,
)


def planted_spectrum(n=4000, seed=0, spectrum=(4.0, 3.0, 2.0, 1.0)):
    """Data whose sample covariance has exactly the given eigenvalues."""
    rng = np.random.default_rng(seed)
    d = len(spectrum)
    Z = rng.normal(size=(n, d))
    Z -= Z.mean(axis=0)
    # whiten the sample exactly, then scale
    L = np.linalg.cholesky(np.cov(Z, rowvar=False))
    Z = Z @ np.linalg.inv(L).T
    Qm, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return Z @ np.diag(np.sqrt(spectrum)) @ Qm.T


def test_rank_one_line():
    x = np.linspace(-3, 3, 25)
    model = fit_pca(np.column_stack([x, 2 * x]), k=1)
    assert explained_fraction(model) == pytest.approx(1.0, abs=1e-12)
    assert model.components[0] == pytest.approx(np.array([1, 2]) / np.sqrt(5))


def test_rank_deficient_returns_fewer_components():
    x = np.linspace(0, 1, 10)
    with pytest.warns(RuntimeWarning):
        model = fit_pca(np.column_stack([x, 2 * x, -x]), k=3)
    assert model.k == 1


def test_isotropic_gaussian_matches_covariance_eigendecomposition():
    X = np.random.default_rng(1).normal(size=(10000, 3))
    model = fit_pca(X, k=3)
    brute = np.sort(np.linalg.eigvalsh(np.cov(X, rowvar=False)))[::-1]
    np.testing.assert_allclose(model.explained_variance, brute, atol=1e-10)
    assert model.explained_variance.max() / model.explained_variance.min() < 1.05


def test_random_matrices_match_brute_force_to_1e8():
    rng = np.random.default_rng(2)
    for _ in range(10):
        X = rng.normal(size=(50, 20)) * rng.uniform(0.5, 3, 20)
        model = fit_pca(X, k=20)
        brute = np.sort(np.linalg.eigvalsh(np.cov(X, rowvar=False)))[::-1]
        np.testing.assert_allclose(model.explained_variance, brute, atol=1e-8)


def test_full_rank_conserves_variance():
    X = np.random.default_rng(3).normal(size=(40, 6))
    model = fit_pca(X, k=6)
    assert model.explained_variance.sum() == pytest.approx(np.var(X, axis=0, ddof=1).sum(), abs=1e-8)
    assert explained_fraction(model) == pytest.approx(1.0, abs=1e-12)


def test_planted_spectrum_fraction():
    X = planted_spectrum()
    model = fit_pca(X, k=2)
    np.testing.assert_allclose(model.explained_variance, [4.0, 3.0], atol=1e-9)
    assert explained_fraction(model) == pytest.approx(0.7, abs=1e-6)
    assert explained_fraction(model, total_variance=10.0) == pytest.approx(0.7, abs=1e-6)


def test_components_orthonormal_and_scores_uncorrelated():
    X = np.random.default_rng(4).normal(size=(300, 12)) @ np.random.default_rng(5).normal(size=(12, 12))
    model = fit_pca(X, k=6)
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(6), atol=1e-8)
    assert np.all(np.diff(model.explained_variance) <= 0)
    scores = project(model, X)
    cov = np.cov(scores, rowvar=False)
    np.testing.assert_allclose(np.diag(cov), model.explained_variance, rtol=1e-6)
    off = cov - np.diag(np.diag(cov))
    assert np.abs(off).max() < 1e-6 * model.explained_variance[0]


def test_sign_convention():
    X = np.random.default_rng(6).normal(size=(100, 5))
    model = fit_pca(X, k=3)
    for row in model.components:
        assert row[np.argmax(np.abs(row))] > 0
    flipped = fit_pca(-X, k=3)
    np.testing.assert_allclose(flipped.components, model.components, atol=1e-10)


def test_project_and_reconstruct():
    X = np.random.default_rng(7).normal(size=(30, 4))
    model = fit_pca(X, k=4)
    np.testing.assert_allclose(project(model, model.means), np.zeros((1, 4)), atol=1e-12)
    np.testing.assert_allclose(reconstruct(model, project(model, X)), X, atol=1e-6)
    with pytest.raises(DataError):
        project(model, np.zeros((2, 3)))


def test_pca_serialization_round_trip():
    model = fit_pca(np.random.default_rng(8).normal(size=(20, 5)), k=2)
    from confound_audit.features import PcaModel

    back = PcaModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(back.components, model.components)


# ---------------------------------------------------------------- t-SNE


def two_clusters(n=200, d=10, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    X = rng.normal(size=(n, d))
    X[labels == 1] += 6.0
    return X, labels


def test_conditional_rows_sum_to_one_and_match_perplexity():
    X, _ = two_clusters(100)
    dist = _squared_distances(X)
    cond = conditional_probabilities(dist, 20.0)
    np.testing.assert_allclose(cond.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.diag(cond) == 0)
    p = np.where(cond > 0, cond, 1.0)
    entropy = -np.sum(cond * np.log(p), axis=1)
    np.testing.assert_allclose(np.exp(entropy), 20.0, rtol=1e-4)


def test_joint_probabilities_are_symmetric_distribution():
    X, _ = two_clusters(80)
    P = joint_probabilities(X, 10.0)
    np.testing.assert_allclose(P, P.T, atol=1e-15)
    assert np.all(P >= 0)
    assert P.sum() == pytest.approx(1.0, abs=1e-9)


def test_tsne_recovers_clusters_and_reduces_kl():
    X, labels = two_clusters()
    res = tsne(X, TsneConfig(perplexity=30, iterations=500, seed=3))
    assert res.kl_final < res.kl_initial
    found = fcluster(linkage(res.embedding, "average"), 2, "maxclust") - 1
    agreement = max(np.mean(found == labels), np.mean(found != labels))
    assert agreement >= 0.95


def test_tsne_duplicates_land_together():
    X, _ = two_clusters(120, seed=1)
    X = np.vstack([X, X[:1]])
    Y = tsne(X, TsneConfig(perplexity=15, iterations=400, seed=2)).embedding
    dup = np.linalg.norm(Y[0] - Y[-1])
    assert dup < np.percentile(pdist(Y), 5)


def test_tsne_deterministic():
    X, _ = two_clusters(60)
    cfg = TsneConfig(perplexity=10, iterations=150, seed=11)
    np.testing.assert_array_equal(tsne(X, cfg).embedding, tsne(X, cfg).embedding)


def test_tsne_config_validation():
    X, _ = two_clusters(30)
    with pytest.raises(ConfigError):
        tsne(X, TsneConfig(perplexity=30))
    with pytest.raises(ConfigError):
        tsne(X, TsneConfig(perplexity=5, final_momentum=1.0))
