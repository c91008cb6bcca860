import numpy as np
import pytest
from scipy.special import expit

from confound_audit.dataset import impute
from confound_audit.errors import DataError
from confound_audit.models import (
    DesignEncoder,
    KernelNaiveBayes,
    LogisticModel,
    PredictorSet,
    ensemble_naive_bayes,
    fit_kernel_nb,
    fit_linear,
    fit_logistic,
    fit_logistic_cv,
    kde_log_density,
    logistic_gradient,
    logistic_objective,
    nb_log_joint,
    nb_posterior,
    out_of_fold_scores,
    predict_linear,
    predict_proba,
    predictability_screen,
    regression_screen,
    silverman_bandwidth,
)
from confound_audit.stats import roc_auc
from helpers import make_ds
from oracles import least_squares_by_normal_equations


# ---------------------------------------------------------------- logistic


def test_symmetric_data_gives_zero_intercept():
    X = np.tile([[-1.0], [1.0]], (10, 1))
    y = np.tile([0, 1], 10)
    model = fit_logistic(X, y, ridge_lambda=0.1)
    assert abs(model.intercept) < 1e-8
    assert model.coefficients[0] > 0


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 4))
    y = (rng.random(200) < 0.4).astype(float)
    coef, b, lam = rng.normal(size=4), 0.3, 0.05
    g_coef, g_b = logistic_gradient(coef, b, X, y, lam)
    analytic = np.r_[g_b, g_coef]
    h = 1e-5
    numeric = []
    point = np.r_[b, coef]
    for j in range(5):
        up, down = point.copy(), point.copy()
        up[j] += h
        down[j] -= h
        numeric.append((logistic_objective(up[1:], up[0], X, y, lam)
                        - logistic_objective(down[1:], down[0], X, y, lam)) / (2 * h))
    numeric = np.array(numeric)
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-6


def test_generative_recovery():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50000, 2))
    y = (rng.random(50000) < expit(0.5 + 2 * X[:, 0] - X[:, 1])).astype(float)
    model = fit_logistic(X, y, ridge_lambda=1e-6)
    assert model.coefficients == pytest.approx([2.0, -1.0], abs=0.05)
    assert model.intercept == pytest.approx(0.5, abs=0.05)
    assert model.gradient_norm < 1e-8


def test_objective_decreases_under_step_halving():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, 3))
    y = (X[:, 0] + 0.3 * rng.normal(size=300) > 0).astype(float)
    # walk the same Newton iterations by capping max_iter
    objectives = []
    for it in range(1, 8):
        try:
            m = fit_logistic(X, y, 1e-4, max_iter=it)
        except Exception:
            continue
        objectives.append(logistic_objective(m.coefficients, m.intercept, X, y, 1e-4))
    full = fit_logistic(X, y, 1e-4)
    start = logistic_objective(np.zeros(3), np.log(y.mean() / (1 - y.mean())), X, y, 1e-4)
    assert logistic_objective(full.coefficients, full.intercept, X, y, 1e-4) < start


def test_single_class_rejected():
    with pytest.raises(DataError):
        fit_logistic(np.ones((5, 1)), np.ones(5))


def test_predict_proba_behaviour():
    zero = LogisticModel(np.zeros(2), 0.0, 0.0)
    assert np.all(predict_proba(zero, np.random.default_rng(3).normal(size=(5, 2))) == 0.5)
    saturated = LogisticModel(np.zeros(1), 50.0, 0.0)
    p = predict_proba(saturated, [[0.0]])
    assert p[0] > 1 - 1e-9 and p[0] < 1.0
    pos = LogisticModel(np.array([1.5, -0.5]), 0.2, 0.0)
    assert predict_proba(pos, [[1.0, 0.0]])[0] > predict_proba(pos, [[0.0, 0.0]])[0]
    with pytest.raises(DataError):
        predict_proba(pos, [[1.0, 2.0, 3.0]])


def test_constant_column_with_zero_coefficient_is_inert():
    X = np.random.default_rng(4).normal(size=(10, 2))
    model = LogisticModel(np.array([0.7, -1.2]), 0.1, 0.0)
    wider = LogisticModel(np.array([0.7, -1.2, 0.0]), 0.1, 0.0)
    np.testing.assert_array_equal(predict_proba(model, X), predict_proba(wider, np.column_stack([X, np.ones(10)])))


def test_cv_selects_from_grid_and_serializes():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(400, 3))
    y = (rng.random(400) < expit(X[:, 0])).astype(float)
    model = fit_logistic_cv(X, y, seed=3)
    assert model.ridge_lambda in (1e-6, 1e-4, 1e-2, 1.0)
    assert set(model.cv_auc) <= {1e-6, 1e-4, 1e-2, 1.0}
    back = LogisticModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(predict_proba(back, X), predict_proba(model, X))


def test_out_of_fold_scores_are_honest():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(300, 20))
    y = (rng.random(300) < 0.5).astype(float)
    oof = out_of_fold_scores(X, y, seed=1)
    assert oof.shape == (300,)
    # pure noise: in-sample fits look good, out-of-fold ones should not
    assert roc_auc(oof, y).auc < 0.62


# ---------------------------------------------------------------- linear


def test_exact_linear_fit():
    x = np.arange(10, dtype=float)[:, None]
    model = fit_linear(x, 3 * x[:, 0] + 1)
    assert model.coefficients[0] == pytest.approx(3.0, abs=1e-12)
    assert model.intercept == pytest.approx(1.0, abs=1e-12)
    assert model.r_squared == pytest.approx(1.0, abs=1e-12)


def test_linear_null_model():
    rng = np.random.default_rng(7)
    model = fit_linear(rng.normal(size=(10000, 3)), rng.normal(size=10000))
    assert model.r_squared < 0.01


def test_linear_matches_hand_solved_normal_equations():
    X = np.array([[1.0, 2.0], [2.0, 1.0], [3.0, 5.0], [4.0, 3.0]])
    y = np.array([3.0, 4.0, 9.0, 8.5])
    beta = least_squares_by_normal_equations(X[:, :1], y)
    model = fit_linear(X[:, :1], y)
    assert model.intercept == pytest.approx(beta[0], abs=1e-10)
    assert model.coefficients[0] == pytest.approx(beta[1], abs=1e-10)
    np.testing.assert_allclose(predict_linear(model, X[:, :1]), beta[0] + beta[1] * X[:, 0], atol=1e-10)


def test_linear_rank_deficient_warns():
    x = np.arange(6, dtype=float)
    with pytest.warns(UserWarning):
        model = fit_linear(np.column_stack([x, 2 * x]), x + 1)
    assert model.ridge_lambda == 1e-8
    with pytest.raises(DataError):
        fit_linear(np.ones((2, 3)), np.ones(2))


# ---------------------------------------------------------------- kernel Naive Bayes


def test_nb_symmetric_densities_give_half():
    # class 1 is the mirror image of class 0, so their KDEs agree at 0
    base = np.array([0.3, 1.1, 2.0, 2.4, -0.7])
    x = np.r_[base, -base]
    y = np.r_[np.ones(5), np.zeros(5)]
    model = fit_kernel_nb(x[:, None], y)
    assert model.class_priors.tolist() == [0.5, 0.5]
    assert nb_posterior(model, np.array([[0.0]]))[0] == pytest.approx(0.5, abs=1e-12)


def test_nb_single_feature_equals_direct_bayes_rule():
    rng = np.random.default_rng(8)
    x = np.r_[rng.normal(1, 1, 60), rng.normal(-1, 1.5, 90)]
    y = np.r_[np.ones(60), np.zeros(90)]
    model = fit_kernel_nb(x[:, None], y)
    q = np.linspace(-4, 4, 17)

    def kde(points, sample, h):
        z = (points[:, None] - sample[None, :]) / h
        return np.exp(-0.5 * z**2).sum(axis=1) / (len(sample) * h * np.sqrt(2 * np.pi))

    f1 = kde(q, x[y == 1], silverman_bandwidth(x[y == 1]))
    f0 = kde(q, x[y == 0], silverman_bandwidth(x[y == 0]))
    direct = 0.4 * f1 / (0.4 * f1 + 0.6 * f0)
    np.testing.assert_allclose(nb_posterior(model, q[:, None]), direct, atol=1e-12)


def test_nb_posteriors_sum_to_one():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(100, 3))
    y = (X[:, 0] > 0).astype(float)
    model = fit_kernel_nb(X, y)
    joint = nb_log_joint(model, X)
    p1 = nb_posterior(model, X)
    p0 = np.exp(joint[:, 0] - np.logaddexp(joint[:, 0], joint[:, 1]))
    np.testing.assert_allclose(p0 + p1, 1.0, atol=1e-12)


def test_nb_duplicated_feature_is_more_extreme():
    rng = np.random.default_rng(10)
    x = np.r_[rng.normal(1, 1, 100), rng.normal(0, 1, 100)]
    y = np.r_[np.ones(100), np.zeros(100)]
    single = nb_posterior(fit_kernel_nb(x[:, None], y), x[:, None])
    double = nb_posterior(fit_kernel_nb(np.column_stack([x, x]), y), np.column_stack([x, x]))
    away = np.abs(single - 0.5) > 1e-9
    assert np.all(np.abs(double[away] - 0.5) > np.abs(single[away] - 0.5))


def test_nb_vanishing_density_returns_prior():
    x = np.r_[np.zeros(10), np.ones(10)] + np.linspace(0, 1e-3, 20)
    y = np.r_[np.ones(6), np.zeros(14)]
    model = fit_kernel_nb(x[:, None], y)
    # log-space densities only vanish for an infinitely distant query
    assert nb_posterior(model, np.array([[np.inf]]))[0] == pytest.approx(0.3)
    assert 0.0 <= nb_posterior(model, np.array([[1e6]]))[0] <= 1.0


def test_nb_serialization_round_trip():
    rng = np.random.default_rng(11)
    X, y = rng.normal(size=(40, 2)), np.r_[np.ones(20), np.zeros(20)]
    model = fit_kernel_nb(X, y)
    back = KernelNaiveBayes.from_dict(model.to_dict())
    np.testing.assert_array_equal(nb_posterior(back, X), nb_posterior(model, X))


def test_kde_log_density_normalizes():
    sample = np.random.default_rng(12).normal(size=50)
    grid = np.linspace(-8, 8, 4001)
    dens = np.exp(kde_log_density(grid, sample, 0.4))
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------- ensemble


def _simulated_scores(n, rng, shift_img, shift_cov):
    y = (rng.random(n) < 0.3).astype(float)
    img = expit(rng.normal(size=n) + shift_img * y - 1)
    cov = expit(rng.normal(size=n) + shift_cov * y - 1)
    return y, img, cov


def test_ensemble_with_uninformative_covariate_tracks_image():
    rng = np.random.default_rng(13)
    y, img, _ = _simulated_scores(6000, rng, 1.5, 0.0)
    half = 3000
    cov = np.full(6000, 0.5)
    ens = ensemble_naive_bayes(img[:half], img[half:], cov[:half], cov[half:], y[:half])
    assert abs(roc_auc(ens, y[half:]).auc - roc_auc(img[half:], y[half:]).auc) < 0.02


def test_ensemble_of_duplicated_input_preserves_ordering():
    rng = np.random.default_rng(14)
    y, img, _ = _simulated_scores(2000, rng, 1.2, 0.0)
    half = 1000
    ens = ensemble_naive_bayes(img[:half], img[half:], img[:half], img[half:], y[:half])
    single = nb_posterior(fit_kernel_nb(img[:half, None], y[:half]), img[half:, None])
    assert roc_auc(ens, y[half:]).auc == roc_auc(single, y[half:]).auc


def test_ensemble_of_independent_evidence_beats_each_source():
    rng = np.random.default_rng(15)
    y, img, cov = _simulated_scores(40000, rng, 1.0, 1.0)
    half = 20000
    ens = ensemble_naive_bayes(img[:half], img[half:], cov[:half], cov[half:], y[:half])
    best_single = max(roc_auc(img[half:], y[half:]).auc, roc_auc(cov[half:], y[half:]).auc)
    assert roc_auc(ens, y[half:]).auc >= best_single


def test_ensemble_rejects_non_probabilities():
    with pytest.raises(DataError):
        ensemble_naive_bayes([0.0, 0.5], [0.5], [0.5, 0.5], [0.5], [0, 1])


# ---------------------------------------------------------------- design encoder


def test_design_encoder_handles_missing_indicator():
    ds = make_ds({"age": [30.0, 50.0, np.nan, 70.0], "fall": [1.0, np.nan, 0.0, 1.0],
                  "site": ["a", "b", "a", np.nan]},
                 kinds={"fall": "binary", "site": "categorical"}, groups={"site": "HP"},
                 features=np.random.default_rng(0).normal(size=(4, 3)))
    filled = impute(ds)
    enc = DesignEncoder(PredictorSet(("PT", "HP"))).fit(filled)
    X = enc.transform(filled)
    assert "fall=(Missing)" in enc.columns and "site=(Missing)" in enc.columns
    assert X.shape == (4, len(enc.columns))
    with pytest.raises(DataError):
        DesignEncoder(PredictorSet(("PT",))).fit(ds)


def test_predictor_set_labels():
    assert PredictorSet.parse("img,pt,hp").label == "imgPtHp"
    assert PredictorSet.parse("pt+hp").label == "ptHp"
    assert PredictorSet(("IMG",)).label == "img"


# ---------------------------------------------------------------- screens


def _screen_dataset(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(n, 30))
    scanner = (rng.random(n) < 0.5).astype(float)
    F[:, 5] += 8.0 * scanner
    pc1_like = F[:, 5]
    return F, scanner, pc1_like, rng


def test_predictability_screen_signatures():
    F, scanner, _, rng = _screen_dataset()
    n = len(F)
    from confound_audit.features import fit_pca, project

    pc1 = project(fit_pca(F, 1), F)[:, 0]
    cols = {
        "scanner": scanner,
        "pc_sign": (pc1 > 0).astype(float),
        "coin": (rng.random(n) < 0.5).astype(float),
    }
    ds = make_ds(cols, kinds={k: "binary" for k in cols}, features=F,
                 patients=[f"p{i // 2}" for i in range(n)])
    table = predictability_screen(ds, list(cols), n_boot=300, seed=1).set_index("target")
    assert table.loc["scanner", "auc"] > 0.99
    assert table.loc["pc_sign", "auc"] > 0.99
    assert table.loc["coin", "ci_low"] <= 0.5 <= table.loc["coin", "ci_high"]
    assert (table["status"] == "ok").all()


def test_predictability_screen_flags_single_class():
    F, _, _, _ = _screen_dataset(200)
    const = np.zeros(200)
    const[:3] = 1
    ds = make_ds({"rare": const}, kinds={"rare": "binary"}, features=F)
    from confound_audit.dataset import Partition

    part = Partition(np.arange(100), np.arange(100, 200), 0, 0.5)
    row = predictability_screen(ds, ["rare"], part, n_boot=50).iloc[0]
    assert row["status"] == "single class in test"
    assert np.isnan(row["auc"])


def test_regression_screen_signatures():
    rng = np.random.default_rng(3)
    n = 10000
    F = rng.normal(size=(n, 12)) * np.linspace(3, 1, 12)
    from confound_audit.features import fit_pca, project

    pc1 = project(fit_pca(F, 1), F)[:, 0]
    planted = F[:, 0] / 3.0 + rng.normal(size=n)  # population R^2 = 1 / (1 + 1)
    cols = {"pc1": pc1, "noise": rng.normal(size=n), "planted": planted}
    ds = make_ds(cols, features=F, patients=[f"p{i // 3}" for i in range(n)])
    table = regression_screen(ds, list(cols), seed=2).set_index("target")
    assert table.loc["pc1", "r2"] > 0.99
    assert table.loc["noise", "r2"] < 0.01
    assert 0.45 <= table.loc["planted", "r2"] <= 0.55
