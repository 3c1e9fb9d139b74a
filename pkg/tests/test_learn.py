import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from retinacam.errors import (AllMissingFeature, DegenerateTarget, DegenerateVariance, InsufficientNeighbors,
                              MissingClass, SingularSystem)
from retinacam.learn import (CATEGORICAL, CONTINUOUS, FACTORS, BoostedCategoricalImputer, KNNContinuousImputer,
                             HGBModel, LogisticModel, MeanImputer, RidgeRegression, auroc, balanced_accuracy,
                             evaluate_with_ci, fit_hgb, fit_linear_ridge, fit_logistic, grid_search_hgb,
                             impute_cohort, kfold, knn_impute_continuous, linear_probe, mean_impute_features, r2,
                             stratified_split, validate_cohort)
from retinacam.learn.metrics import chance_level
from retinacam.stats import mann_whitney_u
from retinacam.synth import sample_factors


def cohort(n, seed=0, dependence=None):
    return sample_factors(n, np.random.default_rng(seed), dependence)


# --- splitting -----------------------------------------------------------------

def test_split_small_exact():
    t = pd.DataFrame({"subject_id": [f"s{i}" for i in range(10)], "smoking": ["never", "smoked"] * 5})
    lab = stratified_split(t, 0.8, seed=3, factors=("smoking",))
    counts = t[lab == "dev"]["smoking"].value_counts()
    assert counts.to_dict() == {"never": 4, "smoked": 4}


def test_split_subject_level_and_deterministic():
    subj = cohort(60)
    eyes = pd.concat([subj.assign(eye="left"), subj.assign(eye="right")], ignore_index=True)
    a = stratified_split(eyes, seed=1)
    assert a.equals(stratified_split(eyes, seed=1))
    per_subject = pd.DataFrame({"s": eyes["subject_id"], "l": a}).groupby("s")["l"].nunique()
    assert (per_subject == 1).all()
    assert (a == "dev").sum() == 2 * 48


def test_split_balances_marginals():
    t = cohort(1000, seed=4)
    lab = stratified_split(t, seed=0)
    dev, val = t[lab == "dev"], t[lab == "val"]
    for f in CATEGORICAL:
        d = dev[f].value_counts(normalize=True)
        v = val[f].value_counts(normalize=True)
        assert (d - v).abs().max() <= 0.02, f
    for f in CONTINUOUS:
        edges = np.quantile(t[f], [0.2, 0.4, 0.6, 0.8])
        d = np.bincount(np.searchsorted(edges, dev[f], side="right"), minlength=5) / len(dev)
        v = np.bincount(np.searchsorted(edges, val[f], side="right"), minlength=5) / len(val)
        assert np.abs(d - v).max() <= 0.02, f


def test_kfold():
    f = kfold(100, 10, seed=0)
    assert np.bincount(f).tolist() == [10] * 10
    assert np.array_equal(f, kfold(100, 10, seed=0))
    assert sorted(np.bincount(kfold(23, 10)).tolist()) == [2] * 7 + [3] * 3
    groups = np.repeat(np.arange(30), 2)
    f = kfold(groups, 10, seed=2)
    assert all(np.unique(f[groups == g]).size == 1 for g in range(30))
    with pytest.raises(ValueError):
        kfold(5, 10)


# --- imputation --------------------------------------------------------------------

def test_mean_impute():
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(mean_impute_features(X, X), X)
    dev = np.array([[2.0], [4.0], [np.nan]])
    assert mean_impute_features(dev, np.array([[np.nan], [7.0]])).ravel().tolist() == [3.0, 7.0]
    with pytest.raises(AllMissingFeature):
        mean_impute_features(np.array([[np.nan, 1.0]]), np.array([[1.0, 1.0]]))
    m = MeanImputer().fit(dev)
    assert m.transform([[np.nan]]).tolist() == [[3.0]]


def knn_table():
    # one row missing age; its five nearest rows (by bmi) have ages 1..5
    bmi = [20.0, 20.1, 20.2, 20.3, 20.4, 20.25, 40, 41, 42, 43]
    age = [1.0, 2.0, 3.0, 4.0, 5.0, np.nan, 90, 91, 92, 93]
    return pd.DataFrame({"subject_id": [f"s{i}" for i in range(10)], "age": age, "bmi": bmi})


def test_knn_examples():
    out = knn_impute_continuous(knn_table(), k=5)
    assert out.loc[5, "age"] == pytest.approx(3.0)
    assert out.drop(index=5).equals(knn_table().drop(index=5))
    with pytest.raises(InsufficientNeighbors):
        knn_impute_continuous(knn_table().iloc[3:8], k=5)


def test_knn_uses_only_dev_rows():
    t = cohort(80, seed=1, dependence=0.5)
    t.loc[::7, "bmi"] = np.nan
    dev = np.arange(80) < 60
    a = knn_impute_continuous(t, 5, dev)
    shuffled = t.copy()
    shuffled.loc[~dev, CONTINUOUS] = shuffled.loc[~dev, CONTINUOUS].to_numpy()[::-1]
    b = knn_impute_continuous(shuffled, 5, dev)
    assert np.array_equal(a.loc[dev, "bmi"], b.loc[dev, "bmi"])


@given(st.integers(0, 10 ** 6))
@settings(max_examples=15)
def test_knn_bounded_by_donors(seed):
    t = cohort(40, seed=seed)
    t.loc[[3, 9], "sbp"] = np.nan
    out = KNNContinuousImputer(5).fit(t).transform(t)
    donors = t["sbp"].dropna()
    assert out["sbp"].notna().all()
    assert donors.min() <= out.loc[3, "sbp"] <= donors.max()


def rule_cohort(n, seed):
    t = cohort(n, seed)
    t["smoking"] = np.where(t["sex"] == "M", "smoked", "never")
    return t


def test_boosted_recovers_rule():
    t = rule_cohort(300, 0)
    hidden = np.random.default_rng(0).random(300) < 0.2
    truth = t.loc[hidden, "smoking"].copy()
    t.loc[hidden, "smoking"] = None
    dev = ~hidden
    dev[:40] = False
    model = BoostedCategoricalImputer("smoking").fit(t[dev])
    out = model.transform(t)
    assert (out.loc[hidden, "smoking"] == truth).mean() >= 0.95
    assert out.loc[~hidden, "smoking"].equals(t.loc[~hidden, "smoking"])


def test_boosted_errors_and_identity():
    t = rule_cohort(60, 1)
    assert BoostedCategoricalImputer("smoking").fit(t).transform(t).equals(t)
    t["smoking"] = "never"
    with pytest.raises(DegenerateTarget):
        BoostedCategoricalImputer("smoking").fit(t)
    with pytest.raises(ValueError):
        BoostedCategoricalImputer("age").fit(t)


def test_impute_cohort_flags_validation():
    t = cohort(120, seed=2, dependence=0.4)
    t["split"] = stratified_split(t, seed=0).to_numpy()
    t.loc[[1, 5, 17, 40, 77], "age"] = np.nan
    t.loc[[2, 8, 30], "alcohol"] = None
    t = validate_cohort(t.assign(eye="left"))
    out = impute_cohort(t)
    dev = t["split"] == "dev"
    assert out.loc[dev, list(FACTORS)].notna().all().all()
    val_missing = t.loc[~dev, list(FACTORS)].isna()
    assert out.loc[~dev, list(FACTORS)].isna().equals(val_missing)
    for i in t.index[~dev]:
        expected = ";".join(f for f in FACTORS if pd.isna(t.loc[i, f]))
        assert out.loc[i, "val_missing"] == expected
    complete = cohort(50, seed=3).assign(eye="left")
    complete["split"] = stratified_split(complete, seed=0).to_numpy()
    same = impute_cohort(complete)
    assert same[list(FACTORS)].equals(complete[list(FACTORS)])
    assert (same["val_missing"] == "").all()


# --- models ----------------------------------------------------------------------

def test_ridge_examples():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 4))
    w = np.array([1.0, -2.0, 0.5, 3.0])
    b0, coef = fit_linear_ridge(X, X @ w + 7.0)
    assert np.allclose(coef, w, atol=1e-8) and b0 == pytest.approx(7.0)
    y = rng.normal(size=30)
    b0, coef = fit_linear_ridge(X, y, lam=1e12)
    assert np.allclose(coef, 0, atol=1e-9) and b0 == pytest.approx(y.mean())
    x = X[:, 0]
    slope = np.sum((x - x.mean()) * (y - y.mean())) / np.sum((x - x.mean()) ** 2)
    b0, coef = fit_linear_ridge(x[:, None], y)
    assert coef[0] == pytest.approx(slope) and b0 == pytest.approx(y.mean() - slope * x.mean())
    with pytest.raises(SingularSystem):
        fit_linear_ridge(np.column_stack([x, 2 * x]), y)
    model = RidgeRegression().fit(X, X @ w)
    assert model.predict(X[:2]) == pytest.approx(X[:2] @ w)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=25)
def test_ridge_residuals_orthogonal(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 3))
    y = rng.normal(size=25)
    b0, coef = fit_linear_ridge(X, y)
    resid = y - X @ coef - b0
    assert np.abs(X.T @ resid).max() < 1e-8
    assert abs(resid.sum()) < 1e-8


def test_logistic():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(80, 2))
    y = np.where(X[:, 0] + X[:, 1] > 0, "a", "b")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = fit_logistic(X, y)
    assert balanced_accuracy(model.predict(X), y) == 1.0
    with pytest.raises(DegenerateTarget):
        fit_logistic(X, np.zeros(80))
    three = np.digitize(X[:, 0], [-0.5, 0.5])
    m3 = LogisticModel().fit(X, three)
    assert m3.predict_proba(X).shape == (80, 3)
    assert np.allclose(m3.predict_proba(X).sum(1), 1.0)


def test_logistic_null_auroc():
    values = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X, y = rng.normal(size=(200, 3)), rng.integers(0, 2, 200)
        Xt, yt = rng.normal(size=(200, 3)), rng.integers(0, 2, 200)
        values.append(auroc(LogisticModel().fit(X, y).predict_proba(Xt)[:, 1], yt))
    assert abs(np.mean(values) - 0.5) <= 0.05


def test_hgb_examples():
    x = np.linspace(0, 1, 200)[:, None]
    y = (x[:, 0] > 0.37).astype(float)
    step = fit_hgb(x, y, "regression", max_depth=1, learning_rate=1.0, n_trees=1, min_samples_leaf=1)
    # sklearn accumulates gradients in float32
    assert np.allclose(step.predict(x), y, atol=1e-6)
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (600, 2))
    lab = (X[:, 0] * X[:, 1] > 0).astype(int)
    Xt = rng.uniform(-1, 1, (600, 2))
    lt = (Xt[:, 0] * Xt[:, 1] > 0).astype(int)
    assert np.mean(fit_hgb(X, lab).predict(Xt) == lt) > 0.9
    assert np.mean(fit_logistic(X, lab).predict(Xt) == lt) <= 0.6
    const = fit_hgb(X, np.full(600, 2.5), "regression")
    assert np.all(const.predict(Xt) == 2.5)
    with pytest.raises(DegenerateTarget):
        fit_hgb(X, np.zeros(600, int))
    with pytest.raises(ValueError):
        fit_hgb(X, lab, max_depth=0)


def test_hgb_loss_non_increasing():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(300, 4))
    for task, y in (("classification", np.digitize(X[:, 0] + 0.5 * rng.normal(size=300), [-0.5, 0.5])),
                    ("regression", X[:, 1] ** 2 + rng.normal(size=300))):
        loss = HGBModel(task, n_trees=50).fit(X, y).train_loss_
        assert len(loss) == 50 and np.all(np.diff(loss) <= 1e-12)


def test_grid_search_returns_grid_member():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 2))
    y = (X[:, 0] > 0).astype(int)
    grid = {"max_depth": (1, 3), "learning_rate": (0.1,), "n_trees": (10,)}
    params, model = grid_search_hgb(X, y, np.arange(100), grid=grid)
    assert params["max_depth"] in (1, 3) and hasattr(model, "model_")


# --- metrics ----------------------------------------------------------------------

def test_metric_examples():
    truth = np.array([0] * 5 + [1] * 5)
    assert balanced_accuracy(truth, truth) == 1.0
    pred = np.array([0, 0, 0, 0, 1, 0, 0, 1, 1, 1])
    assert balanced_accuracy(pred, truth) == pytest.approx(0.7)
    for c in (2, 3):
        t = np.arange(30) % c
        assert balanced_accuracy(np.zeros(30, int), t) == 1.0 / c
        assert chance_level("balanced_accuracy", c) == 1.0 / c
    with pytest.raises(MissingClass):
        balanced_accuracy([0, 0], [0, 0], labels=[0, 1])
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(MissingClass):
        auroc([0.1, 0.2], [1, 1])
    y = np.array([1.0, 2.0, 4.0])
    assert r2(y, y) == 1.0 and r2(np.full(3, y.mean()), y) == 0.0
    assert r2(y[::-1], y) < 0
    with pytest.raises(DegenerateVariance):
        r2([1, 2], [3, 3])


@given(st.integers(0, 10 ** 6))
@settings(max_examples=40)
def test_auroc_equals_u(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 40))
    truth = rng.integers(0, 2, n)
    truth[:2] = [0, 1]
    scores = np.round(rng.normal(size=n), 1)
    u = mann_whitney_u(scores[truth == 1], scores[truth == 0], "normal").statistic
    assert auroc(scores, truth) == pytest.approx(u / (truth.sum() * (n - truth.sum())), abs=1e-9)


def test_multiclass_auroc_macro():
    truth = np.array([0, 1, 2, 0, 1, 2])
    scores = np.eye(3)[truth] * 0.8 + 0.1
    assert auroc(scores, truth) == 1.0
    scores[0] = [0.1, 0.8, 0.1]
    expected = np.mean([auroc(scores[:, k], truth == k) for k in range(3)])
    assert auroc(scores, truth) == pytest.approx(expected)


def test_evaluate_with_ci():
    truth = np.array([0, 1] * 20)
    rep = evaluate_with_ci(truth, truth, "balanced_accuracy", n_resamples=200)
    assert (rep.value, rep.ci_lo, rep.ci_hi, rep.chance) == (1.0, 1.0, 1.0, 0.5)
    rng = np.random.default_rng(0)
    scores = truth + rng.normal(size=40)
    a = evaluate_with_ci(scores, truth, "auroc", n_resamples=200, seed=5)
    assert a == evaluate_with_ci(scores, truth, "auroc", n_resamples=200, seed=5)
    assert a.ci_lo <= a.value <= a.ci_hi


def test_ci_width_shrinks_with_n():
    rng = np.random.default_rng(0)

    def width(n):
        truth = rng.normal(size=n)
        pred = truth + rng.normal(size=n)
        rep = evaluate_with_ci(pred, truth, "r2", n_resamples=400, seed=1)
        return rep.ci_hi - rep.ci_lo

    ratio = np.mean([width(100) for _ in range(5)]) / np.mean([width(400) for _ in range(5)])
    assert 1.5 < ratio < 2.7


# --- probing -------------------------------------------------------------------------

def planted(n, p, r2_star, seed):
    rng = np.random.default_rng(seed)
    E = rng.normal(size=(n, p))
    w = rng.normal(size=p)
    signal = E @ w
    signal /= signal.std()
    noise = rng.normal(size=n) * np.sqrt((1 - r2_star) / r2_star)
    return E, signal + noise


def test_probe_recovers_planted_fraction():
    E, y = planted(600, 20, 0.6, seed=0)
    res = linear_probe(E, y[:, None], k=10, seed=0)
    assert res.loc[0, "r2_mean"] == pytest.approx(0.6, abs=0.05)
    assert res.loc[0, "n_folds"] == 10
    assert res.loc[0, "ci_lo"] <= res.loc[0, "r2_mean"] <= res.loc[0, "ci_hi"]


def test_probe_limits():
    rng = np.random.default_rng(1)
    E = rng.normal(size=(200, 30))
    exact = linear_probe(E, E[:, 3] + 1e-6 * rng.normal(size=200))
    assert exact.loc[0, "r2_mean"] > 0.999
    null = linear_probe(E, pd.DataFrame({"y": rng.normal(size=200)}))
    assert null.loc[0, "target"] == "y" and null.loc[0, "r2_mean"] <= 0.05


def test_probe_missing_targets_and_groups():
    E, y = planted(300, 10, 0.5, seed=2)
    Y = np.column_stack([y, y])
    Y[::4, 1] = np.nan
    groups = np.repeat(np.arange(150), 2)
    res = linear_probe(E, Y, groups=groups, k=5)
    assert res["n_folds"].tolist() == [5, 5]
    assert res.loc[1, "r2_mean"] == pytest.approx(0.5, abs=0.1)


def test_hgb_accepts_64bit_seed():
    from retinacam.learn.models import HGBModel
    X = np.arange(40, dtype=float)[:, None]
    y = (X[:, 0] > 19).astype(int)
    m = HGBModel(n_trees=5, min_samples_leaf=2, random_state=2 ** 63 + 5).fit(X, y)
    assert m.score(X, y) == 1.0
