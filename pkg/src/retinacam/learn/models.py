"""Baseline models: ridge regression, weighted multinomial logistic regression
and histogram gradient boosting.

All estimators follow the scikit-learn protocol (``fit``/``predict``,
``get_params``) so they can be cloned and cross-validated.
"""
from __future__ import annotations

import itertools
import warnings

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.ensemble import HistGradientBoostingClassifier, HistGradientBoostingRegressor
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..errors import DegenerateTarget, NonConvergenceWarning, SingularSystem
from .metrics import balanced_accuracy, r2
from .split import kfold


def fit_linear_ridge(X, y, lam=0.0):
    """Minimize ``||Xw + b - y||^2 + lam ||w||^2`` with an unpenalized intercept.

    ``y`` may be 2-D for several targets sharing one factorization.
    Returns ``(intercept, coef)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("X and y must be finite")
    xm, ym = X.mean(0), y.mean(0)
    Xc, yc = X - xm, y - ym
    n, p = Xc.shape
    try:
        if n < p and lam > 0:
            # dual form is cheaper when features outnumber rows
            factor = linalg.cho_factor(Xc @ Xc.T + lam * np.eye(n), lower=True)
            coef = Xc.T @ linalg.cho_solve(factor, yc)
        else:
            gram = Xc.T @ Xc + lam * np.eye(p)
            factor = linalg.cho_factor(gram, lower=True)
            if lam == 0 and np.min(np.abs(np.diag(factor[0]))) ** 2 <= 1e-10 * max(np.max(np.diag(gram)), 1e-300):
                raise SingularSystem("design matrix is rank deficient")
            coef = linalg.cho_solve(factor, Xc.T @ yc)
    except linalg.LinAlgError as exc:
        raise SingularSystem(f"normal equations are not positive definite: {exc}") from exc
    return ym - xm @ coef, coef


class RidgeRegression(RegressorMixin, BaseEstimator):
    def __init__(self, alpha=0.0):
        self.alpha = alpha

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.intercept_, self.coef_ = fit_linear_ridge(X, y, self.alpha)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X) @ self.coef_ + self.intercept_


def class_weights(y):
    """Inverse-frequency weights normalized so that the weights average to one."""
    classes, counts = np.unique(y, return_counts=True)
    w = len(y) / (len(classes) * counts)
    return dict(zip(classes, w))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class LogisticModel(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression fit by damped Newton steps.

    The first class is the reference, so the model has ``K - 1`` coefficient
    vectors.  Features are standardized internally; a tiny L2 penalty on the
    slopes keeps separable problems bounded.
    """

    def __init__(self, l2=1e-6, class_weight="balanced", max_iter=100, tol=1e-6):
        self.l2 = l2
        self.class_weight = class_weight
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=False)
        self.classes_ = np.unique(y)
        K = self.classes_.size
        if K < 2:
            raise DegenerateTarget("logistic regression needs at least two classes")
        self.n_features_in_ = X.shape[1]
        self._mu = X.mean(0)
        sd = X.std(0)
        self._sd = np.where(sd > 0, sd, 1.0)
        Z = np.column_stack([np.ones(len(X)), (X - self._mu) / self._sd])
        n, d = Z.shape
        Y = (y[:, None] == self.classes_[None, 1:]).astype(float)
        if self.class_weight == "balanced":
            cw = class_weights(y)
            sw = np.array([cw[v] for v in y])
        elif self.class_weight is None:
            sw = np.ones(n)
        else:
            sw = np.array([self.class_weight.get(v, 1.0) for v in y])
        pen = np.full(d, self.l2)
        pen[0] = 0.0
        W = np.zeros((d, K - 1))

        def objective(W):
            logits = np.column_stack([np.zeros(n), Z @ W])
            logits -= logits.max(1, keepdims=True)
            logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
            ll = np.sum(sw * logp[np.arange(n), np.searchsorted(self.classes_, y)])
            return -ll + 0.5 * np.sum(pen[:, None] * W * W)

        obj = objective(W)
        self.converged_ = False
        for self.n_iter_ in range(1, self.max_iter + 1):
            P = _softmax(np.column_stack([np.zeros(n), Z @ W]))[:, 1:]
            grad = Z.T @ (sw[:, None] * (P - Y)) + pen[:, None] * W
            if np.linalg.norm(grad) / n < self.tol:
                self.converged_ = True
                break
            m = K - 1
            H = np.zeros((d * m, d * m))
            for a in range(m):
                for b in range(a, m):
                    r = sw * P[:, a] * ((a == b) - P[:, b])
                    block = (Z * r[:, None]).T @ Z
                    H[a * d:(a + 1) * d, b * d:(b + 1) * d] = block
                    H[b * d:(b + 1) * d, a * d:(a + 1) * d] = block
            H[np.diag_indices_from(H)] += np.tile(pen, m) + 1e-10
            step = linalg.solve(H, grad.T.ravel(), assume_a="pos").reshape(m, d).T
            t = 1.0
            while t > 1e-8:
                cand = W - t * step
                new = objective(cand)
                if new <= obj:
                    break
                t *= 0.5
            if t <= 1e-8:
                break
            W, obj = cand, new
        if not self.converged_:
            warnings.warn(f"logistic fit stopped after {self.n_iter_} iterations without reaching tol",
                          NonConvergenceWarning, stacklevel=2)
        self.coef_ = W
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        Z = np.column_stack([np.ones(len(X)), (X - self._mu) / self._sd])
        return np.column_stack([np.zeros(len(X)), Z @ self.coef_])

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def fit_logistic(X, y, class_weight="balanced", l2=1e-6):
    return LogisticModel(l2=l2, class_weight=class_weight).fit(X, y)


def _sk_seed(seed):
    # sklearn only takes 32-bit seeds; task seeds are 64-bit
    return None if seed is None else int(seed) % 2 ** 32


class HGBModel(BaseEstimator):
    """Histogram gradient boosting on depth-limited trees.

    ``task`` is ``"classification"`` (softmax/log loss, balanced class
    weights) or ``"regression"`` (squared error).  After fitting,
    ``train_loss_`` holds the training loss after each boosting round.
    """

    def __init__(self, task="classification", max_depth=3, learning_rate=0.1, n_trees=100,
                 max_bins=255, min_samples_leaf=20, random_state=0):
        self.task = task
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.n_trees = n_trees
        self.max_bins = max_bins
        self.min_samples_leaf = min_samples_leaf
        self.random_state = random_state

    def _make(self):
        common = dict(max_depth=self.max_depth, learning_rate=self.learning_rate, max_iter=self.n_trees,
                      max_bins=self.max_bins, min_samples_leaf=self.min_samples_leaf, max_leaf_nodes=None,
                      early_stopping=False, l2_regularization=0.0, random_state=_sk_seed(self.random_state))
        if self.task == "classification":
            return HistGradientBoostingClassifier(class_weight="balanced", **common)
        if self.task == "regression":
            return HistGradientBoostingRegressor(**common)
        raise ValueError(f"task must be classification or regression, got {self.task!r}")

    def fit(self, X, y):
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        y = np.asarray(y)
        if len(X) < 2:
            raise ValueError("need at least two rows")
        if self.task == "classification" and np.unique(y).size < 2:
            raise DegenerateTarget("classification target has a single level")
        self.model_ = self._make().fit(X, y)
        self.n_features_in_ = X.shape[1]
        if self.task == "classification":
            self.classes_ = self.model_.classes_
        self.train_loss_ = self._staged_loss(X, y)
        return self

    def _staged_loss(self, X, y):
        losses = []
        if self.task == "regression":
            for pred in self.model_.staged_predict(X):
                losses.append(float(np.mean((y - pred) ** 2)))
        else:
            cw = class_weights(y)
            sw = np.array([cw[v] for v in y])
            idx = np.searchsorted(self.classes_, y)
            for proba in self.model_.staged_predict_proba(X):
                p = np.clip(proba[np.arange(len(y)), idx], 1e-300, 1.0)
                losses.append(float(-np.sum(sw * np.log(p)) / sw.sum()))
        return np.asarray(losses)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_array(X, dtype=np.float64, ensure_all_finite="allow-nan"))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_array(X, dtype=np.float64, ensure_all_finite="allow-nan"))

    def score(self, X, y):
        pred = self.predict(X)
        return balanced_accuracy(pred, np.asarray(y)) if self.task == "classification" else r2(pred, y)


def fit_hgb(X, y, task="classification", max_depth=3, learning_rate=0.1, n_trees=100, max_bins=255,
            min_samples_leaf=20, random_state=0):
    return HGBModel(task, max_depth, learning_rate, n_trees, max_bins, min_samples_leaf, random_state).fit(X, y)


HGB_GRID = {"max_depth": (3, 6), "learning_rate": (0.05, 0.1), "n_trees": (100, 300)}


def grid_search_hgb(X, y, groups, task="classification", grid=HGB_GRID, n_folds=5, seed=0):
    """Pick HGB hyperparameters by subject-level inner cross-validation.

    Returns ``(best_params, fitted_model)`` where the model is refit on all
    rows with the best parameters.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    folds = kfold(groups, n_folds, seed)
    best, best_score = None, -np.inf
    names = list(grid)
    for combo in itertools.product(*(grid[k] for k in names)):
        params = dict(zip(names, combo))
        scores = []
        for f in range(n_folds):
            tr, te = folds != f, folds == f
            if task == "classification" and (np.unique(y[tr]).size < 2 or np.unique(y[te]).size < 1):
                continue
            model = HGBModel(task, random_state=seed, **params).fit(X[tr], y[tr])
            try:
                scores.append(model.score(X[te], y[te]))
            except (ValueError, ArithmeticError):
                continue
        score = np.mean(scores) if scores else -np.inf
        if score > best_score + 1e-12:
            best, best_score = params, score
    if best is None:
        best = {k: v[0] for k, v in grid.items()}
    return best, HGBModel(task, random_state=seed, **best).fit(X, y)
