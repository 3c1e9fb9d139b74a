"""Two-stage risk-factor imputation and feature mean imputation.

Every statistic is fitted on development rows only; rows to impute never
influence the models that fill them.
"""
from __future__ import annotations

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin

from ..errors import AllMissingFeature, DegenerateTarget, InsufficientNeighbors
from .cohort import CATEGORICAL, CONTINUOUS, FACTORS, one_hot
from .models import HGBModel


def mean_impute_features(X_dev, X_apply):
    """Fill NaN cells of ``X_apply`` with the column means of ``X_dev``."""
    X_dev = np.asarray(X_dev, dtype=np.float64)
    X_apply = np.array(X_apply, dtype=np.float64)
    observed = ~np.isnan(X_dev)
    if not observed.any(axis=0).all():
        bad = np.flatnonzero(~observed.any(axis=0)).tolist()
        raise AllMissingFeature(f"features {bad} have no observed development value")
    means = np.nanmean(X_dev, axis=0)
    holes = np.isnan(X_apply)
    X_apply[holes] = np.take(means, np.nonzero(holes)[1])
    return X_apply


class MeanImputer(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        mean_impute_features(X, X[:1])
        self.means_ = np.nanmean(X, axis=0)
        return self

    def transform(self, X):
        X = np.array(X, dtype=np.float64)
        holes = np.isnan(X)
        X[holes] = np.take(self.means_, np.nonzero(holes)[1])
        return X


def _design(table, exclude=()):
    return one_hot(table, [f for f in FACTORS if f in table.columns and f not in exclude])


class KNNContinuousImputer(TransformerMixin, BaseEstimator):
    """Mean of the k nearest development donors for each missing continuous factor.

    Distances use z-scored features (continuous factors and one-hot
    categoricals, z statistics from the development rows) over the
    coordinates observed in both rows, rescaled by ``sqrt(D / d_obs)``.
    Donors are development rows where the target is observed.
    """

    def __init__(self, k=5, targets=CONTINUOUS):
        self.k = k
        self.targets = targets

    def fit(self, table: pd.DataFrame, y=None):
        self.dev_ = table.reset_index(drop=True).copy()
        X = _design(self.dev_)
        self.columns_ = list(X.columns)
        self.mean_ = X.mean(skipna=True).to_numpy()
        sd = X.std(skipna=True, ddof=0).to_numpy()
        self.sd_ = np.where(np.isfinite(sd) & (sd > 0), sd, 1.0)
        self.mean_ = np.where(np.isfinite(self.mean_), self.mean_, 0.0)
        self.Z_ = self._z(self.dev_)
        return self

    def _z(self, table):
        X = _design(table).reindex(columns=self.columns_).to_numpy(dtype=float)
        return (X - self.mean_) / self.sd_

    def _distances(self, zq, zd, skip):
        keep = np.ones(len(self.columns_), dtype=bool)
        keep[skip] = False
        zq, zd = zq[:, keep], zd[:, keep]
        D = keep.sum()
        oq, od = ~np.isnan(zq), ~np.isnan(zd)
        zq0, zd0 = np.where(oq, zq, 0.0), np.where(od, zd, 0.0)
        oqf, odf = oq.astype(float), od.astype(float)
        # squared differences over co-observed coordinates via matrix products
        sq = (zq0 ** 2) @ odf.T + oqf @ (zd0 ** 2).T - 2.0 * zq0 @ zd0.T
        n_obs = oqf @ odf.T
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.sqrt(np.maximum(sq, 0.0) * D / n_obs)
        return np.where(n_obs > 0, d, np.inf)

    def transform(self, table: pd.DataFrame, rows=None):
        """Impute missing targets; ``rows`` optionally restricts which rows are filled."""
        out = table.copy()
        zq_all = self._z(table)
        mask_rows = np.ones(len(table), dtype=bool) if rows is None else np.asarray(rows, dtype=bool)
        for target in self.targets:
            if target not in table.columns:
                continue
            need = table[target].isna().to_numpy() & mask_rows
            if not need.any():
                continue
            donors = self.dev_[target].notna().to_numpy()
            if donors.sum() < self.k:
                raise InsufficientNeighbors(
                    f"{target}: only {donors.sum()} development rows observed, need k={self.k}")
            skip = [self.columns_.index(target)]
            d = self._distances(zq_all[need], self.Z_[donors], skip)
            vals = self.dev_.loc[donors, target].to_numpy(float)
            nearest = np.argsort(d, axis=1, kind="stable")[:, :self.k]
            out.loc[out.index[need], target] = vals[nearest].mean(axis=1)
        return out


def knn_impute_continuous(table, k=5, dev=None):
    """Functional form: fit on ``dev`` rows (default all rows) and fill ``table``."""
    dev_table = table if dev is None else table[np.asarray(dev, dtype=bool)]
    return KNNContinuousImputer(k).fit(dev_table).transform(table)


class BoostedCategoricalImputer(TransformerMixin, BaseEstimator):
    """Fill one categorical factor with an HGB classifier on the other eleven factors."""

    def __init__(self, target="smoking", max_depth=3, learning_rate=0.1, n_trees=100, min_samples_leaf=20,
                 random_state=0):
        self.target = target
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.n_trees = n_trees
        self.min_samples_leaf = min_samples_leaf
        self.random_state = random_state

    def fit(self, table: pd.DataFrame, y=None):
        if self.target not in CATEGORICAL:
            raise ValueError(f"{self.target!r} is not a categorical factor")
        observed = table[table[self.target].notna()]
        if observed[self.target].nunique() < 2:
            raise DegenerateTarget(f"{self.target} has fewer than two observed levels")
        X = _design(observed, exclude=(self.target,))
        self.columns_ = list(X.columns)
        self.model_ = HGBModel("classification", self.max_depth, self.learning_rate, self.n_trees,
                               min_samples_leaf=min(self.min_samples_leaf, max(1, len(observed) // 10)),
                               random_state=self.random_state).fit(X.to_numpy(), observed[self.target].to_numpy())
        return self

    def transform(self, table: pd.DataFrame, rows=None):
        out = table.copy()
        need = table[self.target].isna().to_numpy()
        if rows is not None:
            need &= np.asarray(rows, dtype=bool)
        if need.any():
            X = _design(table[need], exclude=(self.target,)).reindex(columns=self.columns_)
            out.loc[out.index[need], self.target] = self.model_.predict(X.to_numpy())
        return out


def boosted_impute_categorical(table, target_factor, dev=None, random_state=0):
    dev_table = table if dev is None else table[np.asarray(dev, dtype=bool)]
    return BoostedCategoricalImputer(target_factor, random_state=random_state).fit(dev_table).transform(table)


def impute_cohort(table: pd.DataFrame, k=5, seed=0):
    """Two-stage imputation of a split-labelled cohort.

    Development rows are filled (categoricals by boosting, then continuous
    factors by kNN).  Validation rows are never filled; instead the
    returned ``val_missing`` column lists their missing factors.
    """
    subjects = table.drop_duplicates("subject_id")
    dev_mask = (subjects["split"] == "dev").to_numpy()
    filled = subjects.copy()
    for f in CATEGORICAL:
        if f in subjects.columns and subjects.loc[dev_mask, f].isna().any():
            model = BoostedCategoricalImputer(f, random_state=seed).fit(subjects[dev_mask])
            filled = model.transform(filled, rows=dev_mask)
    model = KNNContinuousImputer(k).fit(subjects[dev_mask])
    filled = model.transform(filled, rows=dev_mask)
    by_subject = filled.set_index("subject_id")
    out = table.copy()
    factors = [f for f in FACTORS if f in table.columns]
    for f in factors:
        out[f] = out["subject_id"].map(by_subject[f]).to_numpy()
    val_rows = (out["split"] == "val").to_numpy()
    out["val_missing"] = [";".join(f for f in factors if pd.isna(r[f])) if v else ""
                          for v, (_, r) in zip(val_rows, table.iterrows())]
    return out
