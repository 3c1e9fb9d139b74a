"""Classical machine-learning layer: splits, imputation, baselines, metrics and probes."""
from .cohort import CATEGORICAL, CONTINUOUS, FACTORS, read_cohort, validate_cohort
from .impute import (BoostedCategoricalImputer, KNNContinuousImputer, MeanImputer,
                     boosted_impute_categorical, impute_cohort, knn_impute_continuous,
                     mean_impute_features)
from .metrics import ModelReport, auroc, balanced_accuracy, evaluate_with_ci, r2
from .models import (HGBModel, LogisticModel, RidgeRegression, fit_hgb, fit_linear_ridge,
                     fit_logistic, grid_search_hgb)
from .probe import linear_probe
from .split import kfold, stratified_split

__all__ = [
    "CATEGORICAL", "CONTINUOUS", "FACTORS", "read_cohort", "validate_cohort",
    "BoostedCategoricalImputer", "KNNContinuousImputer", "MeanImputer", "boosted_impute_categorical",
    "impute_cohort", "knn_impute_continuous", "mean_impute_features",
    "ModelReport", "auroc", "balanced_accuracy", "evaluate_with_ci", "r2",
    "HGBModel", "LogisticModel", "RidgeRegression", "fit_hgb", "fit_linear_ridge", "fit_logistic",
    "grid_search_hgb", "linear_probe", "kfold", "stratified_split",
]
