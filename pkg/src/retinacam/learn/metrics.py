"""Evaluation metrics and bootstrap-backed model reports."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateVariance, MissingClass
from ..stats import bootstrap_ci, rankdata


@dataclass(frozen=True)
class ModelReport:
    factor: str
    model: str
    metric: str
    value: float
    ci_lo: float
    ci_hi: float
    chance: float = float("nan")


def balanced_accuracy(pred, truth, labels=None) -> float:
    """Mean recall over the classes present in ``truth`` (or over ``labels``)."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if truth.size == 0 or pred.shape != truth.shape:
        raise ValueError("pred and truth must be nonempty and aligned")
    classes = np.unique(truth) if labels is None else np.asarray(labels)
    recalls = []
    for c in classes:
        sel = truth == c
        if not sel.any():
            raise MissingClass(f"class {c!r} has no samples in truth")
        recalls.append(np.mean(pred[sel] == c))
    return float(np.mean(recalls))


def _binary_auroc(scores, positive):
    n1 = int(positive.sum())
    n0 = positive.size - n1
    if n1 == 0 or n0 == 0:
        raise MissingClass("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return (ranks[positive].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0)


def auroc(scores, truth, classes=None) -> float:
    """Rank-statistic AUROC; ties earn half credit.

    Binary: ``scores`` is 1-D and ``truth`` holds 0/1 (or the two entries of
    ``classes``, the second being positive).  Multiclass: ``scores`` is
    ``(n, K)`` with columns ordered like ``classes`` and the result is the
    macro average of one-vs-rest AUROCs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.ndim == 1:
        if classes is None:
            positive = truth.astype(bool) if truth.dtype != object else truth == np.unique(truth)[-1]
        else:
            positive = truth == classes[1]
        return float(_binary_auroc(scores, positive))
    if classes is None:
        classes = np.unique(truth)
    if scores.shape[1] != len(classes):
        raise ValueError("score columns must match the class list")
    if scores.shape[1] == 2:
        return float(_binary_auroc(scores[:, 1], truth == classes[1]))
    return float(np.mean([_binary_auroc(scores[:, j], truth == c) for j, c in enumerate(classes)]))


def r2(pred, truth) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    if truth.size < 2:
        raise ValueError("R^2 needs at least two observations")
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    if ss_tot <= 0:
        raise DegenerateVariance("truth has zero variance")
    return float(1.0 - np.sum((truth - pred) ** 2) / ss_tot)


METRICS = ("balanced_accuracy", "auroc", "r2")


def chance_level(metric, n_classes=None) -> float:
    """Expected value of an uninformative predictor."""
    if metric == "balanced_accuracy":
        return 1.0 / n_classes
    if metric == "auroc":
        return 0.5
    return 0.0


def evaluate_with_ci(outputs, truth, metric, n_resamples=2000, seed=0, classes=None,
                     factor="", model="") -> ModelReport:
    """Point metric with a percentile bootstrap interval over rows.

    ``outputs`` are predicted labels for balanced accuracy, scores for AUROC
    and predicted values for R^2.  Classification metrics resample within
    each true class so every class stays represented.
    """
    truth = np.asarray(truth)
    outputs = np.asarray(outputs)
    if metric == "balanced_accuracy":
        labels = np.unique(truth) if classes is None else np.asarray(classes)
        labels = labels[np.isin(labels, truth)]
        fn = lambda p, t: balanced_accuracy(p, t, labels)  # noqa: E731
        strata, k = truth, len(labels)
    elif metric == "auroc":
        fn = lambda s, t: auroc(s, t, classes)  # noqa: E731
        strata, k = truth, None
    elif metric == "r2":
        fn, strata, k = (lambda p, t: r2(p, t)), None, None
    else:
        raise ValueError(f"unknown metric {metric!r}")
    point, lo, hi = bootstrap_ci((outputs, truth), fn, n_resamples, 0.95, seed, strata=strata)
    return ModelReport(factor, model, metric, point, lo, hi, chance_level(metric, k))
