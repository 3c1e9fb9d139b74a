"""Subject-level stratified partitioning and cross-validation folds."""
from __future__ import annotations

import numpy as np
import pandas as pd

from .cohort import CONTINUOUS, FACTORS, is_categorical


def _strata(subjects: pd.DataFrame, factors):
    """Integer bin per (subject, factor); missing values get their own bin."""
    codes = []
    for f in factors:
        if f not in subjects.columns:
            continue
        col = subjects[f]
        if is_categorical(f):
            code = pd.Categorical(col.astype(object)).codes.astype(int)
        else:
            vals = col.astype(float)
            code = np.full(len(col), -1)
            obs = vals.notna().to_numpy()
            if obs.sum() >= 5:
                edges = np.quantile(vals[obs], [0.2, 0.4, 0.6, 0.8])
                code[obs] = np.searchsorted(edges, vals[obs], side="right")
            else:
                code[obs] = 0
        codes.append(np.where(code < 0, code.max() + 1, code))
    return np.column_stack(codes) if codes else np.zeros((len(subjects), 0), dtype=int)


def stratified_split(table: pd.DataFrame, dev_frac=0.8, seed=0, factors=FACTORS) -> pd.Series:
    """Assign every subject to ``dev`` or ``val`` by greedy iterative stratification.

    Subjects are visited in a seeded random order; each goes to the side whose
    remaining demand, summed over the subject's bins of every factor, is
    largest relative to that side's target.  Continuous factors are binned
    at their quintiles.  Returns one label per row of ``table``.
    """
    if len(table) == 0:
        raise ValueError("cannot split an empty table")
    if not 0 < dev_frac < 1:
        raise ValueError("dev_frac must lie in (0, 1)")
    subjects = table.drop_duplicates("subject_id").reset_index(drop=True)
    n = len(subjects)
    bins = _strata(subjects, factors)
    n_dev = int(round(dev_frac * n))
    frac = np.array([dev_frac, 1.0 - dev_frac])
    cap = np.array([n_dev, n - n_dev])
    totals = [np.bincount(bins[:, j]) for j in range(bins.shape[1])]
    counts = [np.zeros((2, t.size)) for t in totals]
    order = np.random.default_rng(seed).permutation(n)
    side = np.empty(n, dtype=int)
    filled = np.zeros(2, dtype=int)
    for i in order:
        if filled[0] >= cap[0]:
            s = 1
        elif filled[1] >= cap[1]:
            s = 0
        else:
            score = np.zeros(2)
            for j, b in enumerate(bins[i]):
                want = frac * totals[j][b]
                score += (want - counts[j][:, b]) / want
            remaining = (cap - filled) / cap
            s = int(np.argmax(score + 1e-9 * remaining))
        side[i] = s
        filled[s] += 1
        for j, b in enumerate(bins[i]):
            counts[j][s, b] += 1
    labels = pd.Series(np.where(side == 0, "dev", "val"), index=subjects["subject_id"])
    return pd.Series(table["subject_id"].map(labels).to_numpy(), index=table.index, name="split")


def kfold(groups, k=10, seed=0) -> np.ndarray:
    """Fold index per row; rows sharing a group (subject) share a fold.

    ``groups`` may be an int, meaning every row is its own group.  Group
    counts per fold differ by at most one.
    """
    if np.isscalar(groups):
        groups = np.arange(int(groups))
    groups = np.asarray(groups)
    uniq, inverse = np.unique(groups, return_inverse=True)
    if uniq.size < k:
        raise ValueError(f"need at least k={k} groups, got {uniq.size}")
    perm = np.random.default_rng(seed).permutation(uniq.size)
    fold_of_group = np.empty(uniq.size, dtype=int)
    for f, part in enumerate(np.array_split(perm, k)):
        fold_of_group[part] = f
    return fold_of_group[inverse]
