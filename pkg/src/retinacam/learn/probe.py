"""Linear probing of frozen image embeddings against morphometry targets."""
from __future__ import annotations

import numpy as np
import pandas as pd
from scipy import linalg, stats as sps

from .split import kfold

PROBE_LAMBDA_SCALE = 1e-3


def _ridge_multi(X, Y, lam):
    """Ridge with unpenalized intercept for many targets; returns (intercept, coef)."""
    xm, ym = X.mean(0), Y.mean(0)
    Xc, Yc = X - xm, Y - ym
    n, p = Xc.shape
    if n < p:
        factor = linalg.cho_factor(Xc @ Xc.T + lam * np.eye(n), lower=True)
        coef = Xc.T @ linalg.cho_solve(factor, Yc)
    else:
        factor = linalg.cho_factor(Xc.T @ Xc + lam * np.eye(p), lower=True)
        coef = linalg.cho_solve(factor, Xc.T @ Yc)
    return ym - xm @ coef, coef


def linear_probe(embeddings, targets, groups=None, k=10, seed=0, lambda_scale=PROBE_LAMBDA_SCALE):
    """Out-of-fold R^2 of ridge probes, one per target column.

    ``embeddings`` is ``(n, p)``; ``targets`` is ``(n, T)`` (NaN = missing)
    or a DataFrame.  Folds are subject-level when ``groups`` is given.  The
    ridge penalty in each fold is ``lambda_scale`` times the mean diagonal of
    the centered training Gram matrix.  Targets sharing a missingness
    pattern share one factorization per fold.

    Returns a DataFrame with ``target, r2_mean, r2_sd, ci_lo, ci_hi, n_folds``;
    the interval is a t-based 95% CI of the fold mean.
    """
    names = list(targets.columns) if isinstance(targets, pd.DataFrame) else None
    E = np.asarray(embeddings, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if names is None:
        names = [f"t{j}" for j in range(Y.shape[1])]
    if len(E) != len(Y):
        raise ValueError("embeddings and targets must be row-aligned")
    folds = kfold(np.arange(len(E)) if groups is None else groups, k, seed)
    scores = np.full((k, Y.shape[1]), np.nan)
    observed = ~np.isnan(Y)
    patterns = {}
    for j in range(Y.shape[1]):
        patterns.setdefault(observed[:, j].tobytes(), []).append(j)
    for key, cols in patterns.items():
        rows = observed[:, cols[0]]
        for f in range(k):
            tr, te = rows & (folds != f), rows & (folds == f)
            if tr.sum() < 2 or te.sum() < 2:
                continue
            Xtr = E[tr]
            Xc = Xtr - Xtr.mean(0)
            lam = lambda_scale * np.einsum("ij,ij->", Xc, Xc) / Xc.shape[1]
            b0, W = _ridge_multi(Xtr, Y[tr][:, cols], max(lam, 1e-12))
            pred = E[te] @ W + b0
            truth = Y[te][:, cols]
            ss_tot = np.sum((truth - truth.mean(0)) ** 2, axis=0)
            ss_res = np.sum((truth - pred) ** 2, axis=0)
            with np.errstate(divide="ignore", invalid="ignore"):
                scores[f, cols] = np.where(ss_tot > 0, 1.0 - ss_res / ss_tot, np.nan)
    rows = []
    for j, name in enumerate(names):
        s = scores[:, j][np.isfinite(scores[:, j])]
        if s.size == 0:
            rows.append((name, np.nan, np.nan, np.nan, np.nan, 0))
            continue
        mean = s.mean()
        sd = s.std(ddof=1) if s.size > 1 else 0.0
        half = sps.t.ppf(0.975, s.size - 1) * sd / np.sqrt(s.size) if s.size > 1 else 0.0
        rows.append((name, mean, sd, mean - half, mean + half, s.size))
    return pd.DataFrame(rows, columns=["target", "r2_mean", "r2_sd", "ci_lo", "ci_hi", "n_folds"])
