"""Hypothesis tests, effect sizes, bootstrap intervals and the group-comparison tables.

Distribution tails come from :mod:`scipy.special`; randomized procedures take
an explicit seed and draw from :func:`numpy.random.default_rng`.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import special

from .errors import DegenerateTable, DegenerateVariance, EmptyGroup

EXACT_MWU_MAX_N = 12
_PERM_BATCH = 1000


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n_a: int
    n_b: int = 0
    method: str = ""
    seed: int | None = None


@dataclass(frozen=True)
class EffectSize:
    kind: str
    value: float


def _sample(x, name, min_n=1):
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size < min_n:
        raise ValueError(f"{name} needs at least {min_n} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _t_two_sided(t, df):
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def student_t_independent(a, b, equal_var=True) -> TestResult:
    """Two-sided independent-samples t test (pooled variance unless ``equal_var=False``)."""
    a, b = _sample(a, "a", 2), _sample(b, "b", 2)
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if equal_var:
        df = na + nb - 2
        pooled = ((na - 1) * va + (nb - 1) * vb) / df
        if pooled <= 0:
            raise DegenerateVariance("pooled variance is zero")
        se = math.sqrt(pooled * (1.0 / na + 1.0 / nb))
        method = "student_t"
    else:
        qa, qb = va / na, vb / nb
        if qa + qb <= 0:
            raise DegenerateVariance("both samples are constant")
        se = math.sqrt(qa + qb)
        df = (qa + qb) ** 2 / (qa * qa / (na - 1) + qb * qb / (nb - 1))
        method = "welch_t"
    t = diff / se
    return TestResult(float(t), _t_two_sided(t, df), na, nb, method)


def _ge(perm_stats, observed):
    # tolerate rounding so that exact ties with the observed value count
    return perm_stats >= observed - 1e-12 * max(1.0, abs(observed))


def permutation_test_mean_diff(a, b, n_perm=10000, seed=0) -> TestResult:
    """Two-sided permutation test of the difference in means with add-one smoothing."""
    a, b = _sample(a, "a"), _sample(b, "b")
    pooled = np.concatenate([a, b])
    na, n = a.size, pooled.size
    observed = abs(a.mean() - b.mean())
    rng = np.random.default_rng(seed)
    total = pooled.sum()
    hits = 0
    done = 0
    while done < n_perm:
        m = min(_PERM_BATCH, n_perm - done)
        idx = rng.permuted(np.tile(np.arange(n), (m, 1)), axis=1)[:, :na]
        sa = pooled[idx].sum(axis=1)
        stats = np.abs(sa / na - (total - sa) / (n - na))
        hits += int(np.count_nonzero(_ge(stats, observed)))
        done += m
    return TestResult(float(a.mean() - b.mean()), (1 + hits) / (n_perm + 1), na, b.size,
                      "permutation_mean_diff", seed)


def pearson_r(x, y) -> float:
    x, y = _sample(x, "x", 3), _sample(y, "y", 3)
    if x.size != y.size:
        raise ValueError("x and y must have equal length")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(xc, xc), np.dot(yc, yc)
    if sxx <= 0 or syy <= 0:
        raise DegenerateVariance("a variable has zero variance")
    return float(np.clip(np.dot(xc, yc) / math.sqrt(sxx * syy), -1.0, 1.0))


def permutation_test_pearson(x, y, n_perm=10000, seed=0) -> TestResult:
    """Permutation test of |r| permuting ``y``; the reported statistic is r itself."""
    r = pearson_r(x, y)
    x, y = np.asarray(x, float), np.asarray(y, float)
    xc = x - x.mean()
    yc = (y - y.mean()) / math.sqrt(np.dot(y - y.mean(), y - y.mean()))
    xc = xc / math.sqrt(np.dot(xc, xc))
    rng = np.random.default_rng(seed)
    n = x.size
    observed = abs(r)
    hits = done = 0
    while done < n_perm:
        m = min(_PERM_BATCH, n_perm - done)
        idx = rng.permuted(np.tile(np.arange(n), (m, 1)), axis=1)
        hits += int(np.count_nonzero(_ge(np.abs(yc[idx] @ xc), observed)))
        done += m
    return TestResult(r, (1 + hits) / (n_perm + 1), n, 0, "permutation_pearson", seed)


def _perm_batches(n, n_perm, seed):
    """The permutation stream shared by the scalar and vectorized tests."""
    rng = np.random.default_rng(seed)
    done = 0
    while done < n_perm:
        m = min(_PERM_BATCH, n_perm - done)
        yield rng.permuted(np.tile(np.arange(n), (m, 1)), axis=1)
        done += m


def permutation_association(x, X, kind, n_perm=10000, seed=0, min_n=3):
    """Permutation p values of one factor against many feature columns at once.

    ``kind="groups"``: ``x`` is boolean membership of group a; the statistic
    is the mean difference a - b.  ``kind="pearson"``: ``x`` is numeric and
    the statistic is Pearson's r.  ``X`` is ``(n, F)`` with NaN for missing
    feature values; each column is tested on its own observed rows while the
    factor is permuted over all rows.  With complete columns the results
    equal :func:`permutation_test_mean_diff` (rows ordered a then b) and
    :func:`permutation_test_pearson` for the same seed.

    Returns ``(statistic, p_value, n_a, n_b)`` arrays; degenerate columns are NaN.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, F = X.shape
    V = ~np.isnan(X)
    X0 = np.where(V, X, 0.0)
    Vf = V.astype(np.float64)
    hits = np.zeros(F)
    if kind == "groups":
        g = np.asarray(x, dtype=bool)
        if g.shape != (n,):
            raise ValueError("x must align with the rows of X")
        order = np.concatenate([np.flatnonzero(g), np.flatnonzero(~g)])
        X0, Vf = X0[order], Vf[order]
        na = int(g.sum())
        tot, cnt = X0.sum(0), Vf.sum(0)
        ca, cb = Vf[:na].sum(0), Vf[na:].sum(0)
        ok = (ca >= 1) & (cb >= 1) & (ca + cb >= min_n)
        with np.errstate(divide="ignore", invalid="ignore"):
            observed = X0[:na].sum(0) / ca - X0[na:].sum(0) / cb
        obs_abs = np.abs(observed)
        M = np.zeros((min(_PERM_BATCH, n_perm), n))
        for idx in _perm_batches(n, n_perm, seed):
            m = len(idx)
            M[:] = 0.0
            np.put_along_axis(M[:m], idx[:, :na], 1.0, axis=1)
            sa, na_f = M[:m] @ X0, M[:m] @ Vf
            with np.errstate(divide="ignore", invalid="ignore"):
                stat = np.abs(sa / na_f - (tot - sa) / (cnt - na_f))
            tol = 1e-12 * np.maximum(1.0, obs_abs)
            hits += np.count_nonzero(stat >= obs_abs - tol, axis=0)
        stat_out = np.where(ok, observed, np.nan)
        n_a, n_b = ca, cb
    elif kind == "pearson":
        y = np.asarray(x, dtype=np.float64)
        if y.shape != (n,) or not np.all(np.isfinite(y)):
            raise ValueError("x must be finite and align with the rows of X")
        cnt = Vf.sum(0)
        with np.errstate(divide="ignore", invalid="ignore"):
            xm = X0.sum(0) / cnt
        Xc = np.where(V, X - xm, 0.0)
        sxx = (Xc * Xc).sum(0)
        yc = y - y.mean()

        def corr(Y):
            sy, syy, sxy = Y @ Vf, (Y * Y) @ Vf, Y @ Xc
            with np.errstate(divide="ignore", invalid="ignore"):
                return sxy / np.sqrt(sxx * (syy - sy * sy / cnt))

        observed = np.clip(corr(yc[None, :])[0], -1.0, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            syy_obs = ((yc[None, :] * yc[None, :]) @ Vf - (yc[None, :] @ Vf) ** 2 / cnt)[0]
        ok = (cnt >= min_n) & (sxx > 0) & (syy_obs > 1e-12 * max(1.0, float(yc @ yc)))
        obs_abs = np.abs(observed)
        for idx in _perm_batches(n, n_perm, seed):
            stat = np.abs(corr(yc[idx]))
            tol = 1e-12 * np.maximum(1.0, obs_abs)
            hits += np.count_nonzero(stat >= obs_abs - tol, axis=0)
        stat_out = np.where(ok, observed, np.nan)
        n_a, n_b = cnt, np.zeros(F)
    else:
        raise ValueError(f"kind must be 'groups' or 'pearson', got {kind!r}")
    p = np.where(ok, (1 + hits) / (n_perm + 1), np.nan)
    return stat_out, p, n_a.astype(int), n_b.astype(int)


def rankdata(x):
    """Midranks starting at 1."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    bounds = np.flatnonzero(np.r_[True, sx[1:] != sx[:-1], True])
    ranks = np.empty(x.size)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        ranks[order[lo:hi]] = 0.5 * (lo + hi + 1)
    return ranks


def mann_whitney_u(a, b, method="auto") -> TestResult:
    """Two-sided Mann-Whitney U test; U is reported for sample ``a``.

    ``method="auto"`` enumerates all group assignments of the midranks when
    the combined size is at most 12 and otherwise uses the normal
    approximation with tie and continuity corrections.
    """
    a, b = _sample(a, "a"), _sample(b, "b")
    na, nb = a.size, b.size
    n = na + nb
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[:na].sum() - na * (na + 1) / 2.0
    mu = na * nb / 2.0
    if method == "auto":
        method = "exact" if n <= EXACT_MWU_MAX_N else "normal"
    if method == "exact":
        sums = np.array([ranks[list(c)].sum() for c in itertools.combinations(range(n), na)])
        us = sums - na * (na + 1) / 2.0
        dev = abs(u - mu)
        p = np.count_nonzero(np.abs(us - mu) >= dev - 1e-9) / us.size
        return TestResult(float(u), float(min(1.0, p)), na, nb, "mann_whitney_exact")
    if method != "normal":
        raise ValueError(f"unknown method {method!r}")
    _, counts = np.unique(ranks, return_counts=True)
    tie = np.sum(counts ** 3 - counts)
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return TestResult(float(u), 1.0, na, nb, "mann_whitney_normal")
    z = max(0.0, abs(u - mu) - 0.5) / math.sqrt(var)
    p = float(special.erfc(z / math.sqrt(2.0)))
    return TestResult(float(u), min(1.0, p), na, nb, "mann_whitney_normal")


def _table(table):
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2 or min(t.shape) < 2:
        raise DegenerateTable("contingency table must be at least 2x2")
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise DegenerateTable("counts must be finite and non-negative")
    expected = t.sum(1, keepdims=True) * t.sum(0, keepdims=True) / max(t.sum(), 1.0)
    if np.any(expected <= 0):
        raise DegenerateTable("a row or column total is zero")
    return t, expected


def chi_squared_independence(table) -> TestResult:
    """Pearson chi-squared test of independence without continuity correction."""
    t, expected = _table(table)
    chi2 = float(np.sum((t - expected) ** 2 / expected))
    df = (t.shape[0] - 1) * (t.shape[1] - 1)
    return TestResult(chi2, float(special.gammaincc(df / 2.0, chi2 / 2.0)), int(t.sum()), 0, "chi_squared")


def cramers_v(table) -> EffectSize:
    t, _ = _table(table)
    # chi2 / N written as sum(O^2 / (R C)) - 1, exact on permutation tables
    phi2 = float(np.sum(t * t / (t.sum(1, keepdims=True) * t.sum(0, keepdims=True)))) - 1.0
    v = math.sqrt(max(phi2, 0.0) / (min(t.shape) - 1))
    return EffectSize("cramers_v", min(1.0, v))


def cohens_d(a, b) -> EffectSize:
    a, b = _sample(a, "a", 2), _sample(b, "b", 2)
    na, nb = a.size, b.size
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    if pooled <= 0:
        raise DegenerateVariance("pooled standard deviation is zero")
    return EffectSize("cohens_d", float((a.mean() - b.mean()) / math.sqrt(pooled)))


def bootstrap_ci(samples, statistic=np.mean, n_resamples=2000, level=0.95, seed=0, strata=None):
    """Percentile bootstrap interval ``(point, lo, hi)``.

    ``samples`` is an array or a tuple of equal-length arrays resampled
    jointly by row.  With ``strata`` rows are resampled within each stratum,
    which keeps every class present for classification metrics.  The
    interval is widened if needed so that it always contains the point value.
    """
    arrays = samples if isinstance(samples, tuple) else (samples,)
    arrays = tuple(np.asarray(a) for a in arrays)
    n = len(arrays[0])
    if n == 0:
        raise ValueError("bootstrap needs a nonempty sample")
    if any(len(a) != n for a in arrays):
        raise ValueError("resampled arrays must share their length")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    point = float(statistic(*arrays))
    rng = np.random.default_rng(seed)
    if strata is None:
        groups = [np.arange(n)]
    else:
        strata = np.asarray(strata)
        groups = [np.flatnonzero(strata == s) for s in np.unique(strata)]
    stats = np.empty(n_resamples)
    for i in range(n_resamples):
        idx = np.concatenate([g[rng.integers(0, g.size, g.size)] for g in groups])
        stats[i] = statistic(*(a[idx] for a in arrays))
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return point, float(min(lo, point)), float(max(hi, point))


def summarize(values) -> dict:
    """Mean, sd (n-1), median and type-7 quartiles; a singleton gets sd 0 and a flag."""
    v = _sample(values, "values")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return {"n": int(v.size), "mean": float(v.mean()), "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "median": float(med), "q1": float(q1), "q3": float(q3),
            "flag": "singleton" if v.size == 1 else ""}


# --- CAM-Score tables -------------------------------------------------------

STRUCTURE_ORDER = ("artery", "vein", "disc", "cup")


def fmt_mean_sd(s):
    return f"{s['mean']:.4f}({s['sd']:.4f})"


def fmt_median_iqr(s):
    return f"{s['median']:.4f} ({s['q1']:.4f}-{s['q3']:.4f})"


def format_p(p):
    if p is None or not np.isfinite(p):
        return "N/A"
    return f"{p:.2f}" if p >= 0.01 else "<0.01"


def _with_class(records: pd.DataFrame, cohort: pd.DataFrame | None):
    """Attach each record's subject level of its own factor as ``class``."""
    df = records.copy()
    df["class"] = "all"
    if cohort is None:
        return df
    levels = cohort.drop_duplicates("subject_id").set_index("subject_id")
    for factor in df["factor"].unique():
        if factor in levels.columns and not pd.api.types.is_numeric_dtype(levels[factor]):
            sel = df["factor"] == factor
            df.loc[sel, "class"] = df.loc[sel, "subject_id"].map(levels[factor]).astype(object)
    return df.dropna(subset=["class"])


def summary_table(records: pd.DataFrame, cohort: pd.DataFrame | None = None, kind="mean_sd"):
    """Population summary in the factor x class by structure layout.

    ``kind="mean_sd"`` summarizes every available score as "mean(sd)";
    ``kind="median_iqr"`` keeps only non-zero scores and writes
    "median (q1-q3)", or "N/A" for cells with no non-zero score.
    """
    df = _with_class(records, cohort)
    df = df[np.isfinite(df["score"].astype(float))]
    if kind == "median_iqr":
        df = df[df["score"] > 0]
    elif kind != "mean_sd":
        raise ValueError(f"unknown summary kind {kind!r}")
    rows = []
    keys = _with_class(records, cohort)[["factor", "class"]].drop_duplicates()
    for factor, cls in sorted(map(tuple, keys.astype(str).values)):
        row = {"factor": factor, "class": cls}
        cell = df[(df["factor"] == factor) & (df["class"].astype(str) == cls)]
        for st in STRUCTURE_ORDER:
            v = cell.loc[cell["structure"] == st, "score"].to_numpy(float)
            if v.size == 0:
                row[st] = "N/A"
            else:
                s = summarize(v)
                row[st] = fmt_mean_sd(s) if kind == "mean_sd" else fmt_median_iqr(s)
        rows.append(row)
    return pd.DataFrame(rows, columns=["factor", "class", *STRUCTURE_ORDER])


def group_compare_cam(records: pd.DataFrame, grouping: pd.DataFrame, cohort: pd.DataFrame | None = None,
                      groups=None):
    """Compare non-zero CAM-Scores between two subject groups per factor, class and structure.

    ``grouping`` maps ``subject_id`` to ``group``.  Each cell reports the
    median (q1-q3) per group and a Mann-Whitney p value; cells where either
    group has no non-zero score get "N/A".
    """
    mapping = grouping.drop_duplicates("subject_id").set_index("subject_id")["group"]
    names = list(groups) if groups is not None else sorted(mapping.unique().astype(str))
    if len(names) != 2:
        raise EmptyGroup(f"group comparison needs exactly two groups, got {names}")
    df = _with_class(records, cohort)
    df = df.assign(group=df["subject_id"].map(mapping).astype(str))
    keys = sorted(map(tuple, df[["factor", "class"]].drop_duplicates().astype(str).values))
    df = df[np.isfinite(df["score"].astype(float)) & (df["score"] > 0)]
    if not set(names) & set(mapping.astype(str)):
        raise EmptyGroup("no subject belongs to either group")
    rows = []
    for factor, cls in keys:
        cell = df[(df["factor"] == factor) & (df["class"].astype(str) == cls)]
        for st in STRUCTURE_ORDER:
            sub = cell[cell["structure"] == st]
            a = sub.loc[sub["group"] == names[0], "score"].to_numpy(float)
            b = sub.loc[sub["group"] == names[1], "score"].to_numpy(float)
            row = {"factor": factor, "class": cls, "structure": st, "n_a": a.size, "n_b": b.size}
            if a.size and b.size:
                row.update(median_a=fmt_median_iqr(summarize(a)), median_b=fmt_median_iqr(summarize(b)),
                           p_value=mann_whitney_u(a, b).p_value)
            else:
                row.update(median_a="N/A", median_b="N/A", p_value=float("nan"))
            rows.append(row)
    out = pd.DataFrame(rows, columns=["factor", "class", "structure", "n_a", "n_b",
                                      "median_a", "median_b", "p_value"])
    out.attrs["groups"] = names
    return out


def comparison_markdown(table: pd.DataFrame, alpha=0.05) -> str:
    """Markdown rendering with one row per factor/class and significant p values in bold."""
    names = table.attrs.get("groups", ["A", "B"])
    head = ["Factor", "Class"]
    for st in STRUCTURE_ORDER:
        head += [f"{st} {names[0]}", f"{st} {names[1]}", f"{st} p"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for (factor, cls), block in table.groupby(["factor", "class"], sort=True):
        cells = [factor, cls]
        by = block.set_index("structure")
        for st in STRUCTURE_ORDER:
            r = by.loc[st]
            p = r["p_value"]
            ptxt = format_p(p)
            if np.isfinite(p) and p < alpha:
                ptxt = f"**{ptxt}**"
            cells += [r["median_a"], r["median_b"], ptxt]
        lines.append("| " + " | ".join(map(str, cells)) + " |")
    return "\n".join(lines) + "\n"


def summary_markdown(table: pd.DataFrame) -> str:
    head = list(table.columns)
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for row in table.itertuples(index=False):
        lines.append("| " + " | ".join(map(str, row)) + " |")
    return "\n".join(lines) + "\n"
