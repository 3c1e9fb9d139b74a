"""Risk-factor cohort schema and CSV reading.

A cohort table has one row per ``(subject_id, eye)``; factor values are
repeated on both eyes of a subject.  Empty cells are missing values.
"""
from __future__ import annotations

import numpy as np
import pandas as pd

CATEGORICAL = {
    "sex": ("F", "M"),
    "sleeplessness": ("Never/Rarely", "Sometimes", "Usually"),
    "smoking": ("never", "smoked"),
    "alcohol": ("Low", "Moderate", "Excessive"),
    "depression": ("negative", "positive"),
    "economic": ("Low", "Middle", "High"),
}
CONTINUOUS = ("age", "education", "bmi", "dbp", "sbp", "hba1c")
FACTORS = ("sex", "age", "education", "sleeplessness", "smoking", "alcohol",
           "depression", "economic", "bmi", "dbp", "sbp", "hba1c")
SPLITS = ("dev", "val")
KEY = ["subject_id", "eye"]


def is_categorical(factor):
    return factor in CATEGORICAL


def validate_cohort(df: pd.DataFrame) -> pd.DataFrame:
    """Coerce dtypes and check level sets; returns a cleaned copy."""
    missing = [c for c in KEY if c not in df.columns]
    if missing:
        raise ValueError(f"cohort table lacks key columns {missing}")
    out = df.copy()
    out["subject_id"] = out["subject_id"].astype(str)
    out["eye"] = out["eye"].astype(str)
    if not out["eye"].isin(["left", "right"]).all():
        raise ValueError("eye must be 'left' or 'right'")
    if out.duplicated(KEY).any():
        raise ValueError("cohort rows must be unique per (subject_id, eye)")
    for f, levels in CATEGORICAL.items():
        if f not in out.columns:
            continue
        col = out[f].astype(object).where(out[f].notna(), None)
        bad = set(col.dropna()) - set(levels)
        if bad:
            raise ValueError(f"factor {f!r} has undeclared levels {sorted(bad)}")
        out[f] = col
    for f in CONTINUOUS:
        if f not in out.columns:
            continue
        out[f] = pd.to_numeric(out[f], errors="raise").astype(float)
        vals = out[f].dropna()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"factor {f!r} has non-finite values")
    if "split" in out.columns:
        bad = set(out["split"].dropna()) - set(SPLITS)
        if bad:
            raise ValueError(f"split labels must be dev/val, got {sorted(bad)}")
    return out


def read_table(path) -> pd.DataFrame:
    """Read a CSV written by this package; ``#`` lines are header comments."""
    return pd.read_csv(path, comment="#", keep_default_na=False, na_values=[""],
                       dtype={"subject_id": str, "eye": str})


def read_cohort(path) -> pd.DataFrame:
    return validate_cohort(read_table(path))


def subject_table(df: pd.DataFrame) -> pd.DataFrame:
    """First row of every subject, in order of first appearance."""
    return df.drop_duplicates("subject_id").reset_index(drop=True)


def one_hot(df: pd.DataFrame, factors) -> pd.DataFrame:
    """Numeric design: continuous factors as-is (NaN kept), categoricals one-hot.

    A missing categorical value gives NaN in every indicator of that factor.
    """
    cols = {}
    for f in factors:
        if is_categorical(f):
            missing = df[f].isna().to_numpy()
            for level in CATEGORICAL[f]:
                cols[f"{f}={level}"] = np.where(missing, np.nan, (df[f] == level).to_numpy(dtype=float))
        else:
            cols[f] = df[f].astype(float).to_numpy()
    return pd.DataFrame(cols, index=df.index)
