"""Saliency overlap scores: the share of a structure's pixels inside the thresholded map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import EmptyStructure
from .raster import STRUCTURES, SegmentationBundle, StructureKind, check_field, check_mask, check_same_shape

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class CamScoreRecord:
    subject_id: str
    eye: str
    factor: str
    structure: str
    threshold: float
    score: float
    flag: str = ""

    @property
    def absent(self):
        return bool(self.flag)


def binarize(field, t=DEFAULT_THRESHOLD) -> np.ndarray:
    """Pixels at or above ``t``; ties count as salient."""
    return check_field(field) >= t


def cam_score(structure, field, t=DEFAULT_THRESHOLD) -> float:
    structure = check_mask(structure, "structure")
    field = check_field(field)
    check_same_shape(structure, field)
    total = np.count_nonzero(structure)
    if total == 0:
        raise EmptyStructure("structure mask is empty")
    return np.count_nonzero(structure & (field >= t)) / total


def cam_scores_for_bundle(bundle: SegmentationBundle, field, t=DEFAULT_THRESHOLD, factor=""):
    """One record per structure; empty structures give a NaN score with flag ``empty``."""
    field = check_field(field)
    check_same_shape(bundle.disc, field)
    salient = field >= t
    out = []
    for kind in STRUCTURES:
        mask = bundle.mask(kind)
        total = np.count_nonzero(mask)
        if total:
            score, flag = np.count_nonzero(mask & salient) / total, ""
        else:
            score, flag = float("nan"), "empty"
        out.append(CamScoreRecord(bundle.subject_id, bundle.laterality, factor,
                                  StructureKind(kind).value, float(t), score, flag))
    return out


RECORD_COLUMNS = ["subject_id", "eye", "factor", "structure", "threshold", "score", "flag"]


def records_frame(records) -> pd.DataFrame:
    return pd.DataFrame([r.__dict__ for r in records], columns=RECORD_COLUMNS)
