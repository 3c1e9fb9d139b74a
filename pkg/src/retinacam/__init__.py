"""Retinal morphometry, saliency overlap scoring and risk-factor analysis for fundus segmentations."""
__version__ = "0.1.0"

from .camscore import CamScoreRecord, binarize, cam_score, cam_scores_for_bundle  # noqa: E402
from .caliber import avr, caliber_summary, central_equivalent, pair_hubbard, pair_knudtson  # noqa: E402
from .morphometry import FEATURE_COLUMNS, MorphometryExtractor, compute_record  # noqa: E402
from .raster import SegmentationBundle, StructureKind  # noqa: E402
from .vesselgraph import Centerline, VesselGraph, build_graph  # noqa: E402

__all__ = [
    "__version__", "CamScoreRecord", "binarize", "cam_score", "cam_scores_for_bundle",
    "avr", "caliber_summary", "central_equivalent", "pair_hubbard", "pair_knudtson",
    "FEATURE_COLUMNS", "MorphometryExtractor", "compute_record",
    "SegmentationBundle", "StructureKind", "Centerline", "VesselGraph", "build_graph",
]
