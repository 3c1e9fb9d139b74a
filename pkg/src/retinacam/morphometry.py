"""Optic disc geometry and zone-resolved vascular morphometry.

Zones are annuli around the disc center measured from the disc margin:
zone B spans 0.5 to 1.0 disc diameters beyond the margin, zone C 0.5 to 2.0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.interpolate import make_lsq_spline
from sklearn.base import BaseEstimator, TransformerMixin

from . import caliber
from .errors import DegenerateFit, EmptyStructure, GeometryError, RetinaCamError, ZeroChord
from .raster import SegmentationBundle, check_mask, check_same_shape
from .vesselgraph import (Centerline, VesselGraph, build_graph, resample_arclength,
                          smooth_centerline)

ZONES = ("B", "C")
CLASSES = ("artery", "vein")
ZONE_MULTIPLIER = {"B": 1.0, "C": 2.0}
INFLECTION_HYSTERESIS = 1e-4
MIN_TORTUOSITY_POINTS = 10
MAX_KNOT_TURN = 0.5
MIN_KNOT_SPACING = 8.0
# fraction of arc length left out at each end when averaging squared curvature
CURVATURE_END_MARGIN = 0.1

GEOMETRY_FEATURES = ("disc_width_px", "disc_height_px", "cup_width_px", "cup_height_px",
                     "vertical_cdr", "horizontal_cdr")
VASCULAR_FEATURES = ("fd", "density", "width", "dist_tort", "sqcurv_tort", "tort_density")
CALIBER_FEATURES = ("crae_hubbard", "crve_hubbard", "avr_hubbard",
                    "crae_knudtson", "crve_knudtson", "avr_knudtson")

# the 24 base features; vascular and caliber ones exist once per zone
BASE_FEATURES = (GEOMETRY_FEATURES
                 + tuple(f"{c}_{f}" for c in CLASSES for f in VASCULAR_FEATURES)
                 + CALIBER_FEATURES)


def feature_column(base, zone):
    """CSV column holding ``base`` for ``zone``; disc geometry has no zone suffix."""
    if base in GEOMETRY_FEATURES:
        return base
    if base.startswith(("artery_", "vein_")):
        cls, feat = base.split("_", 1)
        return f"{cls}_{feat}_zone{zone}"
    return f"{base}_zone{zone}"


FEATURE_COLUMNS = tuple(dict.fromkeys(feature_column(b, z) for z in ZONES for b in BASE_FEATURES))


@dataclass(frozen=True)
class DiscGeometry:
    disc_width: int
    disc_height: int
    cup_width: int
    cup_height: int
    vertical_cdr: float
    horizontal_cdr: float
    center: tuple
    disc_diameter: float


@dataclass(frozen=True)
class ZoneSpec:
    zone: str
    inner_radius: float
    outer_radius: float


def _largest_component_bbox(mask):
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    rs, cs = ndimage.find_objects(labels)[int(np.argmax(sizes))]
    return rs.start, rs.stop - 1, cs.start, cs.stop - 1


def disc_cup_geometry(disc, cup) -> DiscGeometry:
    """Bounding-box dimensions of the largest disc and cup components."""
    disc, cup = check_mask(disc, "disc"), check_mask(cup, "cup")
    check_same_shape(disc, cup)
    box = _largest_component_bbox(disc)
    if box is None:
        raise EmptyStructure("optic disc mask is empty")
    r0, r1, c0, c1 = box
    dw, dh = int(c1 - c0 + 1), int(r1 - r0 + 1)
    cbox = _largest_component_bbox(cup & disc)
    cw, ch = (0, 0) if cbox is None else (int(cbox[3] - cbox[2] + 1), int(cbox[1] - cbox[0] + 1))
    return DiscGeometry(dw, dh, cw, ch, ch / dh, cw / dw,
                        ((c0 + c1) / 2.0, (r0 + r1) / 2.0), (dw + dh) / 2.0)


def zone_spec(g: DiscGeometry, zone) -> ZoneSpec:
    if zone not in ZONE_MULTIPLIER:
        raise ValueError(f"zone must be one of {ZONES}, got {zone!r}")
    r = g.disc_diameter / 2.0
    dd = g.disc_diameter
    return ZoneSpec(zone, r + 0.5 * dd, r + ZONE_MULTIPLIER[zone] * dd)


def zone_annulus(g: DiscGeometry, zone, shape) -> np.ndarray:
    spec = zone_spec(g, zone)
    h, w = shape
    cx, cy = g.center
    # squared distances keep the boundary test exact for integer geometry
    d2 = (np.arange(w)[None, :] - cx) ** 2 + (np.arange(h)[:, None] - cy) ** 2
    return (d2 >= spec.inner_radius ** 2) & (d2 <= spec.outer_radius ** 2)


def fractal_dimension(mask, region=None) -> float:
    """Box-counting dimension over dyadic box sizes from 2 to ``min(shape) / 4``."""
    mask = check_mask(mask)
    if region is not None:
        region = check_mask(region, "region")
        check_same_shape(mask, region)
        mask = mask & region
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EmptyStructure("no foreground pixels inside the region")
    sizes = []
    s = 2
    while s <= min(mask.shape) / 4:
        sizes.append(s)
        s *= 2
    if len(sizes) < 3:
        raise DegenerateFit(f"raster {mask.shape} admits only {len(sizes)} box sizes")
    ncols = mask.shape[1]
    counts = [np.unique((rows // s) * (ncols // s + 1) + cols // s).size for s in sizes]
    slope = np.polyfit(np.log(1.0 / np.asarray(sizes, float)), np.log(counts), 1)[0]
    return float(slope)


def vessel_density(mask, region) -> float:
    mask, region = check_mask(mask), check_mask(region, "region")
    check_same_shape(mask, region)
    area = np.count_nonzero(region)
    if area == 0:
        raise EmptyStructure("zone region is empty")
    return np.count_nonzero(mask & region) / area


def _inside(points, region):
    ij = np.rint(points).astype(np.int64)
    h, w = region.shape
    ok = (ij[:, 0] >= 0) & (ij[:, 0] < w) & (ij[:, 1] >= 0) & (ij[:, 1] < h)
    ok[ok] = region[ij[ok, 1], ij[ok, 0]]
    return ok


def average_width(graph: VesselGraph, region, vessel_class) -> float:
    """Mean of per-point widths over centerline points that fall in ``region``."""
    region = check_mask(region, "region")
    picked = [s.widths[_inside(s.centerline.points, region)] for s in graph.of_class(vessel_class)]
    values = np.concatenate(picked) if picked else np.empty(0)
    if values.size == 0:
        raise EmptyStructure(f"no {vessel_class} centerline points in region")
    return float(values.mean())


def distance_tortuosity(c: Centerline) -> float:
    chord = c.chord_length
    if chord <= 1e-12 * max(1.0, c.arc_length):
        raise ZeroChord("centerline endpoints coincide")
    return c.arc_length / chord


def _lsq_fit(s, q, length, spacing):
    nint = max(1, int(round(length / spacing)))
    knots = np.concatenate([np.zeros(4), np.linspace(0.0, length, nint + 1)[1:-1], np.full(4, length)])
    try:
        return make_lsq_spline(s, q[:, 0], knots, k=3), make_lsq_spline(s, q[:, 1], knots, k=3)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise GeometryError(f"spline fit failed: {exc}") from exc


def _max_turn(u, dx, dy, window):
    """Largest tangent rotation over any stretch of ``window`` arc length."""
    theta = np.unwrap(np.arctan2(dy, dx))
    if u[-1] <= window:
        return float(abs(theta[-1] - theta[0]))
    j = np.searchsorted(u, u + window)
    ok = j < len(u)
    return float(np.max(np.abs(theta[j[ok]] - theta[ok])))


def curvature_profile(c: Centerline, knot_spacing=40.0, oversample=4, max_turn=MAX_KNOT_TURN):
    """Signed curvature along a cubic least-squares spline fit of the centerline.

    The centerline is resampled at unit spacing and ``x(s)``, ``y(s)`` are fit
    with clamped cubic B-splines whose interior knots sit about
    ``knot_spacing`` apart.  Where the fitted curve turns by more than
    ``max_turn`` radians within one knot interval the spacing is tightened
    (never below 8 px) and the fit repeated, so tight bends are not flattened.
    Returns ``(u, kappa, speed, xy)`` sampled on a grid ``oversample`` times
    denser than the resampled points.
    """
    q = resample_arclength(c, 1.0).points
    if len(q) < 5:
        raise GeometryError("need at least five resampled points for curvature")
    s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(q, axis=0).T))])
    length = s[-1]
    u = np.linspace(0.0, length, oversample * len(q))
    spacing = knot_spacing
    for _ in range(4):
        sx, sy = _lsq_fit(s, q, length, spacing)
        dx, dy, ddx, ddy = sx(u, 1), sy(u, 1), sx(u, 2), sy(u, 2)
        speed = np.hypot(dx, dy)
        if np.any(speed == 0):
            raise GeometryError("spline has a stationary point")
        kappa = (dx * ddy - dy * ddx) / speed ** 3
        turn = _max_turn(u, dx, dy, spacing)
        wanted = max(MIN_KNOT_SPACING, max_turn * spacing / turn) if turn > 0 else spacing
        if wanted >= 0.9 * spacing:
            break
        spacing = wanted
    return u, kappa, speed, np.column_stack([sx(u), sy(u)])


def _difference_curvature(c: Centerline, window=5):
    q = smooth_centerline(resample_arclength(c, 1.0), window).points
    if len(q) < 5:
        raise GeometryError("need at least five resampled points for curvature")
    d1 = np.gradient(q, axis=0)
    d2 = np.gradient(d1, axis=0)
    speed = np.hypot(d1[:, 0], d1[:, 1])
    kappa = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / speed ** 3
    ds = np.hypot(*np.diff(q, axis=0).T)
    return kappa[1:-1], ds.sum()


def squared_curvature_tortuosity(c: Centerline, method="spline", knot_spacing=40.0) -> float:
    """Integrated squared curvature divided by arc length, in px^-2.

    The spline estimate averages over the interior of the curve, leaving out
    ``CURVATURE_END_MARGIN`` of the arc length at each end.
    ``method="difference"`` uses central differences on a 1 px resampled,
    5-point smoothed polyline.  It is exact on clean analytic curves but
    amplifies raster staircase noise badly, so the spline fit is the default.
    """
    if method == "difference":
        kappa, length = _difference_curvature(c)
        return float(np.sum(kappa ** 2) / length)
    if method != "spline":
        raise ValueError(f"unknown curvature method {method!r}")
    u, kappa, speed, _ = curvature_profile(c, knot_spacing)
    return _mean_squared_curvature(u, kappa, speed)


def _mean_squared_curvature(u, kappa, speed, margin=CURVATURE_END_MARGIN):
    # the last knot interval has one-sided support, so end curvature is poorly
    # determined; average over the interior only
    a = margin * u[-1]
    inner = (u >= a) & (u <= u[-1] - a)
    return float(np.trapezoid(kappa[inner] ** 2 * speed[inner], u[inner]) / np.trapezoid(speed[inner], u[inner]))


def inflection_points(u, kappa, hysteresis=INFLECTION_HYSTERESIS):
    """Parameter values where the curvature sign flips, ignoring |kappa| <= hysteresis."""
    sig = np.flatnonzero(np.abs(kappa) > hysteresis)
    if sig.size < 2:
        return np.empty(0)
    sgn = np.sign(kappa[sig])
    flips = np.flatnonzero(sgn[1:] != sgn[:-1])
    return 0.5 * (u[sig[flips]] + u[sig[flips + 1]])


def tortuosity_density_from_samples(u, xy, splits) -> float:
    """Grisan-style density from a densely sampled curve split at ``splits``."""
    n = len(splits) + 1
    if n == 1:
        return 0.0
    seg = np.hypot(*np.diff(xy, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    length = s[-1]
    bounds = np.concatenate([[u[0]], splits, [u[-1]]])
    total = 0.0
    for a, b in zip(bounds[:-1], bounds[1:]):
        ends = np.column_stack([np.interp([a, b], u, xy[:, 0]), np.interp([a, b], u, xy[:, 1])])
        arc = np.interp(b, u, s) - np.interp(a, u, s)
        chord = np.hypot(*(ends[1] - ends[0]))
        if chord <= 0:
            raise ZeroChord("sub-segment endpoints coincide")
        total += arc / chord - 1.0
    return float((n - 1) / n * total / length)


def tortuosity_density(c: Centerline, knot_spacing=40.0) -> float:
    u, kappa, _, xy = curvature_profile(c, knot_spacing)
    return tortuosity_density_from_samples(u, xy, inflection_points(u, kappa))


def segment_tortuosity(c: Centerline, knot_spacing=40.0):
    """``(arc_length, distance, squared-curvature, density)`` tortuosities of one segment."""
    smooth = smooth_centerline(resample_arclength(c, 1.0), 5)
    dist = distance_tortuosity(smooth)
    u, kappa, speed, xy = curvature_profile(c, knot_spacing)
    sq = _mean_squared_curvature(u, kappa, speed)
    dens = tortuosity_density_from_samples(u, xy, inflection_points(u, kappa))
    return smooth.arc_length, dist, sq, dens


def _zone_segments(graph, region, vessel_class):
    """Segments with at least half of their points inside ``region``."""
    return [s for s in graph.of_class(vessel_class)
            if _inside(s.centerline.points, region).mean() >= 0.5]


def zone_vessel_widths(graph, region, vessel_class, min_points=3):
    """Mean in-zone width of every segment with enough points inside the zone."""
    out = []
    for s in graph.of_class(vessel_class):
        inside = _inside(s.centerline.points, region)
        if inside.sum() >= min_points:
            out.append(float(s.widths[inside].mean()))
    return out


def graph_from_bundle(bundle: SegmentationBundle, width_method="chord") -> VesselGraph:
    segments = []
    for cls in CLASSES:
        segments.extend(build_graph(bundle.mask(cls), cls, width_method=width_method).segments)
    return VesselGraph(segments, bundle.shape)


def compute_record(bundle: SegmentationBundle, graph: VesselGraph = None, geom: DiscGeometry = None,
                   knot_spacing=40.0, min_points=MIN_TORTUOSITY_POINTS):
    """All morphometry columns for one eye.

    Returns ``(values, flags)``: a dict keyed by :data:`FEATURE_COLUMNS` with
    NaN for features that could not be computed, and a sorted list of
    ``column:reason`` flags explaining each NaN.
    """
    values = dict.fromkeys(FEATURE_COLUMNS, math.nan)
    flags = []
    if graph is None:
        graph = graph_from_bundle(bundle)
    if geom is None:
        try:
            geom = disc_cup_geometry(bundle.disc, bundle.cup)
        except EmptyStructure:
            flags.append("disc:empty")
            return values, sorted(flags) + [f"{c}:no_disc" for c in FEATURE_COLUMNS if c not in GEOMETRY_FEATURES]
    values.update(disc_width_px=geom.disc_width, disc_height_px=geom.disc_height,
                  cup_width_px=geom.cup_width, cup_height_px=geom.cup_height,
                  vertical_cdr=geom.vertical_cdr, horizontal_cdr=geom.horizontal_cdr)

    cache = {}
    for seg in graph.segments:
        if len(seg.centerline) < min_points:
            continue
        try:
            cache[id(seg)] = segment_tortuosity(seg.centerline, knot_spacing)
        except GeometryError:
            continue

    def attempt(column, fn):
        try:
            values[column] = float(fn())
        except RetinaCamError as exc:
            flags.append(f"{column}:{type(exc).__name__}")

    for zone in ZONES:
        region = zone_annulus(geom, zone, bundle.shape)
        widths = {}
        for cls in CLASSES:
            mask = bundle.mask(cls)
            col = lambda f: feature_column(f"{cls}_{f}", zone)  # noqa: E731
            attempt(col("fd"), lambda: fractal_dimension(mask, region))
            attempt(col("density"), lambda: vessel_density(mask, region))
            attempt(col("width"), lambda: average_width(graph, region, cls))
            rows = [cache[id(s)] for s in _zone_segments(graph, region, cls) if id(s) in cache]
            if rows:
                arr = np.asarray(rows)
                wts = arr[:, 0] / arr[:, 0].sum()
                for j, name in enumerate(("dist_tort", "sqcurv_tort", "tort_density"), start=1):
                    values[col(name)] = float(np.dot(wts, arr[:, j]))
            else:
                for name in ("dist_tort", "sqcurv_tort", "tort_density"):
                    flags.append(f"{col(name)}:EmptyStructure")
            widths[cls] = zone_vessel_widths(graph, region, cls)
        for method in caliber.METHODS:
            ce = {}
            for q, cls in (("crae", "artery"), ("crve", "vein")):
                attempt(f"{q}_{method}_zone{zone}",
                        lambda: caliber.central_equivalent(widths[cls], cls, method))
                ce[q] = values[f"{q}_{method}_zone{zone}"]
            if math.isfinite(ce["crae"]) and math.isfinite(ce["crve"]):
                values[f"avr_{method}_zone{zone}"] = caliber.avr(ce["crae"], ce["crve"])
            else:
                flags.append(f"avr_{method}_zone{zone}:EmptyStructure")
    return values, sorted(flags)


class MorphometryExtractor(TransformerMixin, BaseEstimator):
    """Turn segmentation bundles into a morphometry feature table.

    Stateless: ``fit`` only validates parameters.  ``transform`` takes an
    iterable of :class:`SegmentationBundle` and returns a DataFrame with one
    row per bundle, the columns in :data:`FEATURE_COLUMNS` and a ``flags``
    column.  Right eyes are mirrored first.
    """

    def __init__(self, width_method="chord", knot_spacing=40.0, min_tortuosity_points=MIN_TORTUOSITY_POINTS):
        self.width_method = width_method
        self.knot_spacing = knot_spacing
        self.min_tortuosity_points = min_tortuosity_points

    def fit(self, X=None, y=None):
        if self.width_method not in ("chord", "edt"):
            raise ValueError(f"width_method must be 'chord' or 'edt', got {self.width_method!r}")
        if not self.knot_spacing > 0:
            raise ValueError("knot_spacing must be positive")
        self.n_features_out_ = len(FEATURE_COLUMNS)
        return self

    def transform_one(self, bundle: SegmentationBundle):
        bundle = bundle.normalized()
        graph = graph_from_bundle(bundle, self.width_method)
        return compute_record(bundle, graph, knot_spacing=self.knot_spacing,
                              min_points=self.min_tortuosity_points)

    def transform(self, X):
        if not hasattr(self, "n_features_out_"):
            self.fit()
        rows = []
        for bundle in X:
            values, flags = self.transform_one(bundle)
            rows.append({"subject_id": bundle.subject_id, "eye": bundle.laterality,
                         **values, "flags": ";".join(flags)})
        return pd.DataFrame(rows, columns=["subject_id", "eye", *FEATURE_COLUMNS, "flags"])

    def get_feature_names_out(self, input_features=None):
        return np.asarray(FEATURE_COLUMNS, dtype=object)
