"""Parametric fundus phantoms with analytic ground truth, and synthetic cohorts.

Vessels are polar curves around the disc center,
``r(theta) = R0 + A sin(2 pi m t)`` with ``theta = theta0 + dtheta t``, stroked
with a hard-edged disc of the declared width.  Truth values come from dense
quadrature of the analytic curve and never touch the measurement pipeline.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.special import ndtr

from . import caliber
from .errors import OutOfBounds
from .learn.cohort import CATEGORICAL, CONTINUOUS, FACTORS
from .learn.split import stratified_split
from .morphometry import FEATURE_COLUMNS, INFLECTION_HYSTERESIS, feature_column
from .raster import STRUCTURES, SegmentationBundle, StructureKind, flip_horizontal

QUADRATURE_SAMPLES = 10_000
DEFAULT_SHAPE = (912, 912)

# development-set marginals of the twelve risk factors
CATEGORICAL_MARGINALS = {
    "sex": (54.68, 45.32),
    "sleeplessness": (26.25, 47.25, 26.49),
    "smoking": (56.66, 43.34),
    "alcohol": (19.58, 36.73, 43.69),
    "depression": (73.63, 26.37),
    "economic": (18.92, 49.57, 31.50),
}
CONTINUOUS_MARGINALS = {
    "age": (55.51, 8.22),
    "education": (17.00, 2.41),
    "bmi": (27.21, 4.72),
    "dbp": (81.90, 10.74),
    "sbp": (138.91, 19.56),
    "hba1c": (35.75, 6.43),
}
# mild, plausible dependence among the continuous factors
CONTINUOUS_CORRELATION = {("dbp", "sbp"): 0.7, ("age", "sbp"): 0.3, ("bmi", "dbp"): 0.3,
                          ("bmi", "hba1c"): 0.25, ("age", "hba1c"): 0.2, ("bmi", "sbp"): 0.25}


@dataclass(frozen=True)
class VesselSpec:
    vessel_class: str
    radius: float
    theta0: float
    dtheta: float
    amplitude: float = 0.0
    periods: float = 0.0
    width: float = 7.0
    width_end: float | None = None

    def polar(self, t):
        """Radius and its first two derivatives with respect to theta."""
        k = 2.0 * math.pi * self.periods / self.dtheta
        phase = 2.0 * math.pi * self.periods * t
        r = self.radius + self.amplitude * np.sin(phase)
        r1 = self.amplitude * k * np.cos(phase)
        r2 = -self.amplitude * k * k * np.sin(phase)
        return r, r1, r2

    def width_at(self, t):
        end = self.width if self.width_end is None else self.width_end
        return self.width + (end - self.width) * np.asarray(t)


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = DEFAULT_SHAPE
    disc_center: tuple = (456, 456)
    disc_axes: tuple = (40, 40)
    cup_axes: tuple = (20, 20)
    vessels: tuple = ()

    def __post_init__(self):
        if self.cup_axes[0] > self.disc_axes[0] or self.cup_axes[1] > self.disc_axes[1]:
            raise ValueError("cup axes must not exceed disc axes")
        if any(v.width < 1 or (v.width_end is not None and v.width_end < 1) for v in self.vessels):
            raise ValueError("vessel widths must be at least 1 px")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["shape"]), tuple(d["disc_center"]), tuple(d["disc_axes"]), tuple(d["cup_axes"]),
                   tuple(VesselSpec(**v) for v in d["vessels"]))


# --- rasterization -----------------------------------------------------------

def _ellipse(shape, center, axes):
    h, w = shape
    cx, cy = center
    a, b = axes
    if a <= 0 or b <= 0:
        return np.zeros(shape, dtype=bool)
    y, x = np.ogrid[:h, :w]
    # integer arithmetic keeps the boundary exact: (x-cx)^2 b^2 + (y-cy)^2 a^2 <= a^2 b^2
    return (x - cx) ** 2 * (b * b) + (y - cy) ** 2 * (a * a) <= (a * a) * (b * b)


def vessel_points(center, v: VesselSpec, n):
    t = np.linspace(0.0, 1.0, n)
    r, _, _ = v.polar(t)
    th = v.theta0 + v.dtheta * t
    return t, np.column_stack([center[0] + r * np.cos(th), center[1] + r * np.sin(th)])


def stroke_vessel(shape, center, v: VesselSpec) -> np.ndarray:
    """Pixels whose centers lie within half the local width of the curve."""
    h, w = shape
    length = abs(v.dtheta) * (v.radius + v.amplitude)
    t, pts = vessel_points(center, v, max(500, int(length * 5)))
    half = 0.5 * v.width_at(t)
    hmax = half.max()
    lo = np.floor(pts.min(0) - hmax - 1).astype(int)
    hi = np.ceil(pts.max(0) + hmax + 1).astype(int)
    if lo[0] < 0 or lo[1] < 0 or hi[0] >= w or hi[1] >= h:
        raise OutOfBounds("vessel stroke leaves the raster")
    # candidates: pixels near a sample, found by dilating the sampled path
    canvas = np.zeros((hi[1] - lo[1] + 1, hi[0] - lo[0] + 1), dtype=bool)
    ij = np.rint(pts).astype(np.int64) - lo
    canvas[ij[:, 1], ij[:, 0]] = True
    k = int(np.ceil(hmax + 1.0))
    oy, ox = np.ogrid[-k:k + 1, -k:k + 1]
    canvas = ndimage.binary_dilation(canvas, ox * ox + oy * oy <= k * k)
    yy, xx = np.nonzero(canvas)
    yy, xx = yy + lo[1], xx + lo[0]
    q = np.column_stack([xx, yy]).astype(float)
    d, idx = cKDTree(pts).query(q, distance_upper_bound=hmax + 1.0)
    ok = np.isfinite(d)
    ok[ok] = d[ok] <= half[idx[ok]]
    out = np.zeros(shape, dtype=bool)
    out[yy[ok], xx[ok]] = True
    return out


def rasterize_phantom(spec: PhantomSpec, seed=0, laterality="left", subject_id="") -> SegmentationBundle:
    """Hard-edged raster of a phantom; right eyes are stored mirrored.

    Rasterization is deterministic and does not consume ``seed``; the
    argument is kept so every generator shares one signature.
    """
    masks = {"artery": np.zeros(spec.shape, dtype=bool), "vein": np.zeros(spec.shape, dtype=bool)}
    for v in spec.vessels:
        masks[v.vessel_class] |= stroke_vessel(spec.shape, spec.disc_center, v)
    disc = _ellipse(spec.shape, spec.disc_center, spec.disc_axes)
    cup = _ellipse(spec.shape, spec.disc_center, spec.cup_axes)
    arrays = [masks["artery"], masks["vein"], disc, cup]
    if laterality == "right":
        arrays = [flip_horizontal(a) for a in arrays]
    return SegmentationBundle(*arrays, laterality=laterality, subject_id=subject_id)


# --- analytic truth ------------------------------------------------------------

def _trapz_cumulative(y, x):
    return np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))])


def vessel_truth(center, v: VesselSpec, n=QUADRATURE_SAMPLES) -> dict:
    """Arc length, chord and tortuosities of one vessel by dense quadrature."""
    t = np.linspace(0.0, 1.0, n)
    theta = v.theta0 + v.dtheta * t
    r, r1, r2 = v.polar(t)
    speed = np.sqrt(r * r + r1 * r1)
    kappa = np.sign(v.dtheta) * (r * r + 2 * r1 * r1 - r * r2) / speed ** 3
    s = _trapz_cumulative(speed * abs(v.dtheta), t)
    length = s[-1]
    xy = np.column_stack([center[0] + r * np.cos(theta), center[1] + r * np.sin(theta)])
    chord = float(np.hypot(*(xy[-1] - xy[0])))
    sq = float(np.trapezoid(kappa ** 2 * speed * abs(v.dtheta), t) / length)
    sig = np.flatnonzero(np.abs(kappa) > INFLECTION_HYSTERESIS)
    flips = np.flatnonzero(np.sign(kappa[sig][1:]) != np.sign(kappa[sig][:-1])) if sig.size > 1 else []
    splits = [0.5 * (s[sig[f]] + s[sig[f + 1]]) for f in flips]
    bounds = np.concatenate([[0.0], splits, [length]])
    ratios = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        pa = np.array([np.interp(a, s, xy[:, 0]), np.interp(a, s, xy[:, 1])])
        pb = np.array([np.interp(b, s, xy[:, 0]), np.interp(b, s, xy[:, 1])])
        ratios.append((b - a) / np.hypot(*(pb - pa)) - 1.0)
    nseg = len(ratios)
    density = (nseg - 1) / nseg * sum(ratios) / length if nseg > 1 else 0.0
    widths = v.width_at(t)
    return {"class": v.vessel_class, "arc_length": float(length), "chord": chord,
            "distance_tortuosity": float(length / chord), "sqcurv_tortuosity": sq,
            "inflections": int(len(splits)), "tortuosity_density": float(density),
            "mean_width": float(np.trapezoid(widths * speed, t) / np.trapezoid(speed, t)),
            "area": float(np.mean(widths) * length + math.pi * (widths[0] ** 2 + widths[-1] ** 2) / 8.0),
            "_xy": xy}


def _zone_radii(spec: PhantomSpec):
    a, b = spec.disc_axes
    dd = ((2 * a + 1) + (2 * b + 1)) / 2.0
    r = dd / 2.0
    return dd, {"B": (r + 0.5 * dd, r + 1.0 * dd), "C": (r + 0.5 * dd, r + 2.0 * dd)}


def _lattice_annulus_count(shape, center, inner, outer):
    """Number of pixel centers at distance [inner, outer] from an integer center."""
    h, w = shape
    cx, cy = center
    reach = int(math.ceil(outer))
    dx2 = (np.arange(max(0, cx - reach), min(w, cx + reach + 1)) - cx) ** 2
    dy2 = (np.arange(max(0, cy - reach), min(h, cy + reach + 1)) - cy) ** 2
    d2 = dy2[:, None] + dx2[None, :]
    return int(np.count_nonzero((d2 >= inner * inner) & (d2 <= outer * outer)))


def analytic_truth(spec: PhantomSpec) -> dict:
    """Ground truth for a phantom in its left-eye frame."""
    a, b = spec.disc_axes
    ca, cb = spec.cup_axes
    disc_w, disc_h = 2 * a + 1, 2 * b + 1
    cup_w, cup_h = (2 * ca + 1, 2 * cb + 1) if ca > 0 and cb > 0 else (0, 0)
    dd, radii = _zone_radii(spec)
    cx, cy = spec.disc_center
    vessels = [vessel_truth(spec.disc_center, v) for v in spec.vessels]
    zones = {}
    for zone, (inner, outer) in radii.items():
        count = _lattice_annulus_count(spec.shape, spec.disc_center, inner, outer)
        zinfo = {"inner_radius": inner, "outer_radius": outer, "region_pixels": count}
        for cls in ("artery", "vein"):
            members = []
            for v in vessels:
                if v["class"] != cls:
                    continue
                d = np.hypot(v["_xy"][:, 0] - cx, v["_xy"][:, 1] - cy)
                if np.mean((d >= inner) & (d <= outer)) >= 0.5:
                    members.append(v)
            if not members:
                zinfo[cls] = None
                continue
            L = np.array([m["arc_length"] for m in members])
            wts = L / L.sum()
            zinfo[cls] = {
                "n_vessels": len(members),
                "density": float(sum(m["area"] for m in members) / count),
                "width": float(np.dot(wts, [m["mean_width"] for m in members])),
                "dist_tort": float(np.dot(wts, [m["distance_tortuosity"] for m in members])),
                "sqcurv_tort": float(np.dot(wts, [m["sqcurv_tortuosity"] for m in members])),
                "tort_density": float(np.dot(wts, [m["tortuosity_density"] for m in members])),
                "widths": [m["mean_width"] for m in members],
            }
        for method in caliber.METHODS:
            try:
                res = caliber.caliber_summary(zinfo["artery"]["widths"], zinfo["vein"]["widths"], method, zone)
                zinfo[method] = {"crae": res.crae, "crve": res.crve, "avr": res.avr}
            except (TypeError, ValueError, ZeroDivisionError):
                zinfo[method] = None
        zones[zone] = zinfo
    for v in vessels:
        v.pop("_xy")
    return {
        "shape": list(spec.shape),
        "disc": {"width": disc_w, "height": disc_h, "center": [cx, cy], "diameter": dd},
        "cup": {"width": cup_w, "height": cup_h},
        "vertical_cdr": cup_h / disc_h,
        "horizontal_cdr": cup_w / disc_w,
        "vessels": vessels,
        "zones": zones,
    }


def truth_record(truth: dict) -> dict:
    """Truth values keyed by morphometry column; NaN where no truth exists."""
    rec = dict.fromkeys(FEATURE_COLUMNS, math.nan)
    rec.update(disc_width_px=truth["disc"]["width"], disc_height_px=truth["disc"]["height"],
               cup_width_px=truth["cup"]["width"], cup_height_px=truth["cup"]["height"],
               vertical_cdr=truth["vertical_cdr"], horizontal_cdr=truth["horizontal_cdr"])
    for zone, z in truth["zones"].items():
        for cls in ("artery", "vein"):
            if z[cls] is None:
                continue
            for feat in ("density", "width", "dist_tort", "sqcurv_tort", "tort_density"):
                rec[feature_column(f"{cls}_{feat}", zone)] = z[cls][feat]
        for method in caliber.METHODS:
            if z[method] is not None:
                for q in ("crae", "crve", "avr"):
                    rec[f"{q}_{method}_zone{zone}"] = z[method][q]
    return rec


# --- saliency ------------------------------------------------------------------

def synth_saliency(source, target_structures, inside_level=0.9, outside_level=0.1, noise_sd=0.0, seed=0,
                   levels=None):
    """Piecewise-constant saliency plus clipped Gaussian noise.

    ``source`` is a :class:`SegmentationBundle` or a :class:`PhantomSpec`.
    Pixels of any target structure take ``inside_level`` (or a per-structure
    value from ``levels``), all others ``outside_level``.
    """
    if not 0 <= outside_level <= 1 or not 0 <= inside_level <= 1:
        raise ValueError("levels must lie in [0, 1]")
    if inside_level <= outside_level:
        raise ValueError("inside_level must exceed outside_level")
    bundle = source if isinstance(source, SegmentationBundle) else rasterize_phantom(source)
    field_ = np.full(bundle.shape, float(outside_level))
    levels = dict(levels or {})
    for kind in target_structures:
        k = StructureKind(kind).value
        m = bundle.mask(k)
        field_[m] = np.maximum(field_[m], levels.get(k, inside_level))
    if noise_sd > 0:
        field_ = field_ + np.random.default_rng(seed).normal(0.0, noise_sd, field_.shape)
    return np.clip(field_, 0.0, 1.0)


def expected_cam_score(level, t, noise_sd):
    """Probability that a pixel at ``level`` plus N(0, sd^2) noise reaches ``t``."""
    if noise_sd == 0:
        return float(level >= t)
    return float(ndtr((level - t) / noise_sd))


# --- cohorts ---------------------------------------------------------------------

def _odd(x):
    return float(2 * round((x - 1) / 2) + 1)


def sample_phantom(rng, shape=DEFAULT_SHAPE, effects=None) -> PhantomSpec:
    """Random phantom: elliptical disc and cup, six arcs per vessel class.

    ``effects`` adds offsets to ``artery_width``, ``vein_width``,
    ``cup_ratio`` and ``amplitude``.
    """
    effects = effects or {}
    h, w = shape
    a = int(rng.integers(36, 47))
    b = a + int(rng.integers(-3, 4))
    cx = w // 2 + int(rng.integers(-15, 16))
    cy = h // 2 + int(rng.integers(-15, 16))
    ratio = float(np.clip(rng.uniform(0.3, 0.7) + effects.get("cup_ratio", 0.0), 0.05, 0.95))
    cup = (max(1, int(round(ratio * a))), max(1, int(round(ratio * b))))
    r = ((2 * a + 1) + (2 * b + 1)) / 4.0
    vessels = []
    base = rng.uniform(0.0, 2.0 * math.pi)
    widths = {"artery": (5, 7, 9), "vein": (7, 9, 11)}
    sector = 2.0 * math.pi / 3.0
    for ci, cls in enumerate(("artery", "vein")):
        for band in ("B", "C"):
            for k in range(3):
                radius = 2.5 * r + rng.uniform(-2, 2) if band == "B" else 4.0 * r + rng.uniform(-0.4, 0.4) * r
                length = rng.uniform(150, 260)
                dtheta = min(length / radius, sector - 0.25)
                length = dtheta * radius
                start = base + ci * sector / 2 + (0.5 if band == "C" else 0.0) + k * sector
                theta0 = start + rng.uniform(0.0, sector - 0.25 - dtheta + 1e-9)
                amp = float(np.clip(rng.uniform(0.0, 3.0) + effects.get("amplitude", 0.0), 0.0, 0.1 * r))
                periods = float(min(int(rng.integers(0, 3)), int(length // 120)))
                width = _odd(rng.choice(widths[cls])) + effects.get(f"{cls}_width", 0.0)
                if rng.random() < 0.5:
                    theta0, dtheta = theta0 + dtheta, -dtheta
                vessels.append(VesselSpec(cls, float(radius), float(theta0), float(dtheta), amp, periods,
                                          float(max(width, 1.0))))
    return PhantomSpec(tuple(shape), (cx, cy), (a, b), cup, tuple(vessels))


def _continuous_covariance():
    names = list(CONTINUOUS)
    corr = np.eye(len(names))
    for (p, q), rho in CONTINUOUS_CORRELATION.items():
        i, j = names.index(p), names.index(q)
        corr[i, j] = corr[j, i] = rho
    sd = np.array([CONTINUOUS_MARGINALS[n][1] for n in names])
    return np.outer(sd, sd) * corr


def sample_factors(n_subjects, rng, dependence=None) -> pd.DataFrame:
    """Risk factors drawn from the development-set marginals.

    ``dependence`` (in [0, 1)) replaces the default correlation structure of
    the continuous factors with a single shared latent factor of that
    loading squared, which makes neighbours informative for imputation tests.
    """
    cols = {"subject_id": [f"S{i:05d}" for i in range(n_subjects)]}
    for f, probs in CATEGORICAL_MARGINALS.items():
        p = np.asarray(probs) / np.sum(probs)
        cols[f] = np.asarray(CATEGORICAL[f], dtype=object)[rng.choice(len(p), size=n_subjects, p=p)]
    mean = np.array([CONTINUOUS_MARGINALS[n][0] for n in CONTINUOUS])
    if dependence is None:
        cov = _continuous_covariance()
    else:
        sd = np.array([CONTINUOUS_MARGINALS[n][1] for n in CONTINUOUS])
        corr = np.full((len(sd), len(sd)), dependence) + (1 - dependence) * np.eye(len(sd))
        cov = np.outer(sd, sd) * corr
    draws = rng.multivariate_normal(mean, cov, size=n_subjects, method="cholesky")
    for j, f in enumerate(CONTINUOUS):
        cols[f] = np.round(draws[:, j], 2)
    return pd.DataFrame(cols)[["subject_id", *FACTORS]]


def _subject_effects(row, effect_spec):
    """Sum of parameter deltas that apply to one subject."""
    morph, sal = {}, {}
    for factor, eff in (effect_spec or {}).items():
        value = row[factor]
        if pd.isna(value):
            continue
        if factor in CATEGORICAL:
            level = eff.get("level", CATEGORICAL[factor][-1])
            scale = 1.0 if value == level else 0.0
        else:
            mu, sd = CONTINUOUS_MARGINALS[factor]
            scale = (float(value) - mu) / sd
        for k, d in eff.get("morphometry", {}).items():
            morph[k] = morph.get(k, 0.0) + scale * d
        for k, d in eff.get("saliency", {}).items():
            sal[k] = sal.get(k, 0.0) + scale * d
    return morph, sal


@dataclass
class CohortSim:
    manifest: pd.DataFrame
    cohort: pd.DataFrame
    specs: dict = field(default_factory=dict)
    saliency: dict = field(default_factory=dict)


def generate_cohort(n_subjects, effect_spec=None, missing_rates=None, seed=0, shape=DEFAULT_SHAPE,
                    saliency_factors=(), dependence=None) -> CohortSim:
    """Synthetic cohort: risk factors, two phantom eyes per subject and optional saliency settings.

    ``effect_spec`` maps a factor to ``{"level": ..., "morphometry": {...},
    "saliency": {...}}``.  Categorical effects apply to subjects at
    ``level`` (default: last level); continuous effects scale with the
    subject's z-score.  ``missing_rates`` maps factors to MCAR rates applied
    at subject level after effects are injected.
    """
    rng = np.random.default_rng(seed)
    # saliency draws use their own stream so adding factors never changes the anatomy
    sal_rng = np.random.default_rng([seed, 1])
    subjects = sample_factors(n_subjects, rng, dependence)
    specs, saliency = {}, {}
    rows = []
    for _, row in subjects.iterrows():
        morph, sal = _subject_effects(row, effect_spec)
        for eye in ("left", "right"):
            specs[(row.subject_id, eye)] = sample_phantom(rng, shape, morph)
            for factor in saliency_factors:
                base = {"disc": 0.75, "cup": 0.75, "artery": 0.55, "vein": 0.55}
                lv = {k: float(np.clip(v + sal_rng.normal(0, 0.05) + sal.get(k, 0.0), 0.0, 1.0))
                      for k, v in base.items()}
                saliency[(row.subject_id, eye, factor)] = lv
            rows.append({"subject_id": row.subject_id, "eye": eye})
    for factor, rate in (missing_rates or {}).items():
        if not 0 <= rate < 1:
            raise ValueError("missing rates must lie in [0, 1)")
        drop = rng.random(n_subjects) < rate
        subjects.loc[drop, factor] = None if factor in CATEGORICAL else np.nan
    subjects["split"] = stratified_split(subjects, 0.8, seed).to_numpy()
    keys = pd.DataFrame(rows)
    cohort = keys.merge(subjects, on="subject_id", how="left")[["subject_id", "eye", *FACTORS, "split"]]
    manifest = keys.copy()
    for s in STRUCTURES:
        manifest[s.value] = [f"masks/{r.subject_id}_{r.eye}_{s.value}.png" for r in keys.itertuples()]
    manifest["quality"] = "good"
    for factor in saliency_factors:
        manifest[f"saliency_{factor}"] = [f"saliency/{r.subject_id}_{r.eye}_{factor}.pfm"
                                          for r in keys.itertuples()]
    return CohortSim(manifest, cohort, specs, saliency)


def simulate_cam_records(n_a, n_b, shift=None, factors=("smoking",), zero_rate=0.1, seed=0,
                         groups=("NC", "AD")):
    """CAM-Score records for two subject groups drawn from the closed-form score model.

    Each structure's score is the tail probability of a noisy saliency level
    (see :func:`expected_cam_score`); group ``groups[1]`` gets its scores
    shifted by ``shift[structure]``.  A fraction ``zero_rate`` of records is
    set to exactly zero, mimicking maps that miss the structure entirely.
    Returns ``(records, grouping)`` DataFrames.
    """
    rng = np.random.default_rng(seed)
    shift = shift or {}
    recs, grouping = [], []
    for g, n in zip(groups, (n_a, n_b)):
        for i in range(n):
            sid = f"{g}{i:04d}"
            grouping.append({"subject_id": sid, "group": g})
            for factor in factors:
                for s in STRUCTURES:
                    level = rng.uniform(0.35, 0.65)
                    score = expected_cam_score(level, 0.5, 0.15)
                    if g == groups[1]:
                        score += shift.get(s.value, 0.0)
                    score = float(np.clip(score, 0.0, 1.0))
                    if rng.random() < zero_rate:
                        score = 0.0
                    recs.append({"subject_id": sid, "eye": "left", "factor": factor, "structure": s.value,
                                 "threshold": 0.5, "score": score, "flag": ""})
    return pd.DataFrame(recs), pd.DataFrame(grouping)


def truth_json(spec: PhantomSpec, subject_id="", eye="left") -> str:
    truth = analytic_truth(spec)
    truth.update(subject_id=subject_id, eye=eye, spec=spec.to_dict())
    return json.dumps(truth, indent=1, sort_keys=True)


def with_effect(spec: PhantomSpec, **deltas) -> PhantomSpec:
    """Copy of ``spec`` with vessel width offsets, e.g. ``with_effect(s, vein_width=2)``."""
    vessels = tuple(replace(v, width=v.width + deltas.get(f"{v.vessel_class}_width", 0.0))
                    for v in spec.vessels)
    return replace(spec, vessels=vessels)
