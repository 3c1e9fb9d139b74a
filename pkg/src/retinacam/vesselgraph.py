"""Centerline extraction from binary vessel masks.

Points are stored as ``(x, y)`` = ``(column, row)`` in pixel units, with pixel
centers at integer coordinates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import GeometryError
from .raster import check_mask

# Neighbour order P2..P9 of the Zhang-Suen paper: N, NE, E, SE, S, SW, W, NW
_RING = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _build_luts():
    codes = np.arange(256)
    bits = (codes[:, None] >> np.arange(8)[None, :]) & 1
    p2, p3, p4, p5, p6, p7, p8, p9 = bits.T
    count = bits.sum(1)
    ring = np.concatenate([bits, bits[:, :1]], axis=1)
    transitions = ((ring[:, :-1] == 0) & (ring[:, 1:] == 1)).sum(1)
    base = (count >= 2) & (count <= 6) & (transitions == 1)
    step1 = base & (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
    step2 = base & (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
    # Yokoi 8-connectivity number over x1..x8 = E, NE, N, NW, W, SW, S, SE
    x = np.stack([p4, p3, p2, p9, p8, p7, p6, p5], axis=1)
    xb = 1 - x
    xb = np.concatenate([xb, xb[:, :1]], axis=1)
    yokoi = sum(xb[:, k] - xb[:, k] * xb[:, k + 1] * xb[:, (k + 2) % 8] for k in (0, 2, 4, 6))
    return step1, step2, count, yokoi


_ZS_STEP1, _ZS_STEP2, _NB_COUNT, _YOKOI = _build_luts()


def _codes(flat, idx, offsets):
    code = np.zeros(idx.shape, dtype=np.int64)
    for bit, off in enumerate(offsets):
        code |= flat[idx + off].astype(np.int64) << bit
    return code


def skeletonize(mask) -> np.ndarray:
    """Zhang-Suen thinning followed by removal of redundant simple points.

    The second pass deletes, in raster order, any pixel whose removal keeps
    local 8-connectivity (Yokoi number 1) and that is not a line end, so the
    result is strictly 8-thin and suitable for tracing.
    """
    mask = check_mask(mask)
    img = np.pad(mask, 1).astype(np.uint8)
    width = img.shape[1]
    offsets = [dr * width + dc for dr, dc in _RING]
    flat = img.ravel()
    idx = np.flatnonzero(flat)
    while True:
        changed = False
        while True:
            thinned = False
            for lut in (_ZS_STEP1, _ZS_STEP2):
                remove = lut[_codes(flat, idx, offsets)]
                if remove.any():
                    flat[idx[remove]] = 0
                    idx = idx[~remove]
                    thinned = True
            if not thinned:
                break
            changed = True
        code = _codes(flat, idx, offsets)
        candidates = idx[(_YOKOI[code] == 1) & (_NB_COUNT[code] >= 2)]
        for p in candidates:
            c = 0
            for bit, off in enumerate(offsets):
                c |= int(flat[p + off]) << bit
            if _YOKOI[c] == 1 and _NB_COUNT[c] >= 2:
                flat[p] = 0
                changed = True
        idx = idx[flat[idx] == 1]
        if not changed:
            break
    skel = img[1:-1, 1:-1].astype(bool)
    # thinning can erase small blobs outright; keep one deepest pixel of each
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n:
        lost = np.setdiff1d(np.arange(1, n + 1), np.unique(labels[skel]))
        if lost.size:
            edt = distance_transform(mask)
            for lab in lost:
                where = np.flatnonzero(labels.ravel() == lab)
                skel.ravel()[where[np.argmax(edt.ravel()[where])]] = True
    return skel


def _branch_representatives(degree, neighbours, width):
    """Map each branch pixel (degree >= 3) to the pixel of its 8-connected cluster nearest the centroid."""
    rep = {}
    for seed in sorted(p for p, d in degree.items() if d >= 3):
        if seed in rep:
            continue
        cluster, stack = [seed], [seed]
        rep[seed] = seed
        while stack:
            for r in neighbours(stack.pop()):
                if degree[r] >= 3 and r not in rep:
                    rep[r] = seed
                    cluster.append(r)
                    stack.append(r)
        cluster.sort()
        rows, cols = np.divmod(np.asarray(cluster), width)
        d2 = (rows - rows.mean()) ** 2 + (cols - cols.mean()) ** 2
        centre = cluster[int(np.argmin(d2))]
        for r in cluster:
            rep[r] = centre
    return rep


@dataclass(frozen=True)
class Centerline:
    points: np.ndarray
    vessel_class: str = "artery"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise GeometryError("centerline points must have shape (n, 2)")
        if len(pts) >= 2:
            keep = np.r_[True, np.any(np.diff(pts, axis=0) != 0, axis=1)]
            pts = pts[keep]
        if len(pts) < 2:
            raise GeometryError("a centerline needs at least two distinct points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @property
    def arc_length(self) -> float:
        return float(np.hypot(*np.diff(self.points, axis=0).T).sum())

    @property
    def chord_length(self) -> float:
        return float(np.hypot(*(self.points[-1] - self.points[0])))


@dataclass(frozen=True)
class VesselSegment:
    centerline: Centerline
    widths: np.ndarray

    @property
    def vessel_class(self):
        return self.centerline.vessel_class


@dataclass
class VesselGraph:
    segments: list = field(default_factory=list)
    shape: tuple = (0, 0)

    def of_class(self, vessel_class):
        return [s for s in self.segments if s.vessel_class == vessel_class]

    def to_json(self) -> str:
        return json.dumps({
            "shape": list(self.shape),
            "segments": [
                {"class": s.vessel_class,
                 "points": np.round(s.centerline.points, 4).tolist(),
                 "widths": np.round(s.widths, 4).tolist()}
                for s in self.segments
            ],
        })


def trace_segments(skeleton, vessel_class="artery") -> list:
    """Split a thin skeleton into simple paths between end and branch pixels.

    Every non-node pixel lands in exactly one segment; node pixels (degree
    other than two) terminate the segments that touch them.  Closed loops
    are returned with the first point repeated at the end.
    """
    skel = check_mask(skeleton, "skeleton")
    img = np.pad(skel, 1).astype(np.uint8)
    width = img.shape[1]
    offsets = [dr * width + dc for dr, dc in _RING]
    flat = img.ravel()
    idx = np.flatnonzero(flat)
    degree = dict(zip(idx.tolist(), _NB_COUNT[_codes(flat, idx, offsets)].tolist()))

    def neighbours(p):
        return [p + off for off in offsets if flat[p + off]]

    def to_points(path):
        rows, cols = np.divmod(np.asarray(path), width)
        return np.column_stack([cols - 1, rows - 1]).astype(np.float64)

    rep = _branch_representatives(degree, neighbours, width)

    def close(path):
        # segments touching a branch cluster end on the cluster's representative pixel
        if path[0] in rep and rep[path[0]] != path[0]:
            path.insert(0, rep[path[0]])
        if path[-1] in rep and rep[path[-1]] != path[-1]:
            path.append(rep[path[-1]])
        return path

    nodes = sorted(p for p, d in degree.items() if d != 2 and d > 0)
    visited = set()
    paths = []
    for n in nodes:
        for q in neighbours(n):
            if degree[q] != 2:
                if n < q and not (degree[n] >= 3 and degree[q] >= 3):
                    paths.append(close([n, q]))
                continue
            if q in visited:
                continue
            path, prev, cur = [n, q], n, q
            visited.add(q)
            while True:
                nxt = [r for r in neighbours(cur) if r != prev]
                if not nxt:
                    break
                r = nxt[0]
                if degree[r] != 2:
                    path.append(r)
                    break
                if r in visited:
                    break
                visited.add(r)
                path.append(r)
                prev, cur = cur, r
            paths.append(close(path))
    for start in sorted(p for p, d in degree.items() if d == 2 and p not in visited):
        if start in visited:
            continue
        path, prev, cur = [start], None, start
        visited.add(start)
        while True:
            nxt = [r for r in neighbours(cur) if r != prev and (r not in visited or r == start)]
            if not nxt:
                break
            r = start if start in nxt and len(path) > 2 else nxt[0]
            path.append(r)
            if r == start:
                break
            visited.add(r)
            prev, cur = cur, r
        paths.append(path)
    return [Centerline(to_points(p), vessel_class) for p in paths if len(p) >= 2]


def distance_transform(mask) -> np.ndarray:
    """Exact Euclidean distance from each foreground pixel to the nearest background pixel.

    Pixels outside the raster count as background.
    """
    mask = check_mask(mask)
    out = np.zeros(mask.shape, dtype=np.float64)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return out
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    # padding the bounding box with background keeps the transform exact
    crop = np.pad(mask[r0:r1, c0:c1], 1)
    out[r0:r1, c0:c1] = ndimage.distance_transform_edt(crop)[1:-1, 1:-1]
    return out


def _tangents(points, sigma=4.0):
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        raise GeometryError("need at least two points for a tangent")
    smooth = ndimage.gaussian_filter1d(pts, sigma, axis=0, mode="nearest") if len(pts) > 2 else pts
    t = np.gradient(smooth, axis=0)
    t[np.abs(t) < 1e-9] = 0.0
    norm = np.hypot(t[:, 0], t[:, 1])
    if np.any(norm == 0):
        raise GeometryError("degenerate tangent on centerline")
    return t / norm[:, None]


def _normals(points, sigma=4.0):
    t = _tangents(points, sigma)
    return np.column_stack([-t[:, 1], t[:, 0]])


def cast_rays(mask, origins, directions, max_distance=256.0):
    """Distance along each unit ray until it leaves the union of foreground pixel cells.

    A grid traversal visits the cells crossed by the ray in order, so the
    returned distance is exact for the piecewise-square pixel geometry.
    """
    mask = check_mask(mask)
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    h, w = mask.shape
    ix = np.floor(o[:, 0] + 0.5).astype(np.int64)
    iy = np.floor(o[:, 1] + 0.5).astype(np.int64)
    sx = np.sign(d[:, 0]).astype(np.int64)
    sy = np.sign(d[:, 1]).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(sx != 0, (ix + 0.5 * sx - o[:, 0]) / d[:, 0], np.inf)
        ty = np.where(sy != 0, (iy + 0.5 * sy - o[:, 1]) / d[:, 1], np.inf)
        dtx = np.where(sx != 0, 1.0 / np.abs(d[:, 0]), np.inf)
        dty = np.where(sy != 0, 1.0 / np.abs(d[:, 1]), np.inf)
    n = len(o)
    t = np.zeros(n)
    out = np.full(n, np.nan)
    active = np.ones(n, dtype=bool)
    while active.any():
        step_x = active & (tx <= ty)
        step_y = active & ~step_x
        t[step_x] = tx[step_x]
        ix[step_x] += sx[step_x]
        tx[step_x] += dtx[step_x]
        t[step_y] = ty[step_y]
        iy[step_y] += sy[step_y]
        ty[step_y] += dty[step_y]
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        fg = np.zeros(n, dtype=bool)
        fg[inside] = mask[iy[inside], ix[inside]]
        exited = active & ~fg
        out[exited] = t[exited]
        active &= ~exited
        stalled = active & (t > max_distance)
        out[stalled] = t[stalled]
        active &= ~stalled
    return out


def _check_inside(mask, points):
    ij = np.rint(points).astype(np.int64)
    h, w = mask.shape
    inside = (ij[:, 0] >= 0) & (ij[:, 0] < w) & (ij[:, 1] >= 0) & (ij[:, 1] < h)
    if not inside.all() or not mask[ij[:, 1], ij[:, 0]].all():
        raise GeometryError("centerline point lies outside the vessel mask")
    return ij


def estimate_widths(mask, c: Centerline, method="chord") -> np.ndarray:
    """Per-point vessel width in pixels.

    ``method="chord"`` measures the chord through the mask along the local
    normal; ``method="edt"`` uses ``2 * EDT - 1`` at the nearest pixel.  Both
    are exact on axis-aligned bars of odd width; only the chord is unbiased
    on oblique and curved vessels.
    """
    mask = check_mask(mask)
    pts = c.points
    ij = _check_inside(mask, pts)
    if method == "edt":
        edt = distance_transform(mask)
        return 2.0 * edt[ij[:, 1], ij[:, 0]] - 1.0
    if method != "chord":
        raise ValueError(f"unknown width method {method!r}")
    nrm = _normals(pts)
    return cast_rays(mask, pts, nrm) + cast_rays(mask, pts, -nrm)


def refine_centerline(mask, c: Centerline, half_length=2.5, iterations=2, edt=None) -> Centerline:
    """Move skeleton points onto the local mask centroid along the normal.

    Each point is shifted by the mean normal offset of foreground pixels in
    a tangent-aligned window ``2 * half_length`` long that spans the vessel.
    This removes most of the half-pixel staircase jitter of raster skeletons.
    ``edt`` may pass a precomputed :func:`distance_transform` of ``mask``.
    """
    mask = check_mask(mask)
    q = np.array(c.points, dtype=np.float64)
    if len(q) < 3:
        return c
    if edt is None:
        edt = distance_transform(mask)
    ij = np.rint(q).astype(np.int64).clip(0, np.array(mask.shape[::-1]) - 1)
    half_across = edt[ij[:, 1], ij[:, 0]] + 1.5
    radius = int(np.ceil(np.hypot(half_length, half_across.max()))) + 1
    oy, ox = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    ox, oy = ox.ravel(), oy.ravel()
    h, w = mask.shape
    for _ in range(iterations):
        nrm = _normals(q)
        tan = np.column_stack([nrm[:, 1], -nrm[:, 0]])
        ci = np.rint(q).astype(np.int64)
        px = ci[:, :1] + ox[None]
        py = ci[:, 1:] + oy[None]
        rx, ry = px - q[:, :1], py - q[:, 1:]
        along = rx * tan[:, :1] + ry * tan[:, 1:]
        across = rx * nrm[:, :1] + ry * nrm[:, 1:]
        inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        sel = inside & (np.abs(along) <= half_length) & (np.abs(across) <= half_across[:, None])
        sel[inside] &= mask[py[inside], px[inside]]
        count = sel.sum(1)
        offset = np.where(count > 0, (sel * across).sum(1) / np.maximum(count, 1), 0.0)
        q = q + nrm * offset[:, None]
    if np.array_equal(c.points[0], c.points[-1]):
        q[-1] = q[0]
    return Centerline(q, c.vessel_class)


def resample_arclength(c: Centerline, spacing=1.0) -> Centerline:
    """Resample at equal arc-length steps; both endpoints are kept exactly."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pts = c.points
    seg = np.hypot(*np.diff(pts, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0:
        raise GeometryError("cannot resample a zero-length centerline")
    n = max(1, int(round(total / spacing)))
    t = np.linspace(0.0, total, n + 1)
    out = np.column_stack([np.interp(t, s, pts[:, 0]), np.interp(t, s, pts[:, 1])])
    out[0], out[-1] = pts[0], pts[-1]
    return Centerline(out, c.vessel_class)


def smooth_centerline(c: Centerline, window=5) -> Centerline:
    """Centered moving average; the window shrinks symmetrically near the ends."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 1")
    pts = c.points
    n = len(pts)
    if window == 1 or n < 3:
        return Centerline(pts.copy(), c.vessel_class)
    i = np.arange(n)
    k = np.minimum(np.minimum(window // 2, i), n - 1 - i)
    cs = np.vstack([np.zeros((1, 2)), np.cumsum(pts, axis=0)])
    out = (cs[i + k + 1] - cs[i - k]) / (2 * k + 1)[:, None]
    out[0], out[-1] = pts[0], pts[-1]
    return Centerline(out, c.vessel_class)


def _neighbour_count(skeleton, x, y):
    h, w = skeleton.shape
    n = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            xx, yy = x + dx, y + dy
            if (dx or dy) and 0 <= xx < w and 0 <= yy < h and skeleton[yy, xx]:
                n += 1
    return n


def _extrapolate(pts, length, fit_length):
    """Continue the tail of ``pts`` by ``length`` along a quadratic in arc length."""
    s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    s = s - s[-1]
    use = s >= -fit_length
    deg = 2 if use.sum() >= 5 else 1
    cx = np.polyfit(s[use], pts[use, 0], deg)
    cy = np.polyfit(s[use], pts[use, 1], deg)
    step = np.linspace(0.0, length, int(np.ceil(length)) + 1)[1:]
    out = np.column_stack([np.polyval(cx, step), np.polyval(cy, step)])
    # anchor the continuation to the actual last point
    out += pts[-1] - np.array([np.polyval(cx, 0.0), np.polyval(cy, 0.0)])
    return out


def extend_free_ends(mask, c: Centerline, widths, free=(True, True), n_width=10, min_extension=0.25,
                     fit_length=20.0):
    """Push free chain ends out to the estimated end of the medial axis.

    Thinning leaves a chain that stops short of a rounded cap. A ray along the
    end tangent leaves the vessel about half a width beyond where the axis
    really ends, so the chain is prolonged to that point.
    """
    pts = c.points
    widths = np.asarray(widths, dtype=np.float64)
    if len(pts) < 3:
        return c, widths
    t = _tangents(pts)
    heads, tails = [], []
    for at_start, is_free in zip((True, False), free):
        if not is_free:
            continue
        i, sign = (0, -1.0) if at_start else (len(pts) - 1, 1.0)
        d = sign * t[i]
        norm = np.hypot(*d)
        if norm == 0:
            continue
        d = d / norm
        near = widths[:n_width] if at_start else widths[-n_width:]
        w = float(np.median(near))
        reach = cast_rays(mask, pts[i:i + 1], d[None, :])[0]
        ext = reach - 0.5 * w
        if np.isfinite(ext) and ext > min_extension:
            ext_pts = _extrapolate(pts if at_start is False else pts[::-1], ext, fit_length)
            if at_start:
                ext_pts = ext_pts[::-1]
            (heads if at_start else tails).append((ext_pts, np.full(len(ext_pts), w)))
    if not heads and not tails:
        return c, widths
    new_pts = np.vstack([p for p, _ in heads] + [pts] + [p for p, _ in tails])
    new_w = np.concatenate([w for _, w in heads] + [widths] + [w for _, w in tails])
    return Centerline(new_pts, c.vessel_class), new_w


def build_graph(mask, vessel_class="artery", refine=True, width_method="chord", extend_ends=True) -> VesselGraph:
    """Skeletonize, trace, refine and measure one vessel class."""
    mask = check_mask(mask)
    skeleton = skeletonize(mask)
    edt = distance_transform(mask) if refine else None
    h, w = mask.shape
    segments = []
    for line in trace_segments(skeleton, vessel_class):
        pts = line.points
        closed = len(pts) > 2 and np.array_equal(pts[0], pts[-1])
        free = tuple(not closed and _neighbour_count(skeleton, int(p[0]), int(p[1])) == 1
                     for p in (pts[0], pts[-1]))
        if refine:
            line = refine_centerline(mask, line, edt=edt)
            # refinement can only move points inside the vessel; guard anyway
            ij = np.rint(line.points).astype(np.int64)
            ok = (ij[:, 0] >= 0) & (ij[:, 0] < w) & (ij[:, 1] >= 0) & (ij[:, 1] < h)
            ok[ok] = mask[ij[ok, 1], ij[ok, 0]]
            if not ok.all():
                continue
        widths = estimate_widths(mask, line, width_method)
        if extend_ends and any(free):
            line, widths = extend_free_ends(mask, line, widths, free)
        segments.append(VesselSegment(line, widths))
    return VesselGraph(segments, mask.shape)
