"""6-bit coordinate quantization and curve discretization helpers.

Shared by the data model (canonical sorting, validation), the hierarchy
extractor (bounding boxes) and the geometry kernel (rasterization), so
that every consumer sees the same discretized geometry.
"""

import math

import numpy as np

from .errors import RangeError, ValidationError

BINS = 64
COLLINEAR_EPS = 1e-9


def quantize_coord(v):
    """Map a normalized coordinate in [0,1] to its 6-bit bin index."""
    if not 0.0 <= v <= 1.0:
        raise RangeError(f"coordinate {v!r} outside [0, 1]")
    return min(BINS - 1, int(math.floor(v * BINS)))


def dequantize_coord(q):
    """Bin center of a 6-bit bin index."""
    if not 0 <= q <= BINS - 1:
        raise RangeError(f"bin index {q!r} outside [0, {BINS - 1}]")
    return (q + 0.5) / BINS


def dequantize_point(pt):
    return (dequantize_coord(pt[0]), dequantize_coord(pt[1]))


def fit_circle_3pts(p0, p1, p2):
    """Circle through three points, or None when they are collinear.

    Returns (cx, cy, r). Collinearity is decided by the circumcircle
    determinant against COLLINEAR_EPS.
    """
    ax, ay = p0
    bx, by = p1
    cx, cy = p2
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < COLLINEAR_EPS:
        return None
    a2 = ax * ax + ay * ay
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    r = math.hypot(ax - ux, ay - uy)
    return ux, uy, r


def fit_circle_4pts(pts):
    """Center = centroid of the four points, radius = mean center distance."""
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    cx = sum(xs) / 4.0
    cy = sum(ys) / 4.0
    r = sum(math.hypot(x - cx, y - cy) for x, y in zip(xs, ys)) / 4.0
    if r < COLLINEAR_EPS:
        raise ValidationError("degenerate circle: zero radius", code="degenerate_circle")
    return cx, cy, r


def sample_arc(p0, p1, p2, n):
    """Sample an arc from p0 to p2 passing through p1 with n segments.

    Collinear control points degrade to the straight segment p0->p2.
    Returned list includes both endpoints (n+1 points).
    """
    fit = fit_circle_3pts(p0, p1, p2)
    if fit is None:
        return [
            (p0[0] + (p2[0] - p0[0]) * t, p0[1] + (p2[1] - p0[1]) * t)
            for t in np.linspace(0.0, 1.0, n + 1)
        ]
    cx, cy, r = fit
    a0 = math.atan2(p0[1] - cy, p0[0] - cx)
    a1 = math.atan2(p1[1] - cy, p1[0] - cx)
    a2 = math.atan2(p2[1] - cy, p2[0] - cx)
    # choose the sweep direction that passes through the mid point
    ccw_mid = (a1 - a0) % (2 * math.pi)
    ccw_end = (a2 - a0) % (2 * math.pi)
    if ccw_mid <= ccw_end:
        sweep = ccw_end
    else:
        sweep = ccw_end - 2 * math.pi
    return [
        (cx + r * math.cos(a0 + sweep * t), cy + r * math.sin(a0 + sweep * t))
        for t in np.linspace(0.0, 1.0, n + 1)
    ]


def sample_circle(pts, n):
    """Sample a full circle defined by four points, starting at the first.

    Returns n+1 points with the last equal to the first (closed).
    """
    cx, cy, r = fit_circle_4pts(pts)
    a0 = math.atan2(pts[0][1] - cy, pts[0][0] - cx)
    out = [
        (cx + r * math.cos(a0 + 2 * math.pi * t), cy + r * math.sin(a0 + 2 * math.pi * t))
        for t in np.linspace(0.0, 1.0, n + 1)
    ]
    out[-1] = out[0]  # close exactly despite rounding
    return out


def sample_curve(points_q, n):
    """Discretize one quantized curve into real-valued sketch points.

    ``points_q`` is the curve's quantized point list; arity selects the
    curve type (2 line, 3 arc, 4 circle). The result includes both
    endpoints; for circles the polyline closes back on the start.
    """
    pts = [dequantize_point(p) for p in points_q]
    if len(pts) == 2:
        return [pts[0], pts[1]]
    if len(pts) == 3:
        return sample_arc(pts[0], pts[1], pts[2], n)
    if len(pts) == 4:
        return sample_circle(pts, n)
    raise ValidationError(f"invalid curve arity {len(pts)}", code="curve_arity")


def signed_area(poly):
    """Shoelace signed area of a polygon given as a point list."""
    a = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        a += x0 * y1 - x1 * y0
    return 0.5 * a


def points_in_polygon(points, poly):
    """Vectorized even-odd (ray crossing) test.

    ``points`` is an (N,2) array, ``poly`` an (M,2) closed or open ring.
    Returns a boolean array; points exactly on an edge are not guaranteed
    either way (callers test at cell centers away from edges).
    """
    pts = np.asarray(points, dtype=np.float64)
    ring = np.asarray(poly, dtype=np.float64)
    if len(ring) > 1 and np.allclose(ring[0], ring[-1]):
        ring = ring[:-1]
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(ring)
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        cond = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= cond & (x < xint)
    return inside
