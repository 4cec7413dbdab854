"""Periodic arithmetic on the flat torus T^2 = R^2 / Z^2.

Points are stored as canonical representatives in [0, 1)^2. Displacements
between points are "lifts": plain vectors in R^2 that are never reduced.
Cell geometry always happens in lifted coordinates around a site, so no
polygon ever has to be cut at the boundary of the unit square.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

# Rotation by +pi/2, the Coriolis matrix of the model.
J = np.array([[0.0, -1.0], [1.0, 0.0]])

# diam(T^2): the largest possible quotient distance.
TORUS_DIAMETER = math.sqrt(2.0) / 2.0

CLIP_EPS = 1e-12


def apply_J(v):
    """Rotate vectors (..., 2) by J, i.e. (v1, v2) -> (-v2, v1)."""
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


def canonicalize(p):
    """Reduce points of R^2 to their representatives in [0, 1)^2.

    Accepts a single point or an array of shape (..., 2).
    """
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("cannot canonicalize a non-finite point")
    r = np.mod(p, 1.0)
    # np.mod(-1e-20, 1.0) rounds to 1.0
    r[r >= 1.0] = 0.0
    return r


def split_lift(p):
    """Split raw points into (canonical part, integer lift) with p ~ canon + lift."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("cannot canonicalize a non-finite point")
    lift = np.floor(p)
    canon = p - lift
    wrap = canon >= 1.0
    canon[wrap] = 0.0
    lift[wrap] += 1.0
    return canon, lift


def minimal_lift(p, q):
    """Shortest displacement v with p + v = q (mod Z^2).

    Each component lands in [-1/2, 1/2); exact ties at distance 1/2 go to
    -1/2, which is the lexicographically smallest of the minimal lifts.
    Broadcasts over leading dimensions.
    """
    v = np.asarray(q, dtype=float) - np.asarray(p, dtype=float)
    return v - np.floor(v + 0.5)


def torus_distance(p, q):
    """Quotient distance d_T2(p, q); never exceeds sqrt(2)/2."""
    return np.linalg.norm(minimal_lift(p, q), axis=-1)


def polygon_area_centroid(poly):
    """Signed area and centroid of a simple polygon given as (n, 2) vertices.

    Counterclockwise orientation gives positive area. Degenerate polygons
    return area 0 and the vertex mean as centroid.
    """
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 3:
        c = poly.mean(axis=0) if len(poly) else np.zeros(2)
        return 0.0, c
    # shoelace relative to the first vertex for accuracy
    o = poly[0]
    x = poly[:, 0] - o[0]
    y = poly[:, 1] - o[1]
    xn = np.roll(x, -1)
    yn = np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if area == 0.0:
        return 0.0, poly.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return area, np.array([cx + o[0], cy + o[1]])


@njit(cache=True)
def clip_kernel(vx, vy, lab, n, nx, ny, c, newlab, ox, oy, olab, eps):
    """Sutherland-Hodgman step: keep {z : nx*z_x + ny*z_y - c <= eps}.

    (nx, ny) must be a unit normal. lab[k] labels the edge from vertex k to
    vertex k+1; the output keeps labels consistent and tags the new edge
    along the clipping line with ``newlab``. Returns the output vertex count.
    A polygon with every vertex inside is copied unchanged.
    """
    m = 0
    for k in range(n):
        k1 = k + 1
        if k1 == n:
            k1 = 0
        px = vx[k]
        py = vy[k]
        qx = vx[k1]
        qy = vy[k1]
        fp = nx * px + ny * py - c
        fq = nx * qx + ny * qy - c
        if fp <= eps:
            ox[m] = px
            oy[m] = py
            olab[m] = lab[k]
            m += 1
            if fq > eps:
                t = fp / (fp - fq)
                if t < 0.0:
                    t = 0.0
                ox[m] = px + t * (qx - px)
                oy[m] = py + t * (qy - py)
                olab[m] = newlab
                m += 1
        elif fq <= eps:
            t = fp / (fp - fq)
            if t > 1.0:
                t = 1.0
            ox[m] = px + t * (qx - px)
            oy[m] = py + t * (qy - py)
            olab[m] = lab[k]
            m += 1
    return m


def clip_polygon_halfplane(poly, normal, offset, eps=CLIP_EPS):
    """Intersect a convex CCW polygon with the half-plane {x : normal.x <= offset}.

    Returns the clipped polygon as an (m, 2) array, possibly empty. The
    result stays counterclockwise; zero-area output is returned as is.
    """
    poly = np.asarray(poly, dtype=float).reshape(-1, 2)
    normal = np.asarray(normal, dtype=float)
    norm = math.hypot(normal[0], normal[1])
    if norm == 0.0:
        raise ValueError("half-plane normal must be nonzero")
    n = len(poly)
    vx = np.ascontiguousarray(poly[:, 0])
    vy = np.ascontiguousarray(poly[:, 1])
    lab = np.zeros(n, dtype=np.int64)
    ox = np.empty(2 * n + 2)
    oy = np.empty(2 * n + 2)
    olab = np.empty(2 * n + 2, dtype=np.int64)
    m = clip_kernel(vx, vy, lab, n, normal[0] / norm, normal[1] / norm,
                    float(offset) / norm, 1, ox, oy, olab, eps)
    return np.column_stack([ox[:m], oy[:m]])
