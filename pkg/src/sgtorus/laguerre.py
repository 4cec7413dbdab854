"""Periodic Laguerre (power) diagrams of weighted atoms on the torus.

Cell i is {x : d(x, y_i)^2/2 - w_i <= d(x, y_j)^2/2 - w_j for all j}. Each
cell is built by clipping the unit square centered at y_i against the power
bisectors of the lifted copies y_j + H lying in the 3x3 block around y_i.

Bisectors are processed in increasing order of their distance from the site
(ties by candidate code); clipping stops at the first bisector farther than
the current polygon radius, since it and every later one cannot cut. The
reference path scores all 9N candidates per site. The binned path gathers
only nearby candidates and proves that none of the skipped ones could have
been processed, so both paths perform the same clips in the same order and
return identical bits.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

from .torus import CLIP_EPS, clip_kernel

MAXV = 48
SPREAD_LIMIT = 0.25


class WeightSpreadError(ValueError):
    """max(w) - min(w) is too large for the site-centered window to be valid."""


def set_threads_from_env() -> int:
    """Cap numba workers by SG_TORUS_THREADS when set."""
    import numba

    val = os.environ.get("SG_TORUS_THREADS")
    if val:
        n = max(1, min(int(val), numba.config.NUMBA_NUM_THREADS))
        numba.set_num_threads(n)
    return numba.get_num_threads()


@njit(cache=True)
def _clip_sorted(rx, ry, s, key, order, count, code, i, cx, cy, maxv, eps,
                 vx, vy, lab, bx, by, blab):
    """Clip the site-centered unit square by candidates sorted on ``key``.

    key = distance of the bisector from the center (cx, cy), so clipping can
    stop once key exceeds the polygon radius about that center. Returns
    (vertex count, radius about the center, overflow flag); the polygon is
    left in vx, vy, lab.
    """
    base = i * 9
    # square, CCW, edges tagged with the self copies they coincide with
    vx[0] = -0.5
    vy[0] = -0.5
    lab[0] = base + 1 * 3 + 0      # h = (0, -1)
    vx[1] = 0.5
    vy[1] = -0.5
    lab[1] = base + 2 * 3 + 1      # h = (1, 0)
    vx[2] = 0.5
    vy[2] = 0.5
    lab[2] = base + 1 * 3 + 2      # h = (0, 1)
    vx[3] = -0.5
    vy[3] = 0.5
    lab[3] = base + 0 * 3 + 1      # h = (-1, 0)
    n = 4
    radius = 0.0
    for k in range(4):
        rr = math.sqrt((vx[k] - cx) ** 2 + (vy[k] - cy) ** 2)
        if rr > radius:
            radius = rr
    for t in range(count):
        c = order[t]
        if key[c] > radius:
            break
        d = math.sqrt(rx[c] * rx[c] + ry[c] * ry[c])
        m = clip_kernel(vx, vy, lab, n, rx[c] / d, ry[c] / d, s[c], code[c],
                        bx, by, blab, eps)
        if m >= maxv:
            return m, radius, True
        n = m
        radius = 0.0
        for k in range(n):
            vx[k] = bx[k]
            vy[k] = by[k]
            lab[k] = blab[k]
            rr = math.sqrt((bx[k] - cx) ** 2 + (by[k] - cy) ** 2)
            if rr > radius:
                radius = rr
        if n == 0:
            break
    return n, radius, False


@njit(cache=True)
def _sorted_order(key, code, count):
    o1 = np.argsort(code[:count])
    o2 = np.argsort(key[:count][o1], kind="mergesort")
    return o1[o2]


@njit(cache=True)
def _reference_site(i, pos, w, cx, cy, maxv, eps, vx, vy, lab):
    n_atoms = pos.shape[0]
    total = 9 * n_atoms
    rx = np.empty(total)
    ry = np.empty(total)
    s = np.empty(total)
    key = np.empty(total)
    code = np.empty(total, dtype=np.int64)
    cnt = 0
    for j in range(n_atoms):
        dx = pos[j, 0] - pos[i, 0]
        dy = pos[j, 1] - pos[i, 1]
        fx = math.floor(dx + 0.5)
        fy = math.floor(dy + 0.5)
        for hx in range(-1, 2):
            for hy in range(-1, 2):
                if j == i and hx == 0 and hy == 0:
                    continue
                ax = dx + (hx - fx)
                ay = dy + (hy - fy)
                d = math.sqrt(ax * ax + ay * ay)
                sc = 0.5 * d + (w[i] - w[j]) / d
                rx[cnt] = ax
                ry[cnt] = ay
                s[cnt] = sc
                key[cnt] = sc - (ax * cx + ay * cy) / d
                code[cnt] = j * 9 + (hx + 1) * 3 + (hy + 1)
                cnt += 1
    order = _sorted_order(key, code, cnt)
    bx = np.empty(2 * maxv + 8)
    by = np.empty(2 * maxv + 8)
    blab = np.empty(2 * maxv + 8, dtype=np.int64)
    return _clip_sorted(rx, ry, s, key, order, cnt, code, i, cx, cy, maxv, eps,
                        vx, vy, lab, bx, by, blab)


@njit(cache=True)
def _bin_bound(lbx, lby, px, py, wi, cx, cy, nb, bmax_b):
    """Lower bound of key over sites of one lifted bin.

    key = d/2 - (w_j - w_i + c.r)/d where r ranges over the bin box
    relative to the site; d/2 - u/d is increasing in d for u >= 0.
    """
    bw = 1.0 / nb
    x0 = lbx * bw - px
    x1 = x0 + bw
    y0 = lby * bw - py
    y1 = y0 + bw
    gx = x0 if x0 > 0.0 else (-x1 if x1 < 0.0 else 0.0)
    gy = y0 if y0 > 0.0 else (-y1 if y1 < 0.0 else 0.0)
    dmin = math.sqrt(gx * gx + gy * gy)
    u = bmax_b - wi + max(cx * x0, cx * x1) + max(cy * y0, cy * y1)
    if u <= 0.0:
        return 0.5 * dmin
    if dmin <= 0.0:
        return -np.inf
    return 0.5 * dmin - u / dmin


@njit(cache=True)
def _ring_bound(bxi, byi, px, py, wi, cx, cy, k, kcap, nb, bmax, wmax):
    """Lower bound of key over every candidate outside the Chebyshev box k."""
    bw = 1.0 / nb
    cn = math.sqrt(cx * cx + cy * cy)
    best = np.inf
    for r in range(k + 1, kcap + 1):
        d = (r - 1) * bw
        if d <= 0.0:
            return -np.inf
        # crude bound valid for ring r and beyond
        glob = 0.5 * d - max(wmax - wi, 0.0) / d - cn
        if glob >= best:
            break
        for ox in range(-r, r + 1):
            step = 1 if (ox == -r or ox == r) else 2 * r
            oy = -r
            while oy <= r:
                lbx = bxi + ox
                lby = byi + oy
                b = (lbx % nb) * nb + lby % nb
                if bmax[b] > -np.inf:
                    val = _bin_bound(lbx, lby, px, py, wi, cx, cy, nb, bmax[b])
                    if val < best:
                        best = val
                oy += step
    return best


@njit(cache=True)
def _binned_site(i, pos, w, cx, cy, wmax, nb, bin_start, bin_sites, bmax, r_guess,
                 maxv, eps, vx, vy, lab):
    bw = 1.0 / nb
    px = pos[i, 0]
    py = pos[i, 1]
    bxi = min(int(px * nb), nb - 1)
    byi = min(int(py * nb), nb - 1)
    wi = w[i]
    kcap = int(math.ceil(1.5 * nb)) + 1
    bx = np.empty(2 * maxv + 8)
    by = np.empty(2 * maxv + 8)
    blab = np.empty(2 * maxv + 8, dtype=np.int64)
    rg = r_guess
    k = 1
    while True:
        complete = k >= kcap
        if complete:
            k = kcap
            lb = np.inf
        else:
            # margin absorbs rounding between the bound and computed keys
            lb = _ring_bound(bxi, byi, px, py, wi, cx, cy, k, kcap, nb, bmax, wmax) - 1e-12
            if lb <= rg:
                k += 1
                continue
        cnt = 0
        for ox in range(-k, k + 1):
            bxx = (bxi + ox) % nb
            for oy in range(-k, k + 1):
                b = bxx * nb + (byi + oy) % nb
                cnt += bin_start[b + 1] - bin_start[b]
        rx = np.empty(cnt)
        ry = np.empty(cnt)
        s = np.empty(cnt)
        key = np.empty(cnt)
        code = np.empty(cnt, dtype=np.int64)
        c = 0
        for ox in range(-k, k + 1):
            lbx = bxi + ox
            hxl = math.floor(lbx / nb)
            bxx = lbx - hxl * nb
            for oy in range(-k, k + 1):
                lby = byi + oy
                hyl = math.floor(lby / nb)
                byy = lby - hyl * nb
                b = bxx * nb + byy
                if bin_start[b + 1] == bin_start[b]:
                    continue
                # whole bin provably at key >= lb: it would be filtered below
                if _bin_bound(lbx, lby, px, py, wi, cx, cy, nb, bmax[b]) >= lb + 2e-12:
                    continue
                for q in range(bin_start[b], bin_start[b + 1]):
                    j = bin_sites[q]
                    dx = pos[j, 0] - px
                    dy = pos[j, 1] - py
                    fx = math.floor(dx + 0.5)
                    fy = math.floor(dy + 0.5)
                    hx = hxl + fx
                    hy = hyl + fy
                    if hx < -1 or hx > 1 or hy < -1 or hy > 1:
                        continue
                    if j == i and hx == 0 and hy == 0:
                        continue
                    ax = dx + (hx - fx)
                    ay = dy + (hy - fy)
                    d = math.sqrt(ax * ax + ay * ay)
                    sc = 0.5 * d + (wi - w[j]) / d
                    kc = sc - (ax * cx + ay * cy) / d
                    if kc >= lb:
                        continue
                    rx[c] = ax
                    ry[c] = ay
                    s[c] = sc
                    key[c] = kc
                    code[c] = j * 9 + (hx + 1) * 3 + (hy + 1)
                    c += 1
        order = _sorted_order(key, code, c)
        n, radius, over = _clip_sorted(rx, ry, s, key, order, c, code, i, cx, cy,
                                       maxv, eps, vx, vy, lab, bx, by, blab)
        if over or complete or radius < lb:
            return n, radius, over
        # radius >= lb > rg here, so this always grows
        rg = min(radius * 1.01, 2.0 * rg)


@njit(cache=True, parallel=True)
def _build_all(pos, w, centers, use_bins, nb, bin_start, bin_sites, bmax, r_guess,
               maxv, eps):
    n_atoms = pos.shape[0]
    nv = np.zeros(n_atoms, dtype=np.int64)
    vxs = np.zeros((n_atoms, maxv))
    vys = np.zeros((n_atoms, maxv))
    labs = np.full((n_atoms, maxv), -1, dtype=np.int64)
    over = np.zeros(n_atoms, dtype=np.bool_)
    wmax = w.max()
    for i in prange(n_atoms):
        vx = np.empty(2 * maxv + 8)
        vy = np.empty(2 * maxv + 8)
        lab = np.empty(2 * maxv + 8, dtype=np.int64)
        cx = centers[i, 0]
        cy = centers[i, 1]
        if use_bins:
            n, radius, ov = _binned_site(i, pos, w, cx, cy, wmax, nb, bin_start,
                                         bin_sites, bmax, r_guess, maxv, eps,
                                         vx, vy, lab)
        else:
            n, radius, ov = _reference_site(i, pos, w, cx, cy, maxv, eps, vx, vy, lab)
        over[i] = ov
        if not ov:
            nv[i] = n
            for k in range(n):
                vxs[i, k] = vx[k]
                vys[i, k] = vy[k]
                labs[i, k] = lab[k]
    return nv, vxs, vys, labs, over


def _bins(pos: np.ndarray, nb: int):
    b = np.minimum((pos * nb).astype(np.int64), nb - 1)
    key = b[:, 0] * nb + b[:, 1]
    order = np.argsort(key, kind="stable")
    counts = np.bincount(key, minlength=nb * nb)
    start = np.zeros(nb * nb + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    return start, order.astype(np.int64)


@dataclass(frozen=True)
class PowerDiagram:
    """Cells of a weighted cloud with the geometric data the solvers need.

    Vertices are stored relative to their site (site-centered lift), so the
    absolute lifted vertex k of cell i is ``positions[i] + verts[i, k]``.
    ``barycenters`` live in the same lift and may leave [0,1)^2.
    Edge arrays list every cell edge shared with another atom j != i:
    ``edge_i, edge_j, edge_len`` and the lifted offset ``edge_r`` of the
    neighbor copy relative to y_i.
    """

    positions: np.ndarray
    weights: np.ndarray
    nverts: np.ndarray
    verts: np.ndarray
    labels: np.ndarray
    areas: np.ndarray
    barycenters: np.ndarray
    edge_i: np.ndarray
    edge_j: np.ndarray
    edge_len: np.ndarray
    edge_r: np.ndarray
    method: str

    @property
    def n(self) -> int:
        return len(self.areas)

    def cell_polygon(self, i: int) -> np.ndarray:
        """Vertices of cell i in absolute lifted coordinates."""
        k = self.nverts[i]
        return self.positions[i] + self.verts[i, :k]

    def neighbors(self, min_len: float = 1e-14):
        """Sorted neighbor ids per atom, from edges longer than ``min_len``."""
        keep = self.edge_len > min_len
        out = [set() for _ in range(self.n)]
        for a, b in zip(self.edge_i[keep], self.edge_j[keep]):
            out[a].add(int(b))
        return [np.array(sorted(s), dtype=np.int64) for s in out]

    def diameters(self) -> np.ndarray:
        """Twice the max vertex distance from the site, an upper bound on cell diameter."""
        r = np.hypot(self.verts[..., 0], self.verts[..., 1])
        mask = np.arange(self.verts.shape[1])[None, :] < self.nverts[:, None]
        return 2.0 * np.where(mask, r, 0.0).max(axis=1)


def _decode(labels, pos):
    j = labels // 9
    h = labels % 9
    hx = h // 3 - 1
    hy = h % 3 - 1
    return j, hx, hy


def _assemble(pos, w, nv, vx, vy, labs, method) -> PowerDiagram:
    n_atoms, maxv = vx.shape
    idx = np.arange(maxv)[None, :]
    valid = idx < nv[:, None]
    nxt = np.where(idx + 1 < nv[:, None], idx + 1, 0)
    rows = np.arange(n_atoms)[:, None]
    vxn = vx[rows, nxt]
    vyn = vy[rows, nxt]
    cross = np.where(valid, vx * vyn - vxn * vy, 0.0)
    area = 0.5 * cross.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cx = ((vx + vxn) * cross).sum(axis=1) / (6.0 * area)
        cy = ((vy + vyn) * cross).sum(axis=1) / (6.0 * area)
    empty = area <= 0.0
    area = np.where(empty, 0.0, area)
    cx = np.where(empty, 0.0, cx)
    cy = np.where(empty, 0.0, cy)
    bary = pos + np.column_stack([cx, cy])

    elen = np.hypot(vxn - vx, vyn - vy)
    ei = np.broadcast_to(rows, labs.shape)[valid]
    lab = labs[valid]
    elen = elen[valid]
    j, hx, hy = _decode(lab, pos)
    other = j != ei
    ei, j, hx, hy, elen = ei[other], j[other], hx[other], hy[other], elen[other]
    dx = pos[j] - pos[ei]
    r = dx + (np.column_stack([hx, hy]) - np.floor(dx + 0.5))
    return PowerDiagram(
        positions=pos, weights=w, nverts=nv, verts=np.stack([vx, vy], axis=-1),
        labels=labs, areas=area, barycenters=bary,
        edge_i=ei.astype(np.int64), edge_j=j.astype(np.int64), edge_len=elen,
        edge_r=r, method=method)


def build_diagram(cloud, weights=None, method: str = "binned", centers=None) -> PowerDiagram:
    """Periodic power diagram of a cloud (or raw canonical positions) and weights.

    ``method`` is "binned" (default) or "reference"; both return identical
    cells. ``centers`` are optional per-cell offsets from the sites where
    the cells are expected to sit (e.g. previous barycenter minus site);
    they only steer the clipping order, which makes good guesses faster.
    Raises WeightSpreadError if max(w) - min(w) >= 1/4.
    """
    pos = np.ascontiguousarray(getattr(cloud, "positions", cloud), dtype=float).reshape(-1, 2)
    n_atoms = len(pos)
    w = (np.zeros(n_atoms) if weights is None
         else np.ascontiguousarray(weights, dtype=float).reshape(-1))
    if len(w) != n_atoms:
        raise ValueError("one weight per atom required")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    spread = float(w.max() - w.min())
    if spread >= SPREAD_LIMIT:
        raise WeightSpreadError(f"weight spread {spread:.4g} >= {SPREAD_LIMIT}")
    if method not in ("binned", "reference"):
        raise ValueError(f"unknown diagram method {method!r}")
    use_bins = method == "binned"
    if centers is None:
        centers = np.zeros((n_atoms, 2))
    centers = np.ascontiguousarray(centers, dtype=float).reshape(n_atoms, 2)
    if not np.all(np.isfinite(centers)) or np.abs(centers).max(initial=0.0) > 0.5:
        raise ValueError("cell centers must be finite offsets within the window")
    nb = max(1, int(math.sqrt(n_atoms / 2.0)))
    start, sites = _bins(pos, nb)
    bmax = np.full(nb * nb, -np.inf)
    b = np.minimum((pos * nb).astype(np.int64), nb - 1)
    np.maximum.at(bmax, b[:, 0] * nb + b[:, 1], w)
    r_guess = 1.5 / math.sqrt(n_atoms)
    nv, vx, vy, labs, over = _build_all(pos, w, centers, use_bins, nb, start, sites, bmax,
                                        r_guess, MAXV, CLIP_EPS)
    if over.any():
        raise RuntimeError(f"cell vertex buffer overflow at atoms {np.flatnonzero(over)[:5]}")
    return _assemble(pos, w, nv, vx, vy, labs, method)


class PowerLocator:
    """Answer "which cell contains x" for many points at once.

    Uses the lift |x - y|^2/2 - w = (|x - y|^2 + 2(W - w))/2 - W, which turns
    the power distance into a Euclidean one in 3-D, over the 3x3 copies.
    Exact ties go to the lowest atom id.
    """

    def __init__(self, positions, weights):
        self.positions = np.asarray(positions, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        n_atoms = len(self.positions)
        shifts = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)], dtype=float)
        lifted = (self.positions[None, :, :] + shifts[:, None, :]).reshape(-1, 2)
        height = np.sqrt(2.0 * (self.weights.max() - self.weights))
        pts3 = np.column_stack([lifted, np.tile(height, 9)])
        self._ids = np.tile(np.arange(n_atoms), 9)
        self._lifted = lifted
        self._tree = cKDTree(pts3)
        self._k = min(4, len(pts3))

    def locate(self, x) -> np.ndarray:
        """Atom index of the cell containing each canonical point x (P, 2)."""
        return self.locate_lifted(x)[0]

    def locate_lifted(self, x):
        """Atom ids and the integer shift of the winning copy y_i + shift.

        Points x should be canonical; shifts lie in {-1, 0, 1}^2.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        q = np.column_stack([x, np.zeros(len(x))])
        _, cand = self._tree.query(q, k=self._k)
        cand = cand.reshape(len(x), -1)
        ids = self._ids[cand]
        diff = x[:, None, :] - self._lifted[cand]
        power = 0.5 * (diff ** 2).sum(axis=-1) - self.weights[ids]
        best = power.min(axis=1, keepdims=True)
        tie = power <= best + 1e-15
        # lowest id among ties; among copies of that id, nearest copy
        key = np.where(tie, ids.astype(float) * 4.0 + np.minimum(power - best.ravel()[:, None], 1.0), np.inf)
        pick = np.argmin(key, axis=1)
        rows = np.arange(len(x))
        win = cand[rows, pick]
        shift = np.rint(self._lifted[win] - self.positions[self._ids[win]])
        return self._ids[win], shift.astype(np.int64)
