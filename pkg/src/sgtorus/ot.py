"""Semi-discrete optimal transport from Lebesgue measure on T^2 to a Dirac cloud.

Weights are found by damped Newton on the cell-area map a(w). The solver
fixes the additive gauge with w_0 = 0. Two independent oracles live here as
well: a pixel-grid dual ascent for tiny clouds and the exact 1-D monotone
rearrangement for clouds that only vary in the first coordinate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .laguerre import SPREAD_LIMIT, PowerDiagram, PowerLocator, build_diagram
from .torus import minimal_lift, split_lift

log = logging.getLogger(__name__)

MIN_TOL = 1e-12


class OTConvergenceError(RuntimeError):
    """Newton did not reach the requested tolerance."""

    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class PotentialSolve:
    weights: np.ndarray
    diagram: PowerDiagram
    masses: np.ndarray
    residual: float
    iterations: int
    tol: float
    _locator: list = field(default_factory=list, repr=False, compare=False)

    @property
    def areas(self) -> np.ndarray:
        return self.diagram.areas

    @property
    def barycenters(self) -> np.ndarray:
        return self.diagram.barycenters

    def locator(self) -> PowerLocator:
        if not self._locator:
            self._locator.append(PowerLocator(self.diagram.positions, self.weights))
        return self._locator[0]


def default_tol(masses) -> float:
    return max(1e-9 * float(np.min(masses)), MIN_TOL)


def area_jacobian(diagram: PowerDiagram) -> sp.csr_matrix:
    """Sparse dA/dw. Off-diagonal entries are -len/dist per shared edge."""
    n = diagram.n
    dist = np.hypot(diagram.edge_r[:, 0], diagram.edge_r[:, 1])
    val = diagram.edge_len / dist
    rows = np.concatenate([diagram.edge_i, diagram.edge_i])
    cols = np.concatenate([diagram.edge_j, diagram.edge_i])
    data = np.concatenate([-val, val])
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def _newton_direction(diagram: PowerDiagram, rhs: np.ndarray) -> np.ndarray:
    jac = area_jacobian(diagram)
    d = np.zeros(diagram.n)
    if diagram.n > 1:
        d[1:] = spsolve(jac[1:, 1:].tocsc(), rhs[1:])
    return d


def _offsets(diag: PowerDiagram) -> np.ndarray:
    return np.clip(diag.barycenters - diag.positions, -0.5, 0.5)


def solve_weights(cloud, tol: float | None = None, warm_start=None,
                  max_iter: int = 100, method: str = "binned",
                  centers=None) -> PotentialSolve:
    """Weights with |a_i(w) - m_i| <= tol for every atom, gauge w_0 = 0.

    ``centers`` (barycenter minus site, from a nearby earlier solve) only
    speed up the diagram builds.
    """
    pos = cloud.positions
    m = np.asarray(cloud.masses, dtype=float)
    n = len(m)
    if tol is None:
        tol = default_tol(m)
    if tol < MIN_TOL:
        raise ValueError(f"tol must be >= {MIN_TOL}")

    w = np.zeros(n) if warm_start is None else np.array(warm_start, dtype=float)
    if w.shape != (n,):
        raise ValueError("warm start needs one weight per atom")
    w -= w[0]
    if float(w.max() - w.min()) >= SPREAD_LIMIT:
        w = np.zeros(n)
    diag = build_diagram(pos, w, method, centers)
    if warm_start is not None and diag.areas.min() <= 0.0:
        log.debug("warm start has empty cells, restarting from w = 0")
        w = np.zeros(n)
        centers = None
        diag = build_diagram(pos, w, method)
    if diag.areas.min() <= 0.0:
        raise ValueError("empty Voronoi cell at w = 0; atoms are not distinct")

    floor = 0.5 * min(m.min(), diag.areas.min())
    err = diag.areas - m
    res = float(np.abs(err).max())
    it = 0
    while res > tol:
        if it >= max_iter:
            raise OTConvergenceError(f"no convergence in {max_iter} Newton steps", res)
        it += 1
        d = _newton_direction(diag, -err)
        if not np.all(np.isfinite(d)):
            raise OTConvergenceError("singular Newton system", res)
        norm0 = float(np.linalg.norm(err))
        tau = 1.0
        while True:
            wn = w + tau * d
            wn -= wn[0]
            if float(wn.max() - wn.min()) < SPREAD_LIMIT:
                dn = build_diagram(pos, wn, method, _offsets(diag))
                errn = dn.areas - m
                resn = float(np.abs(errn).max())
                ok = dn.areas.min() >= floor and (
                    resn <= tol or np.linalg.norm(errn) <= (1.0 - 0.5 * tau) * norm0)
                if ok:
                    break
            tau *= 0.5
            if tau < 1e-12:
                raise OTConvergenceError("Newton damping stalled", res)
        w, diag, err, res = wn, dn, errn, resn
    return PotentialSolve(weights=w, diagram=diag, masses=m, residual=res,
                          iterations=it, tol=tol)


def transport_map_eval(solve: PotentialSolve, x):
    """grad P at points x (any lift): atom ids and lifted targets.

    Returns (ids, lift_k, lifted_y) with lifted_y = y_id + lift_k, lift_k
    integer. Shifting x by h in Z^2 shifts lift_k by exactly h.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    canon, lift = split_lift(x)
    ids, shift = solve.locator().locate_lifted(canon)
    k = shift + lift.astype(np.int64)
    return ids, k, solve.diagram.positions[ids] + k


# oracles

def _periodic_cost(points, sites):
    v = minimal_lift(points[:, None, :], sites[None, :, :])
    return 0.5 * (v ** 2).sum(axis=-1)


def pixel_areas(positions, weights, grid: int) -> np.ndarray:
    """Fraction of G x G pixel centers assigned to each atom (lowest id on ties)."""
    g = (np.arange(grid) + 0.5) / grid
    pts = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    score = _periodic_cost(pts, np.asarray(positions)) - np.asarray(weights)[None, :]
    owner = np.argmin(score, axis=1)
    return np.bincount(owner, minlength=len(weights)) / len(pts)


def brute_force_weights(cloud, grid: int = 512, max_sweeps: int = 2000) -> np.ndarray:
    """Maximize the discretized Kantorovich dual by exact coordinate ascent.

    The dual is sum_p min_j (c_pj - w_j) / G^2 + sum_j m_j w_j over pixel
    centers p. Along coordinate j it is concave piecewise linear, maximized
    when the pixel count of cell j equals round(m_j G^2). Only for N <= 4.
    """
    pos = np.asarray(cloud.positions, dtype=float)
    m = np.asarray(cloud.masses, dtype=float)
    n = len(m)
    if n > 4:
        raise ValueError("brute-force oracle is limited to N <= 4 atoms")
    w = np.zeros(n)
    if n == 1:
        return w
    g = (np.arange(grid) + 0.5) / grid
    pts = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    cost = _periodic_cost(pts, pos)
    total = len(pts)
    target = np.rint(m * total).astype(int)
    # fix rounding so counts sum to the pixel total
    target[0] = total - target[1:].sum()
    for _ in range(max_sweeps):
        old = w.copy()
        for j in range(1, n):
            others = np.delete(np.arange(n), j)
            tau = cost[:, j] - np.min(cost[:, others] - w[others], axis=1)
            cnt = target[j]
            part = np.partition(tau, (cnt - 1, cnt))
            w[j] = 0.5 * (part[cnt - 1] + part[cnt])
        counts = np.bincount(np.argmin(cost - w, axis=1), minlength=n)
        # a fixed point may sit on a kink of the dual with counts off by a
        # few pixels; the area error is then still O(1/G)
        if np.abs(w - old).max() <= 1e-14 or np.array_equal(counts, target):
            break
    return w


@dataclass(frozen=True)
class Rearrangement1D:
    """Exact 1-D semi-discrete transport on the circle.

    Atom k (sorted by position) receives the interval [start_k, start_k + m_k];
    ``barycenters`` are the interval midpoints, lifted near the atoms.
    """

    sites: np.ndarray
    masses: np.ndarray
    starts: np.ndarray
    barycenters: np.ndarray
    cost: float


def rearrangement_1d(sites, masses) -> Rearrangement1D:
    """Monotone rearrangement of Lebesgue on [0,1) onto atoms on the circle.

    Atoms with equal coordinate are merged. Tries every cyclic starting atom
    and the cost-optimal rotation for each.
    """
    sites = np.asarray(sites, dtype=float)
    masses = np.asarray(masses, dtype=float)
    uniq, inv = np.unique(sites, return_inverse=True)
    mass = np.bincount(inv, weights=masses)
    n = len(uniq)
    best = None
    for s in range(n):
        order = np.r_[np.arange(s, n), np.arange(0, s)]
        y = uniq[order] + np.r_[np.zeros(n - s), np.ones(s)]
        mm = mass[order]
        c = np.r_[0.0, np.cumsum(mm)[:-1]]
        theta = float(np.sum(mm * (y - c - 0.5 * mm)))
        b = theta + c + 0.5 * mm
        cost = float(np.sum(mm * (0.5 * (b - y) ** 2 + mm ** 2 / 24.0)))
        if best is None or cost < best[0] - 1e-15:
            best = (cost, order, theta + c, b - (y - uniq[order]))
    cost, order, starts, bary = best
    inv_order = np.argsort(order)
    return Rearrangement1D(sites=uniq, masses=mass, starts=starts[inv_order],
                           barycenters=bary[inv_order], cost=cost)


def compare_with_grid_oracle(cloud, grid: int = 512, tol: float | None = None) -> dict:
    """Solver vs pixel-grid oracle on a tiny cloud: weights, areas and their gaps."""
    solve = solve_weights(cloud, tol)
    wb = brute_force_weights(cloud, grid)
    exact_at_oracle = build_diagram(cloud.positions, wb).areas if cloud.n > 1 else np.ones(1)
    pix = pixel_areas(cloud.positions, wb, grid)
    return {
        "n": cloud.n,
        "grid": grid,
        "solver_weights": solve.weights,
        "oracle_weights": wb,
        "solver_areas": solve.areas,
        "oracle_pixel_areas": pix,
        "exact_areas_at_oracle_weights": exact_at_oracle,
        "max_area_gap": float(np.abs(exact_at_oracle - solve.areas).max()),
        "max_pixel_area_gap": float(np.abs(pix - solve.areas).max()),
        "max_weight_gap": float(np.abs(wb - solve.weights).max()),
        "iterations": solve.iterations,
        "residual": solve.residual,
    }


def compare_with_rearrangement(cloud, tol: float | None = None) -> dict:
    """Solver barycenters vs the exact 1-D rearrangement for a cloud varying in y1 only.

    Compares barycenter offsets b_i - y_i: first components against the
    oracle interval midpoints, second components against zero.
    """
    solve = solve_weights(cloud, tol)
    y1 = cloud.positions[:, 0]
    ora = rearrangement_1d(y1, cloud.masses)
    idx = np.searchsorted(ora.sites, y1)
    off_oracle = ora.barycenters[idx] - ora.sites[idx]
    off = solve.barycenters - cloud.positions
    return {
        "n": cloud.n,
        "max_g1_gap": float(np.abs(off[:, 0] - off_oracle).max()),
        "max_g2": float(np.abs(off[:, 1]).max()),
        "iterations": solve.iterations,
        "residual": solve.residual,
    }
