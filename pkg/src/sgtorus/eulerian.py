"""Physical-space reconstruction: pressure gradient, velocity and the flow map.

Per atom we keep bdot_i (rate of the barycenter along the atom trajectory)
and H_i (a PSD fit of the Hessian of the dual potential). Inside cell i

    grad p(x) = y_i - x,        u(x) = bdot_i + H_i J (b_i - x),

with x taken in the site-centered lift of cell i.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .laguerre import PowerDiagram, PowerLocator, build_diagram
from .measures import histogram_points
from .torus import apply_J, canonicalize, minimal_lift, split_lift

log = logging.getLogger(__name__)

TIKHONOV = 1e-10


def diagram_of(snap) -> PowerDiagram:
    """Rebuild the diagram of a Snapshot (or anything with positions/weights)."""
    centers = np.clip(snap.barycenters - snap.positions, -0.5, 0.5)
    return build_diagram(snap.positions, snap.weights, centers=centers)


def hessian_estimates(diagram: PowerDiagram, min_len: float = 1e-14):
    """Least-squares Hessian of the dual potential at every atom.

    Fits A with A r_ij ~ s_ij over Laguerre neighbors, where r_ij is the
    lifted site offset and s_ij the matching barycenter offset, then
    returns (H, flagged) with H the PSD part of (A + A^T)/2 and flagged
    marking atoms whose normal equations needed regularization.
    """
    n = diagram.n
    keep = diagram.edge_len > min_len
    ei = diagram.edge_i[keep]
    ej = diagram.edge_j[keep]
    r = diagram.edge_r[keep]
    off = diagram.barycenters - diagram.positions
    s = r + off[ej] - off[ei]
    rr = np.zeros((n, 2, 2))
    sr = np.zeros((n, 2, 2))
    np.add.at(rr, ei, r[:, :, None] * r[:, None, :])
    np.add.at(sr, ei, s[:, :, None] * r[:, None, :])
    det = rr[:, 0, 0] * rr[:, 1, 1] - rr[:, 0, 1] ** 2
    scale = np.maximum(rr[:, 0, 0] + rr[:, 1, 1], 1e-300)
    flagged = det <= 1e-10 * scale ** 2
    reg = rr + np.where(flagged, TIKHONOV, 0.0)[:, None, None] * np.eye(2)
    a = sr @ np.linalg.inv(reg)
    sym = 0.5 * (a + np.swapaxes(a, 1, 2))
    evals, evecs = np.linalg.eigh(sym)
    evals = np.maximum(evals, 0.0)
    h = (evecs * evals[:, None, :]) @ np.swapaxes(evecs, 1, 2)
    h = 0.5 * (h + np.swapaxes(h, 1, 2))
    return h, flagged


def trajectory_barycenters(snap) -> np.ndarray:
    """Barycenters carried along the continuous atom paths."""
    return snap.trajectory_positions + (snap.barycenters - snap.positions)


def barycenter_rates(prev, nxt) -> np.ndarray:
    """Central difference of trajectory barycenters between two snapshots."""
    if prev.positions.shape != nxt.positions.shape:
        raise ValueError("snapshots have different atom sets")
    dt = nxt.t - prev.t
    if dt == 0.0:
        raise ValueError("snapshots at equal times")
    return (trajectory_barycenters(nxt) - trajectory_barycenters(prev)) / dt


def dual_time_derivative(bdot, h, u) -> np.ndarray:
    """[d/dt grad P*](y_i) = bdot_i - H_i U_i (chain rule along the atom path)."""
    return bdot - np.einsum("nij,nj->ni", h, u)


@dataclass
class EulerianField:
    t: float
    positions: np.ndarray
    weights: np.ndarray
    barycenters: np.ndarray
    bdot: np.ndarray
    hessians: np.ndarray
    flagged: np.ndarray
    diagram: PowerDiagram | None = None
    _locator: list = field(default_factory=list, repr=False)

    @property
    def velocities(self) -> np.ndarray:
        return apply_J(self.positions - self.barycenters)

    @property
    def dual_rates(self) -> np.ndarray:
        return dual_time_derivative(self.bdot, self.hessians, self.velocities)

    def locator(self) -> PowerLocator:
        if not self._locator:
            self._locator.append(PowerLocator(self.positions, self.weights))
        return self._locator[0]


def snapshot_rates(snapshots, k: int) -> np.ndarray:
    """bdot at snapshot k: central difference inside, second-order one-sided at the ends."""
    n = len(snapshots)
    if n < 2:
        return np.zeros_like(snapshots[0].positions)
    if 0 < k < n - 1:
        return barycenter_rates(snapshots[k - 1], snapshots[k + 1])
    if n == 2:
        return barycenter_rates(snapshots[0], snapshots[1])
    if k == 0:
        s0, s1, s2 = snapshots[0], snapshots[1], snapshots[2]
        sign = 1.0
    else:
        s0, s1, s2 = snapshots[-1], snapshots[-2], snapshots[-3]
        sign = -1.0
    b0, b1, b2 = (trajectory_barycenters(s) for s in (s0, s1, s2))
    h = sign * (s1.t - s0.t)
    return (-3.0 * b0 + 4.0 * b1 - b2) / (2.0 * h)


def field_at(snapshots, k: int, diagram: PowerDiagram | None = None) -> EulerianField:
    snap = snapshots[k]
    if diagram is None:
        diagram = diagram_of(snap)
    h, flagged = hessian_estimates(diagram)
    return EulerianField(snap.t, snap.positions, snap.weights, snap.barycenters,
                         snapshot_rates(snapshots, k), h, flagged, diagram)


def _locate(fld, x):
    canon, lift = split_lift(np.atleast_2d(np.asarray(x, dtype=float)))
    ids, shift = fld.locator().locate_lifted(canon)
    return ids, shift + lift


def eval_u(fld: EulerianField, x) -> np.ndarray:
    """Velocity at points x; boundary points go to the lowest atom id."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    ids, k = _locate(fld, x)
    xs = x - k
    d = fld.barycenters[ids] - xs
    return fld.bdot[ids] + np.einsum("nij,nj->ni", fld.hessians[ids], apply_J(d))


def eval_pressure_gradient(fld, x) -> np.ndarray:
    """grad p(x) = (lifted y_i) - x for x in cell i. Works on fields and solves."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if isinstance(fld, EulerianField):
        ids, k = _locate(fld, x)
        pos = fld.positions
    else:
        canon, lift = split_lift(x)
        ids, shift = fld.locator().locate_lifted(canon)
        k = shift + lift
        pos = fld.diagram.positions
    return pos[ids] + k - x


def velocity_identity_residual(n: int = 100_000, seed: int = 0) -> float:
    """Max gap between the two per-cell velocity forms on random inputs.

    Form 1: bdot + H J (b - x). Form 2: (bdot - H U) + H J (y - x) with
    U = J (y - b). They agree because J (y - x) - U = J (b - x).
    """
    rng = np.random.default_rng(seed)
    bdot = rng.uniform(-1, 1, (n, 2))
    a = rng.uniform(-1, 1, (n, 2, 2))
    h = a @ np.swapaxes(a, 1, 2)
    b = rng.uniform(-1, 1, (n, 2))
    y = rng.uniform(-1, 1, (n, 2))
    x = rng.uniform(-1, 1, (n, 2))
    hv = lambda m, v: np.einsum("nij,nj->ni", m, v)
    u_dual = apply_J(y - b)
    form1 = bdot + hv(h, apply_J(b - x))
    form2 = (bdot - hv(h, u_dual)) + hv(h, apply_J(y - x))
    return float(np.abs(form1 - form2).max())


# exact cell quadrature

# 7-point degree-5 rule on the reference triangle (barycentric coordinates)
_A1, _B1 = 0.797426985353087, 0.101286507323456
_A2, _B2 = 0.059715871789770, 0.470142064105115
_TRI_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
_TRI_W = np.array([0.225, *[0.125939180544827] * 3, *[0.132394152788506] * 3])


def cell_quadrature(diagram: PowerDiagram):
    """Quadrature nodes of every cell, exact for quintic polynomials.

    Returns (owner, rel, weights): node positions ``rel`` are relative to
    the owning site (site-centered lift); weights sum to the cell areas.
    """
    nv = diagram.nverts
    verts = diagram.verts
    maxv = verts.shape[1]
    k = np.arange(1, maxv - 1)
    valid = k[None, :] < (nv[:, None] - 1)
    cell, col = np.nonzero(valid)
    kk = k[col]
    p0 = verts[cell, 0]
    p1 = verts[cell, kk]
    p2 = verts[cell, kk + 1]
    area = 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                  - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))
    nodes = (_TRI_BARY[None, :, 0, None] * p0[:, None, :]
             + _TRI_BARY[None, :, 1, None] * p1[:, None, :]
             + _TRI_BARY[None, :, 2, None] * p2[:, None, :])
    w = area[:, None] * _TRI_W[None, :]
    owner = np.repeat(cell, len(_TRI_W))
    return owner, nodes.reshape(-1, 2), w.reshape(-1)


def trig_wavevectors(kmax: int = 3) -> np.ndarray:
    """Half-plane representatives of the nonzero k with |k|_inf <= kmax."""
    ks = [(a, b) for a in range(-kmax, kmax + 1) for b in range(-kmax, kmax + 1)
          if a > 0 or (a == 0 and b > 0)]
    return np.array(ks, dtype=float)


@dataclass(frozen=True)
class SpatialIntegrals:
    """Per-snapshot integrals against e_k = exp(2 pi i k.x); real part is the
    cosine test function, imaginary part the sine one."""

    t: float
    a: np.ndarray      # (2, K): int J grad p e_k
    b: np.ndarray      # (2, K): int J grad p (u . grad e_k)
    c: np.ndarray      # (2, K): int (grad p + J u) e_k
    div: np.ndarray    # (K,):   int u . grad e_k


def spatial_integrals(fld: EulerianField, ks: np.ndarray, chunk: int = 40_000) -> SpatialIntegrals:
    diagram = fld.diagram if fld.diagram is not None else build_diagram(fld.positions, fld.weights)
    owner, rel, w = cell_quadrature(diagram)
    nk = len(ks)
    a = np.zeros((2, nk), complex)
    b = np.zeros((2, nk), complex)
    c = np.zeros((2, nk), complex)
    div = np.zeros(nk, complex)
    two_pi = 2.0 * np.pi
    for lo in range(0, len(w), chunk):
        o = owner[lo:lo + chunk]
        v = rel[lo:lo + chunk]
        ww = w[lo:lo + chunk]
        x = fld.positions[o] + v
        gp = -v
        off = fld.barycenters[o] - fld.positions[o]
        u = fld.bdot[o] + np.einsum("nij,nj->ni", fld.hessians[o], apply_J(off - v))
        e = np.exp(1j * two_pi * (x @ ks.T)) * ww[:, None]
        ugrad = 1j * two_pi * (u @ ks.T) * e
        jgp = apply_J(gp)
        a += jgp.T @ e
        b += jgp.T @ ugrad
        c += (gp + apply_J(u)).T @ e
        div += ugrad.sum(axis=0)
    return SpatialIntegrals(fld.t, a, b, c, div)


DEFAULT_HATS = ((0.2, 0.1), (0.3, 0.1), (0.2, 0.2), (0.0, 0.2))


def hat(t, center: float, half: float):
    """Piecewise-linear bump; the (0, h) hat is a one-sided ramp from t = 0."""
    t = np.asarray(t, dtype=float)
    return np.maximum(0.0, 1.0 - np.abs(t - center) / half)


@dataclass(frozen=True)
class WeakReport:
    wavevectors: np.ndarray
    hats: tuple
    momentum: np.ndarray     # (H, K, 2 funcs, 2 comps)
    divergence: np.ndarray   # (H, K, 2 funcs)

    @property
    def momentum_norm(self) -> float:
        return float(np.abs(self.momentum).max())

    @property
    def divergence_norm(self) -> float:
        return float(np.abs(self.divergence).max())

    def rows(self):
        """(test_id, k1, k2, residual) rows; test_id names equation, trig function and hat."""
        out = []
        for hi, (c, hw) in enumerate(self.hats):
            for ki, k in enumerate(self.wavevectors):
                for fi, fname in enumerate(("cos", "sin")):
                    tag = f"{fname}_hat{c:g}_{hw:g}"
                    for comp in range(2):
                        out.append((f"momentum{comp + 1}_{tag}", int(k[0]), int(k[1]),
                                    float(self.momentum[hi, ki, fi, comp])))
                    out.append((f"divergence_{tag}", int(k[0]), int(k[1]),
                                float(self.divergence[hi, ki, fi])))
        return out


def weak_residuals(snapshots, kmax: int = 3, hats=DEFAULT_HATS) -> WeakReport:
    """Assemble the weak momentum and divergence residuals over trig x hat tests."""
    ks = trig_wavevectors(kmax)
    ints = [spatial_integrals(field_at(snapshots, k), ks) for k in range(len(snapshots))]
    t = np.array([s.t for s in ints])
    a = np.array([s.a for s in ints])        # (T, 2, K)
    bc = np.array([s.b - s.c for s in ints])
    dv = np.array([s.div for s in ints])     # (T, K)
    mom = np.zeros((len(hats), len(ks), 2, 2))
    div = np.zeros((len(hats), len(ks), 2))
    dt = np.diff(t)
    for hi, (c0, hw) in enumerate(hats):
        if t[-1] < c0 + hw - 1e-12:
            raise ValueError(f"run ends at t={t[-1]:g} before hat ({c0}, {hw}) closes")
        eta = hat(t, c0, hw)
        deta = np.diff(eta) / dt
        # int A eta' dt with eta' constant per interval, trapezoid in A
        term1 = np.einsum("n,nck->ck", dt * deta, 0.5 * (a[1:] + a[:-1]))
        trap = np.r_[dt, 0.0] * 0.5 + np.r_[0.0, dt] * 0.5
        term2 = np.einsum("n,nck->ck", trap * eta, bc)
        init = a[0] * eta[0]
        res = term1 + term2 + init
        mom[hi, :, 0, :] = res.real.T
        mom[hi, :, 1, :] = res.imag.T
        d = np.einsum("n,nk->k", trap * eta, dv)
        div[hi, :, 0] = d.real
        div[hi, :, 1] = d.imag
    return WeakReport(ks, tuple(hats), mom, div)


def _tensor_trig(p):
    """Values and gradients of the 9 functions a(x1) b(x2), a, b in {1, cos, sin}(2 pi .)."""
    tp = 2.0 * np.pi
    one = np.ones(len(p))
    zero = np.zeros(len(p))
    f1 = [(one, zero), (np.cos(tp * p[:, 0]), -tp * np.sin(tp * p[:, 0])),
          (np.sin(tp * p[:, 0]), tp * np.cos(tp * p[:, 0]))]
    f2 = [(one, zero), (np.cos(tp * p[:, 1]), -tp * np.sin(tp * p[:, 1])),
          (np.sin(tp * p[:, 1]), tp * np.cos(tp * p[:, 1]))]
    val = np.stack([a[0] * b[0] for a in f1 for b in f2], axis=1)
    gx = np.stack([a[1] * b[0] for a in f1 for b in f2], axis=1)
    gy = np.stack([a[0] * b[1] for a in f1 for b in f2], axis=1)
    return val, gx, gy


def appendix_identity(snapshots, masses) -> float:
    """Max gap between d/dt sum m phi(y_i) (central difference) and sum m grad phi . U_i.

    Test functions: the 9 tensor products of {1, cos, sin}(2 pi x1) and
    {1, cos, sin}(2 pi x2); gaps are taken over interior snapshots.
    """
    m = np.asarray(masses)
    mom = np.array([m @ _tensor_trig(s.positions)[0] for s in snapshots])
    gap = 0.0
    for k in range(1, len(snapshots) - 1):
        lhs = (mom[k + 1] - mom[k - 1]) / (snapshots[k + 1].t - snapshots[k - 1].t)
        s = snapshots[k]
        _, gx, gy = _tensor_trig(s.positions)
        u = s.velocities
        rhs = m @ (gx * u[:, 0:1] + gy * u[:, 1:2])
        gap = max(gap, float(np.abs(lhs - rhs).max()))
    return gap


# flow map

@dataclass
class _SnapModel:
    t: float
    tree: cKDTree
    positions: np.ndarray
    offsets: np.ndarray
    hessians: np.ndarray
    trust: np.ndarray

    def dual_map(self, y):
        """Local affine grad P*(y) from the nearest atom, and the trust flag."""
        y = np.atleast_2d(y)
        dist, j = self.tree.query(canonicalize(y))
        r = minimal_lift(self.positions[j], y)
        ylift = y - r
        g = ylift + self.offsets[j] + np.einsum("nij,nj->ni", self.hessians[j], r)
        return g, dist > self.trust[j]

    def velocity(self, y):
        g, bad = self.dual_map(y)
        return apply_J(y - g), bad


def _models(snapshots):
    out = []
    for s in snapshots:
        d = diagram_of(s)
        h, _ = hessian_estimates(d)
        out.append(_SnapModel(s.t, cKDTree(s.positions, boxsize=1.0), s.positions,
                              s.barycenters - s.positions, h, 2.0 * d.diameters()))
    return out


@dataclass
class FlowMap:
    """Tracers z_k with dual images G_t and physical images F_t (lifted)."""

    z: np.ndarray
    g0: np.ndarray
    g: np.ndarray
    f0: np.ndarray
    f: np.ndarray
    t: float
    frozen: np.ndarray

    @property
    def count(self) -> int:
        return len(self.z)


def tracer_grid(k: int) -> np.ndarray:
    s = (np.arange(k) + 0.5) / k
    return np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1).reshape(-1, 2)


def init_flow(snap0, k: int, model=None) -> FlowMap:
    """Seed tracers on the K x K grid; dual tracers start at grad P_0(z)."""
    z = tracer_grid(k)
    loc = PowerLocator(snap0.positions, snap0.weights)
    ids, shift = loc.locate_lifted(z)
    g = snap0.positions[ids] + shift
    if model is None:
        model = _models([snap0])[0]
    f, _ = model.dual_map(g)
    return FlowMap(z, g.copy(), g, f.copy(), f, snap0.t, np.zeros(len(z), bool))


def _rk4_interval(y, ma, mb, dt, frozen):
    def vel(p, theta):
        ua, ba = ma.velocity(p)
        ub, bb = mb.velocity(p)
        return (1.0 - theta) * ua + theta * ub, ba | bb

    k1, f1 = vel(y, 0.0)
    k2, f2 = vel(y + 0.5 * dt * k1, 0.5)
    k3, f3 = vel(y + 0.5 * dt * k2, 0.5)
    k4, f4 = vel(y + dt * k3, 1.0)
    bad = f1 | f2 | f3 | f4
    frozen = frozen | bad
    step = dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return np.where(frozen[:, None], y, y + step), frozen


def advance_flow(flow: FlowMap, snapshots, models=None, backward: bool = False) -> FlowMap:
    """Transport dual tracers through consecutive snapshots and update F_t.

    The dual field is linear in time between snapshots. With backward=True
    the snapshots are walked from last to first.
    """
    if models is None:
        models = _models(snapshots)
    seq = list(range(len(models)))
    if backward:
        seq = seq[::-1]
    g = flow.g.copy()
    frozen = flow.frozen.copy()
    for a, b in zip(seq[:-1], seq[1:]):
        dt = models[b].t - models[a].t
        g, frozen = _rk4_interval(g, models[a], models[b], dt, frozen)
    if frozen.any():
        log.warning("%d tracers left the trust region and were frozen", int(frozen.sum()))
    f, _ = models[seq[-1]].dual_map(g)
    return FlowMap(flow.z, flow.g0, g, flow.f0, f, models[seq[-1]].t, frozen)


@dataclass(frozen=True)
class FlowReport:
    hist_min: float
    hist_max: float
    bins: int
    roundtrip_dual: float
    roundtrip_physical: float
    frozen: int


def flow_check(snapshots, k: int = 128, bins: int = 8) -> tuple[FlowMap, FlowReport]:
    """Forward flow to the last snapshot plus the two invertibility witnesses.

    roundtrip_dual: |G back from T - G_0|. roundtrip_physical: for w = F_T(z),
    |grad P*_0(G_back(grad P_T(w))) - F_0(z)|, the inverse flow applied to F_T.
    """
    models = _models(snapshots)
    flow = init_flow(snapshots[0], k, models[0])
    fwd = advance_flow(flow, snapshots, models)
    h = histogram_points(fwd.f, bins)
    back = advance_flow(FlowMap(fwd.z, fwd.g0, fwd.g, fwd.f0, fwd.f, fwd.t, fwd.frozen),
                        snapshots, models, backward=True)
    rt_dual = float(np.abs(back.g - fwd.g0).max())
    last = snapshots[-1]
    loc = PowerLocator(last.positions, last.weights)
    canon, lift = split_lift(fwd.f)
    ids, shift = loc.locate_lifted(canon)
    y_t = last.positions[ids] + shift + lift
    start = FlowMap(fwd.z, fwd.g0, y_t, fwd.f0, fwd.f, fwd.t, fwd.frozen)
    inv = advance_flow(start, snapshots, models, backward=True)
    gap = inv.f - fwd.f0
    rt_phys = float(np.abs(gap - np.rint(gap)).max())
    rep = FlowReport(float(h.min()), float(h.max()), bins, rt_dual, rt_phys,
                     int(fwd.frozen.sum()))
    return fwd, rep
