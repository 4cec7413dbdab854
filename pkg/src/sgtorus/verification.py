"""Numerical witnesses for the analytic estimates behind the dual dynamics.

Static checks (no simulation needed): the Orlicz-type numeric inequality,
cofactor identities, and manufactured smooth families for the
non-variational and linearized Monge-Ampere identities. Dynamic checks read
a finished run: velocity bounds, transport-map bounds and the L log L
report.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .eulerian import field_at
from .measures import DiracCloud, histogram
from .torus import TORUS_DIAMETER

TWO_PI = 2.0 * math.pi


def log_plus(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(x > 1.0, np.log(np.where(x > 1.0, x, 1.0)), 0.0)


# numeric inequality  ab log_+^k(ab) <= 2^{k-1}[(k/e)^k + 1] b^2 + 2^{3(k-1)} a^2 log_+^{2k}(a)

def lemma_terms(a, b, k: int):
    """(lhs, rhs) of the inequality for arrays a, b > 0 and integer k >= 1."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lhs = a * b * log_plus(a * b) ** k
    rhs = (2.0 ** (k - 1) * ((k / math.e) ** k + 1.0) * b ** 2
           + 2.0 ** (3 * (k - 1)) * a ** 2 * log_plus(a) ** (2 * k))
    return lhs, rhs


@dataclass(frozen=True)
class LemmaScan:
    passed: bool
    worst_margin: float
    worst_a: float
    worst_b: float
    worst_k: int
    samples: int
    k_max: int


def lemma_orlicz_scan(samples: int = 1_000_000, k_max: int = 5, seed: int = 0,
                      lo: float = 1e-6, hi: float = 1e6) -> LemmaScan:
    """Check the inequality on log-uniform (a, b) in [lo, hi]^2 for k = 1..k_max."""
    if samples < 1 or k_max < 1:
        raise ValueError("samples and k_max must be >= 1")
    rng = np.random.default_rng(seed)
    a = np.exp(rng.uniform(math.log(lo), math.log(hi), samples))
    b = np.exp(rng.uniform(math.log(lo), math.log(hi), samples))
    best = (math.inf, 0.0, 0.0, 0)
    for k in range(1, k_max + 1):
        lhs, rhs = lemma_terms(a, b, k)
        margin = rhs - lhs
        i = int(np.argmin(margin))
        if margin[i] < best[0]:
            best = (float(margin[i]), float(a[i]), float(b[i]), k)
    return LemmaScan(best[0] >= 0.0, best[0], best[1], best[2], best[3], samples, k_max)


# cofactor matrix

def cofactor(a: np.ndarray) -> np.ndarray:
    """Cofactor matrix of (..., 2, 2) arrays: [[a22, -a21], [-a12, a11]]."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    out[..., 0, 0] = a[..., 1, 1]
    out[..., 0, 1] = -a[..., 1, 0]
    out[..., 1, 0] = -a[..., 0, 1]
    out[..., 1, 1] = a[..., 0, 0]
    return out


def random_spd(n: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """n random symmetric 2x2 matrices with spectrum inside [c1, c2] (per sample)."""
    c1 = np.exp(rng.uniform(math.log(0.05), math.log(2.0), n))
    c2 = c1 * np.exp(rng.uniform(0.0, math.log(50.0), n))
    lam = c1[:, None] + (c2 - c1)[:, None] * rng.uniform(0.0, 1.0, (n, 2))
    th = rng.uniform(0.0, math.pi, n)
    q = np.stack([np.stack([np.cos(th), -np.sin(th)], -1),
                  np.stack([np.sin(th), np.cos(th)], -1)], -2)
    a = (q * lam[:, None, :]) @ np.swapaxes(q, 1, 2)
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    return a, c1, c2


@dataclass(frozen=True)
class CofactorResult:
    passed: bool
    identity_error: float     # max |M(A) A - det(A) Id|, relative to det scale
    inverse_error: float      # max |M(A) - det(A) A^{-1}|, relative
    bound_margin: float       # min over samples of the two ellipticity margins
    samples: int


def cofactor_algebra(samples: int = 100_000, seed: int = 0, tol: float = 1e-12) -> CofactorResult:
    rng = np.random.default_rng(seed)
    a, c1, c2 = random_spd(samples, rng)
    m = cofactor(a)
    det = np.linalg.det(a)
    eye = np.eye(2)
    scale = np.abs(a).max(axis=(1, 2)) ** 2
    ident = np.abs(m @ a - det[:, None, None] * eye).max(axis=(1, 2)) / scale
    inv = np.abs(m - det[:, None, None] * np.linalg.inv(a)).max(axis=(1, 2)) / np.abs(m).max(axis=(1, 2))
    ev = np.linalg.eigvalsh(m)
    lower = ev[:, 0] - c1 ** 2 / c2
    upper = c2 ** 2 / c1 - ev[:, 1]
    margin = float(min(lower.min(), upper.min()))
    ie, ve = float(ident.max()), float(inv.max())
    ok = ie <= tol and ve <= tol and margin >= -tol
    return CofactorResult(ok, ie, ve, margin, samples)


# periodic grid calculus

def d1(f, h, axis):
    return (np.roll(f, -1, axis) - np.roll(f, 1, axis)) / (2.0 * h)


def d2(f, h, axis):
    return (np.roll(f, -1, axis) - 2.0 * f + np.roll(f, 1, axis)) / h ** 2


def grid_hessian(f, h) -> np.ndarray:
    """(n, n, 2, 2) central-difference Hessian of a periodic grid function."""
    hs = np.empty(f.shape + (2, 2))
    hs[..., 0, 0] = d2(f, h, 0)
    hs[..., 1, 1] = d2(f, h, 1)
    hs[..., 0, 1] = hs[..., 1, 0] = d1(d1(f, h, 0), h, 1)
    return hs


def periodic_grid(n: int) -> np.ndarray:
    s = np.arange(n) / n
    return np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1)


@dataclass(frozen=True)
class ManufacturedFamily:
    """P*(y, t) = |y|^2/2 + eps(t) q(y) with eps(t) = epsilon + rate t.

    q = sin(2 pi y1) sin(2 pi y2) ("sinsin") or cos(2 pi y1) ("cos1"). The
    density is rho = det Hess P*, evaluated in closed form.
    """

    n: int
    epsilon: float = 0.01
    rate: float = 0.01
    kind: str = "sinsin"

    def __post_init__(self):
        if self.kind not in ("sinsin", "cos1"):
            raise ValueError(f"unknown family {self.kind!r}")
        if self.n < 4:
            raise ValueError("grid side must be >= 4")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def eps(self, t):
        return self.epsilon + self.rate * t

    def points(self) -> np.ndarray:
        return periodic_grid(self.n)

    def q(self, y):
        if self.kind == "sinsin":
            return np.sin(TWO_PI * y[..., 0]) * np.sin(TWO_PI * y[..., 1])
        return np.cos(TWO_PI * y[..., 0])

    def grad_q(self, y):
        s1, c1 = np.sin(TWO_PI * y[..., 0]), np.cos(TWO_PI * y[..., 0])
        if self.kind == "sinsin":
            s2, c2 = np.sin(TWO_PI * y[..., 1]), np.cos(TWO_PI * y[..., 1])
            return TWO_PI * np.stack([c1 * s2, s1 * c2], -1)
        return np.stack([-TWO_PI * s1, np.zeros_like(s1)], -1)

    def hess_q(self, y):
        s1, c1 = np.sin(TWO_PI * y[..., 0]), np.cos(TWO_PI * y[..., 0])
        out = np.zeros(y.shape[:-1] + (2, 2))
        k2 = TWO_PI ** 2
        if self.kind == "sinsin":
            s2, c2 = np.sin(TWO_PI * y[..., 1]), np.cos(TWO_PI * y[..., 1])
            out[..., 0, 0] = out[..., 1, 1] = -k2 * s1 * s2
            out[..., 0, 1] = out[..., 1, 0] = k2 * c1 * c2
        else:
            out[..., 0, 0] = -k2 * c1
        return out

    def hessian(self, y, t):
        return np.eye(2) + self.eps(t) * self.hess_q(y)

    def rho(self, y, t):
        return np.linalg.det(self.hessian(y, t))

    def check_positive(self, t_values=(0.0,)) -> float:
        """Smallest Hessian eigenvalue over the grid; raises if not positive."""
        y = self.points()
        lo = min(float(np.linalg.eigvalsh(self.hessian(y, t)).min()) for t in t_values)
        if lo <= 0.0:
            raise ValueError(f"family is not positive definite on the grid (min eig {lo:.3g})")
        return lo


def cofactor_divergence(fam: ManufacturedFamily, t: float = 0.0) -> float:
    """Max over the grid of |sum_i D_i M_ij(Hess_h P*)| with central differences."""
    fam.check_positive((t,))
    y = fam.points()
    hs = np.eye(2) + grid_hessian(fam.eps(t) * fam.q(y), fam.h)
    m = cofactor(hs)
    div = d1(m[..., 0, :], fam.h, 0) + d1(m[..., 1, :], fam.h, 1)
    return float(np.abs(div).max())


def non_var_residual(fam: ManufacturedFamily, t: float = 0.5) -> float:
    """Max |d_t rho - sum M_ij(Hess P*) d_t d_ij P*| on the grid.

    d_t by central difference in time with step h; space derivatives by
    central differences of the grid potential. rho itself is exact.
    """
    dt = fam.h
    fam.check_positive((t - dt, t, t + dt))
    y = fam.points()
    q = fam.q(y)
    drho = (fam.rho(y, t + dt) - fam.rho(y, t - dt)) / (2.0 * dt)
    hq = grid_hessian(q, fam.h)
    m = cofactor(np.eye(2) + fam.eps(t) * hq)
    dh = (fam.eps(t + dt) - fam.eps(t - dt)) / (2.0 * dt) * hq
    rhs = np.einsum("...ij,...ij->...", m, dh)
    return float(np.abs(drho - rhs).max())


def convergence_orders(ns, errors) -> list[float]:
    out = []
    for (n0, e0), (n1, e1) in zip(zip(ns, errors), zip(ns[1:], errors[1:])):
        if e0 <= 0.0 or e1 <= 0.0:
            out.append(math.inf)
        else:
            out.append(math.log(e0 / e1) / math.log(n1 / n0))
    return out


@dataclass(frozen=True)
class RefinementResult:
    name: str
    ns: tuple
    errors: tuple
    orders: tuple
    passed: bool


def refinement_study(name: str, func, ns=(64, 128, 256), min_order: float = 1.8,
                     **family_kw) -> RefinementResult:
    errs = [func(ManufacturedFamily(n, **family_kw)) for n in ns]
    orders = convergence_orders(list(ns), errs)
    return RefinementResult(name, tuple(ns), tuple(errs), tuple(orders),
                            min(orders) >= min_order)


# linearized Monge-Ampere in pairing form

def _trig_tests(y, kmax=2):
    """cos and sin of 2 pi k.y for half-plane k with |k|_inf <= kmax: values and gradients."""
    ks = [(a, b) for a in range(-kmax, kmax + 1) for b in range(-kmax, kmax + 1)
          if a > 0 or (a == 0 and b > 0)]
    vals, grads = [], []
    for k in ks:
        ph = TWO_PI * (k[0] * y[..., 0] + k[1] * y[..., 1])
        kv = TWO_PI * np.array(k, dtype=float)
        vals += [np.cos(ph), np.sin(ph)]
        grads += [-np.sin(ph)[..., None] * kv, np.cos(ph)[..., None] * kv]
    return vals, grads


@dataclass(frozen=True)
class PairingResult:
    family: str
    lhs: tuple    # int rho (Hess P*)^{-1} d_t grad P* . grad psi
    rhs: tuple    # int rho U . grad psi
    gap: float    # max |lhs + rhs|


def linearized_ma_pairing(fam: ManufacturedFamily, t: float = 0.0, kmax: int = 2,
                          curl_amp: float = 0.1) -> PairingResult:
    """Pairing of both sides of the linearized Monge-Ampere equation with trig tests.

    rho (Hess P*)^{-1} = M(Hess P*), so the left integrand needs no inverse.
    For "cos1" the flux rho U is explicit: (-eps' q'(y1), g(y1)), which solves
    the continuity equation for any g. For "sinsin" rho U is represented by
    its divergence -d_t rho, i.e. int rho U . grad psi = int psi d_t rho.
    Grid sums of trig polynomials are exact, so the gap is round-off.
    """
    fam.check_positive((t,))
    y = fam.points()
    w = fam.h ** 2
    m = cofactor(fam.hessian(y, t))
    flux = np.einsum("...ij,...j->...i", m, fam.rate * fam.grad_q(y))
    vals, grads = _trig_tests(y, kmax)
    lhs = [float(w * np.sum(flux * g)) for g in grads]
    if fam.kind == "cos1":
        s1 = np.sin(TWO_PI * y[..., 0])
        rho_u = np.stack([-fam.rate * (-TWO_PI * s1),
                          curl_amp * np.cos(TWO_PI * y[..., 0])], -1)
        rhs = [float(w * np.sum(rho_u * g)) for g in grads]
    else:
        hq = fam.hess_q(y)
        # d_t det(Id + eps Hq) = eps' (tr Hq + 2 eps det Hq)
        drho = fam.rate * (np.trace(hq, axis1=-2, axis2=-1)
                           + 2.0 * fam.eps(t) * np.linalg.det(hq))
        rhs = [float(w * np.sum(v * drho)) for v in vals]
    gap = float(np.max(np.abs(np.array(lhs) + np.array(rhs))))
    return PairingResult(fam.kind, tuple(lhs), tuple(rhs), gap)


# L log L estimate on a run

@dataclass(frozen=True)
class OrliczReport:
    t: float
    k: int
    lhs: float
    rhs_h: float
    rhs_u: float
    ratio: float


def orlicz_terms(masses, v, hess, u, rho_hat, k: int) -> tuple[float, float, float]:
    """Discrete terms of the L log^k L estimate (|H| is the Frobenius norm)."""
    m = np.asarray(masses, dtype=float)
    vn = np.hypot(v[:, 0], v[:, 1])
    hn = np.sqrt(np.einsum("nij,nij->n", hess, hess))
    lhs = float(np.sum(m * vn * log_plus(vn) ** k))
    rhs_h = float(np.sum(m * hn * log_plus(hn) ** (2 * k)))
    esssup = float(np.max(rho_hat * (u[:, 0] ** 2 + u[:, 1] ** 2)))
    rhs_u = esssup * float(np.sum(m / rho_hat * hn))
    return lhs, rhs_h, rhs_u


def _ratio(lhs, den):
    if lhs == 0.0:
        return 0.0
    return lhs / den if den > 0.0 else math.inf


def atom_density(positions, masses, bins: int) -> np.ndarray:
    """Histogram density of the bin that holds each atom."""
    cloud = DiracCloud(positions, masses)
    h = histogram(cloud, bins).bins
    idx = np.minimum((cloud.positions * bins).astype(np.int64), bins - 1)
    return h[idx[:, 0], idx[:, 1]]


def orlicz_estimate_report(snapshots, masses, k: int = 1, bins: int = 8,
                           stride: int = 1) -> list[OrliczReport]:
    """Per-snapshot terms with v_i = bdot_i - H_i U_i and rho_hat the binned density."""
    if k < 1:
        raise ValueError("k must be >= 1")
    out = []
    for idx in range(0, len(snapshots), stride):
        fld = field_at(snapshots, idx)
        rho_hat = atom_density(fld.positions, masses, bins)
        lhs, rh, ru = orlicz_terms(masses, fld.dual_rates, fld.hessians,
                                   fld.velocities, rho_hat, k)
        out.append(OrliczReport(fld.t, k, lhs, rh, ru, _ratio(lhs, rh + ru)))
    return out


# reports

@dataclass
class CheckResult:
    name: str
    status: str           # "pass" or "fail"
    value: float          # measured quantity
    limit: float | None   # threshold it was compared against
    margin: float         # limit - value (or the check's own margin)
    resolution: dict

    def as_dict(self):
        d = asdict(self)
        for key in ("value", "limit", "margin"):
            v = d[key]
            if isinstance(v, float) and not math.isfinite(v):
                d[key] = str(v)
        return d


def _status(ok: bool) -> str:
    return "pass" if ok else "fail"


def static_checks(lemma_samples: int = 1_000_000, cofactor_samples: int = 100_000,
                  ns=(64, 128, 256), seed: int = 0) -> list[CheckResult]:
    out = []
    scan = lemma_orlicz_scan(lemma_samples, 5, seed)
    out.append(CheckResult("lemma_orlicz_scan", _status(scan.passed), -scan.worst_margin, 0.0,
                           scan.worst_margin, {"samples": lemma_samples, "k_max": 5}))
    for a, b in ((1.0, 1.0), (math.e ** 2, 1.0)):
        lhs, rhs = lemma_terms(a, b, 1)
        out.append(CheckResult(f"lemma_spot_a{a:.4g}_b{b:g}", _status(lhs <= rhs), float(lhs),
                               float(rhs), float(rhs - lhs), {"k": 1}))
    cof = cofactor_algebra(cofactor_samples, seed)
    out.append(CheckResult("cofactor_identities", _status(cof.passed),
                           max(cof.identity_error, cof.inverse_error), 1e-12,
                           cof.bound_margin, {"samples": cofactor_samples}))
    for name, func in (("cofactor_divergence_order", cofactor_divergence),
                       ("non_var_order", non_var_residual)):
        r = refinement_study(name, func, ns)
        out.append(CheckResult(name, _status(r.passed), min(r.orders), 1.8,
                               min(r.orders) - 1.8,
                               {"n": list(ns), "errors": list(r.errors)}))
    for kind in ("cos1", "sinsin"):
        p = linearized_ma_pairing(ManufacturedFamily(128, kind=kind))
        out.append(CheckResult(f"linearized_ma_pairing_{kind}", _status(p.gap <= 1e-10),
                               p.gap, 1e-10, 1e-10 - p.gap, {"n": 128}))
    return out


def dynamic_checks(snapshots, masses, histogram_bins: int, orlicz_max: float = 50.0,
                   orlicz_stride: int = 1) -> list[CheckResult]:
    """Checks on a finished run: mass, |U| bound, |grad p| bound, L log L ratio."""
    res = {"atoms": len(masses), "snapshots": len(snapshots)}
    out = []
    mass_gap = abs(math.fsum(masses) - 1.0)
    out.append(CheckResult("mass_sum", _status(mass_gap <= 1e-12), mass_gap, 1e-12,
                           1e-12 - mass_gap, res))
    umax = max(float(np.hypot(*s.velocities.T).max()) for s in snapshots)
    lim = TORUS_DIAMETER + 1e-6
    out.append(CheckResult("dual_velocity_bound", _status(umax <= lim), umax, lim, lim - umax, res))
    # |y_i - x| <= diameter on every cell: vertices are the extreme points
    gp = 0.0
    for s in snapshots:
        d = field_at([s], 0).diagram
        r = np.hypot(d.verts[..., 0], d.verts[..., 1])
        mask = np.arange(d.verts.shape[1])[None, :] < d.nverts[:, None]
        gp = max(gp, float(np.where(mask, r, 0.0).max()))
    out.append(CheckResult("pressure_gradient_bound", _status(gp <= lim), gp, lim, lim - gp, res))
    reps = orlicz_estimate_report(snapshots, masses, 1, histogram_bins, orlicz_stride)
    sup = max(r.ratio for r in reps)
    finite = all(math.isfinite(v) for r in reps for v in (r.lhs, r.rhs_h, r.rhs_u, r.ratio))
    out.append(CheckResult("orlicz_ratio", _status(finite and sup <= orlicz_max), sup,
                           orlicz_max, orlicz_max - sup,
                           dict(res, bins=histogram_bins, lhs_max=max(r.lhs for r in reps))))
    return out


def write_report(path, checks: list[CheckResult], meta: dict | None = None) -> dict:
    doc = {"meta": meta or {}, "checks": [c.as_dict() for c in checks],
           "passed": all(c.status == "pass" for c in checks)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc
