"""Acceptance criteria 1-12. Each test records one PASS/FAIL line (see conftest)."""
import math
import time

import numpy as np
import pytest
import yaml

from conftest import SINE_EPS, order, record
from sgtorus.cli import bundled, execute_run
from sgtorus.config import load_config
from sgtorus.dynamics import simulate
from sgtorus.eulerian import (appendix_identity, flow_check, velocity_identity_residual,
                              weak_residuals)
from sgtorus.io import load_run
from sgtorus.laguerre import PowerLocator
from sgtorus.measures import DiracCloud, SinePressure, sample_initial_cloud
from sgtorus.ot import compare_with_grid_oracle, solve_weights
from sgtorus.torus import TORUS_DIAMETER, split_lift
from sgtorus.verification import (cofactor_algebra, cofactor_divergence,
                                  lemma_orlicz_scan, lemma_terms, non_var_residual,
                                  orlicz_estimate_report, refinement_study)

DIAM_TOL = TORUS_DIAMETER + 1e-6


@pytest.fixture(scope="module")
def bundled_runs(tmp_path_factory):
    """The bundled configs executed through the run pipeline and reloaded from disk."""
    out = {}
    base = tmp_path_factory.mktemp("bundled")
    for path in bundled("configs"):
        cfg = load_config(path)
        code, _ = execute_run(cfg, base / path.stem)
        assert code == 0, path
        out[path.stem] = load_run(base / path.stem)
    return out


def test_c01_ot_oracle_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    lines = []
    w_gap = math.inf
    for path in bundled("oracle"):
        doc = yaml.safe_load(path.read_text())
        if doc["kind"] != "ot":
            continue
        cloud = DiracCloud(np.array(doc["positions"]), np.array(doc["masses"]))
        cmp = compare_with_grid_oracle(cloud, 512)
        gap = max(cmp["max_area_gap"], cmp["max_pixel_area_gap"])
        worst = max(worst, gap)
        lines.append(f"{path.stem}={gap:.2e}")
        if path.stem == "two_atom_03_07":
            s = solve_weights(cloud, 1e-10)
            w_gap = float(np.abs(s.weights - np.array([0.0, 0.05])).max())
    secs = time.perf_counter() - t0
    ok = worst <= 2 / 512 and w_gap <= 1e-6 and secs < 10
    record(1, ok, f"max area gap {worst:.2e} (limit {2/512:.2e}), |w-(0,0.05)| = {w_gap:.1e}, "
                  f"{secs:.1f}s")
    assert ok, lines


def _map_checks(snapshots, rng, n_pts=10_000):
    """Displacement bound on random points; equivariance on dyadic points so x + h is exact."""
    worst_disp = 0.0
    equivariant = True
    for s in snapshots:
        loc = PowerLocator(s.positions, s.weights)
        x = rng.uniform(-2.0, 3.0, (n_pts, 2))
        canon, lift = split_lift(x)
        ids, shift = loc.locate_lifted(canon)
        y = s.positions[ids] + shift + lift
        worst_disp = max(worst_disp, float(np.hypot(*(y - x).T).max()))
        xd = rng.integers(-2 ** 21, 3 * 2 ** 21, (n_pts, 2)) / 2.0 ** 21
        h = rng.integers(-3, 4, (n_pts, 2)).astype(float)
        c1, l1 = split_lift(xd)
        c2, l2 = split_lift(xd + h)
        i1, s1 = loc.locate_lifted(c1)
        i2, s2 = loc.locate_lifted(c2)
        equivariant &= bool(np.array_equal(i1, i2)) and bool(np.array_equal(s2 + l2 - s1 - l1, h))
    return worst_disp, equivariant


def test_c02_transport_map_bounds(bundled_runs, sine64, shear64, zero64):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst, equi = 0.0, True
    runs = [r[2] for r in bundled_runs.values()]
    runs += [sine64.snapshots, shear64.snapshots[::5], zero64.snapshots[::5]]
    for snaps in runs:
        d, e = _map_checks(snaps, rng)
        worst, equi = max(worst, d), equi and e
    secs = time.perf_counter() - t0
    ok = worst <= DIAM_TOL and equi and secs < 30
    record(2, ok, f"sup |grad P(x) - x| = {worst:.4f} <= {DIAM_TOL:.6f}, "
                  f"equivariance exact: {equi}, {secs:.1f}s")
    assert ok


def test_c03_dual_velocity_bound(bundled_runs, sine_runs, shear64, zero64):
    umax = 0.0
    steps = 0
    for _, diag, _, _ in bundled_runs.values():
        umax = max(umax, max(r["u_max"] for r in diag))
        steps += len(diag)
    for run in [*sine_runs.values(), shear64, zero64]:
        umax = max(umax, max(r["u_max"] for r in run.diagnostics))
        steps += len(run.diagnostics)
    ok = umax <= DIAM_TOL
    record(3, ok, f"max |U| = {umax:.4f} over {steps} accepted steps (limit {DIAM_TOL:.6f})")
    assert ok


def test_c04_stationarity(zero64, shear64):
    zdisp = max(r["max_disp"] for r in zero64.diagnostics)
    d1 = max(r["max_disp1"] for r in shear64.diagnostics)
    drift = max(r["hist_drift"] for r in shear64.diagnostics)
    secs = zero64.seconds + shear64.seconds
    ok = zdisp <= 1e-12 and d1 <= 1e-3 and drift <= 1e-2 and secs < 120
    record(4, ok, f"zero max disp {zdisp:.1e}; shear max first-component disp {d1:.2e}, "
                  f"histogram drift {drift:.2e}; {secs:.0f}s")
    assert ok


def test_c05_mass_and_density(sine_runs, shear64, zero64):
    mass_exact = all(r["mass_sum"] == 1.0 for run in [*sine_runs.values(), shear64, zero64]
                     for r in run.diagnostics)
    g = (np.arange(1024) + 0.5) / 1024
    x = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    det = SinePressure(SINE_EPS).jacobian_det(x)
    lo, hi = float(det.min()) - 0.05, float(det.max()) + 0.05
    run = sine_runs[64]
    hmin = min(r["hist_min"] for r in run.diagnostics)
    hmax = max(r["hist_max"] for r in run.diagnostics)
    tmax = run.diagnostics[-1]["t"]
    ok = mass_exact and lo <= hmin and hmax <= hi and tmax <= 0.5 + 1e-12
    record(5, ok, f"sum m == 1 at every step: {mass_exact}; histogram [{hmin:.3f}, {hmax:.3f}] "
                  f"within [{lo:.3f}, {hi:.3f}] for t <= {tmax:g}")
    assert ok


def test_c06_weak_residuals(sine_runs):
    t0 = time.perf_counter()
    reps = {m: weak_residuals(sine_runs[m].snapshots) for m in (16, 32, 64)}
    secs = time.perf_counter() - t0 + sum(r.seconds for r in sine_runs.values())
    ok = secs < 600
    parts = []
    for name in ("momentum_norm", "divergence_norm"):
        r = [getattr(reps[m], name) for m in (16, 32, 64)]
        mono = r[1] <= 1.1 * r[0] and r[2] <= 1.1 * r[1]
        p = order(r[0], r[2], 4.0)
        ok = ok and mono and p >= 0.5
        parts.append(f"{name.split('_')[0]} {r[0]:.2e}/{r[1]:.2e}/{r[2]:.2e} order {p:.2f}")
    record(6, ok, "; ".join(parts) + f"; {secs:.0f}s")
    assert ok


def test_c07_velocity_identity():
    t0 = time.perf_counter()
    gap = velocity_identity_residual(100_000, seed=7)
    secs = time.perf_counter() - t0
    ok = gap <= 1e-14 and secs < 5
    record(7, ok, f"max gap {gap:.1e} on 1e5 random inputs, {secs:.2f}s")
    assert ok


def test_c08_flow(sine64, shear64):
    t0 = time.perf_counter()
    out = []
    ok = True
    for name, run in (("sine", sine64), ("shear", shear64)):
        snaps = [s for s in run.snapshots if s.t <= 0.5 + 1e-12]
        _, rep = flow_check(snaps, k=128, bins=4)
        good = (0.95 <= rep.hist_min and rep.hist_max <= 1.05
                and rep.roundtrip_dual <= 1e-2 and rep.roundtrip_physical <= 1e-2
                and rep.frozen == 0)
        ok = ok and good
        out.append(f"{name}: hist [{rep.hist_min:.3f}, {rep.hist_max:.3f}], round trip "
                   f"{max(rep.roundtrip_dual, rep.roundtrip_physical):.1e}")
    secs = time.perf_counter() - t0
    ok = ok and secs < 180
    record(8, ok, "; ".join(out) + f"; {secs:.0f}s")
    assert ok


def test_c09_lemma_scan():
    t0 = time.perf_counter()
    scan = lemma_orlicz_scan(1_000_000, 5, seed=9)
    l1, r1 = lemma_terms(1.0, 1.0, 1)
    l2, r2 = lemma_terms(math.e ** 2, 1.0, 1)
    spots = (l1 == 0.0 and abs(r1 - 1.3679) < 1e-4 and abs(l2 - 14.778) < 1e-3
             and r2 >= l2 and abs(r2 - (1 / math.e + 1 + 4 * math.e ** 4)) < 1e-9)
    secs = time.perf_counter() - t0
    ok = scan.passed and spots and secs < 10
    record(9, ok, f"min margin {scan.worst_margin:.2e} over 1e6 samples x k=1..5; spots "
                  f"(0 <= {float(r1):.4f}), ({float(l2):.3f} <= {float(r2):.2f}); {secs:.1f}s")
    assert ok


def test_c10_cofactor_and_linearized_ma():
    t0 = time.perf_counter()
    cof = cofactor_algebra(100_000, seed=10)
    nv = refinement_study("non_var", non_var_residual, (64, 128, 256))
    cd = refinement_study("cofactor_div", cofactor_divergence, (64, 128, 256))
    secs = time.perf_counter() - t0
    ok = cof.passed and nv.passed and cd.passed and secs < 60
    record(10, ok, f"identities {max(cof.identity_error, cof.inverse_error):.1e}, ellipticity "
                   f"margin {cof.bound_margin:.1e}; non-var orders "
                   f"{', '.join(f'{p:.2f}' for p in nv.orders)}; cofactor-div orders "
                   f"{', '.join(f'{p:.2f}' for p in cd.orders)}; {secs:.1f}s")
    assert ok


def test_c11_orlicz(sine64, zero64):
    reps = orlicz_estimate_report(sine64.snapshots, sine64.masses, k=1, bins=8)
    finite = all(math.isfinite(v) for r in reps for v in (r.lhs, r.rhs_h, r.rhs_u, r.ratio))
    sup = max(r.ratio for r in reps if r.t <= 0.5 + 1e-12)
    zr = orlicz_estimate_report(zero64.snapshots[::5], zero64.masses, k=1, bins=8)
    zero_lhs = max(r.lhs for r in zr)
    ok = finite and sup <= 50.0 and zero_lhs == 0.0
    record(11, ok, f"sine sup ratio {sup:.3g} (limit 50), max lhs {max(r.lhs for r in reps):.2e}, "
                   f"finite: {finite}; uniform lhs = {zero_lhs:g}")
    assert ok


def test_c12_appendix_identity():
    cloud = sample_initial_cloud(SinePressure(SINE_EPS), 32)
    gaps = []
    for dt in (0.04, 0.02, 0.01):
        r = simulate(cloud, dt, 0.2, "rk4")
        gaps.append(appendix_identity(r.snapshots, r.masses))
    orders = [order(gaps[0], gaps[1]), order(gaps[1], gaps[2])]
    ok = min(orders) >= 1.8
    record(12, ok, f"gaps {', '.join(f'{g:.2e}' for g in gaps)} for dt 0.04/0.02/0.01, "
                   f"orders {orders[0]:.2f}, {orders[1]:.2f}")
    assert ok
