import math

import numpy as np
import pytest

from sgtorus.dynamics import (InvariantViolation, SimState, check_hard_invariants,
                              default_dt, initial_state, simulate, step, velocity_at_atoms)
from sgtorus.laguerre import build_diagram
from sgtorus.measures import (DiracCloud, ShearPressure, SinePressure, ZeroPressure,
                              sample_initial_cloud)
from sgtorus.ot import rearrangement_1d, solve_weights
from sgtorus.torus import TORUS_DIAMETER

STRIPS = np.array([[0.25, 0.5], [0.75, 0.5]])


def test_uniform_cloud_is_stationary():
    st = initial_state(sample_initial_cloud(ZeroPressure(), 8))
    assert np.all(velocity_at_atoms(st) == 0.0)
    for scheme in ("euler", "heun", "rk4"):
        nxt = step(st, 0.3, scheme)
        assert np.array_equal(nxt.positions, st.positions)
        assert np.all(nxt.cloud.lifts == 0.0)


def test_symmetric_pair_has_zero_velocity():
    st = initial_state(DiracCloud(STRIPS, np.array([0.5, 0.5])))
    assert np.abs(velocity_at_atoms(st)).max() <= 1e-15


def test_shear_velocity_matches_rearrangement():
    c = sample_initial_cloud(ShearPressure("cos1", 0.01), 64)
    st = initial_state(c)
    u = velocity_at_atoms(st)
    assert np.abs(u[:, 0]).max() <= 1e-3
    y1 = c.positions[:, 0]
    ora = rearrangement_1d(y1, c.masses)
    g = ora.barycenters[np.searchsorted(ora.sites, y1)] - ora.sites[np.searchsorted(ora.sites, y1)]
    # U = J(y - b) has second component y1 - g(y1)
    assert np.allclose(u[:, 1], -g, atol=1e-8)


def test_euler_step_matches_independent_recomputation():
    pos = np.array([[0.1, 0.2], [0.55, 0.35], [0.4, 0.8]])
    m = np.array([0.2, 0.3, 0.5])
    st = initial_state(DiracCloud(pos, m), tol=1e-12)
    dt = 0.05
    nxt = step(st, dt, "euler")
    d = build_diagram(pos, st.solve.weights)
    b = d.barycenters
    want = pos + dt * np.column_stack([-(pos - b)[:, 1], (pos - b)[:, 0]])
    assert np.abs(nxt.cloud.trajectory_positions - want).max() <= 1e-12
    assert np.array_equal(nxt.cloud.masses, m)
    assert nxt.solve.residual <= nxt.solve.tol


def test_rk4_time_reversal():
    st = initial_state(sample_initial_cloud(SinePressure(0.005), 16), tol=1e-12)
    fwd = step(st, 0.02, "rk4")
    back = step(fwd, -0.02, "rk4")
    assert np.abs(back.cloud.trajectory_positions - st.cloud.trajectory_positions).max() <= 1e-8


def test_shear_steadiness_100_steps():
    c = sample_initial_cloud(ShearPressure("cos1", 0.01), 16)
    r = simulate(c, 1e-2, 1.0, "heun")
    assert len(r.diagnostics) == 101
    assert max(row["max_disp1"] for row in r.diagnostics) <= 1e-3
    assert max(row["hist_drift"] for row in r.diagnostics) <= 1e-2


def test_simulate_monitors_on_zero_pressure():
    r = simulate(sample_initial_cloud(ZeroPressure(), 8), 0.25, 1.0)
    for row in r.diagnostics:
        assert row["mass_sum"] == 1.0 and row["u_max"] == 0.0 and row["max_disp"] == 0.0
        assert row["hist_min"] == row["hist_max"] == 1.0
    assert r.times.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_sine_rk4_run_respects_bounds():
    p0 = SinePressure(0.01)
    r = simulate(sample_initial_cloud(p0, 32), 1e-2, 0.5, "rk4", histogram_bins=8)
    assert max(row["u_max"] for row in r.diagnostics) <= TORUS_DIAMETER
    g = (np.arange(512) + 0.5) / 512
    det = p0.jacobian_det(np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2))
    drift = max(row["hist_drift"] for row in r.diagnostics)
    lo = 1 / det.max() - 0.05 - drift
    hi = 1 / det.min() + 0.05 + drift
    assert lo <= min(row["hist_min"] for row in r.diagnostics)
    assert max(row["hist_max"] for row in r.diagnostics) <= hi


def test_invalid_arguments():
    st = initial_state(DiracCloud(STRIPS, np.array([0.5, 0.5])))
    with pytest.raises(ValueError):
        step(st, 0.1, "leapfrog")
    with pytest.raises(ValueError):
        step(st, 0.0)
    c = st.cloud
    with pytest.raises(ValueError):
        simulate(c, 0.0, 1.0)
    with pytest.raises(ValueError):
        simulate(c, -0.1, 1.0)


def test_default_dt_rule():
    st = initial_state(sample_initial_cloud(SinePressure(0.01), 16))
    dt = default_dt(st)
    u = np.abs(velocity_at_atoms(st)).max()
    assert dt * u <= st.solve.diagram.diameters().min() / 10 + 1e-15


def test_hard_invariant_violation_is_labeled():
    row = {"mass_sum": 1.0, "u_max": 0.8, "t": 0.0, "ot_residual": 0.0}
    with pytest.raises(InvariantViolation) as exc:
        check_hard_invariants(row, 1e-9)
    assert "u_bound" in str(exc.value)
