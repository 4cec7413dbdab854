"""Time stepping of the dual transport system.

Atoms move with U_i = J(y_i - b_i), b_i the barycenter of cell i. Masses
never change, so the discrete continuity equation holds exactly. Every
Runge-Kutta stage re-solves the transport weights, warm-started from the
last accepted solve.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .laguerre import WeightSpreadError
from .measures import DiracCloud, default_histogram_bins, histogram, sample_initial_cloud
from .ot import OTConvergenceError, PotentialSolve, solve_weights
from .torus import TORUS_DIAMETER, apply_J

log = logging.getLogger(__name__)

U_BOUND_TOL = 1e-6
MAX_HALVINGS = 8
SCHEMES = ("euler", "heun", "rk4")


class InvariantViolation(RuntimeError):
    """A hard monitor failed; ``label`` names the monitor."""

    def __init__(self, label: str, detail: str):
        super().__init__(f"{label}: {detail}")
        self.label = label


class StepFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class SimState:
    t: float
    cloud: DiracCloud
    solve: PotentialSolve

    @property
    def positions(self) -> np.ndarray:
        return self.cloud.positions

    @property
    def barycenters(self) -> np.ndarray:
        return self.solve.barycenters


def _solve(cloud, tol, warm=None):
    if warm is None:
        return solve_weights(cloud, tol)
    centers = np.clip(warm.barycenters - warm.diagram.positions, -0.5, 0.5)
    return solve_weights(cloud, tol, warm_start=warm.weights, centers=centers)


def initial_state(cloud: DiracCloud, tol: float | None = None, t0: float = 0.0) -> SimState:
    return SimState(t0, cloud, solve_weights(cloud, tol))


def velocity_at_atoms(state: SimState) -> np.ndarray:
    """U_i = J(y_i - b_i) with b_i in the site-centered lift."""
    return apply_J(state.positions - state.barycenters)


def _stage(state: SimState, disp, tol) -> tuple[SimState, np.ndarray]:
    cloud = state.cloud.moved(state.positions + disp)
    solve = _solve(cloud, tol, state.solve)
    st = SimState(state.t, cloud, solve)
    return st, velocity_at_atoms(st)


def _single_step(state: SimState, dt: float, scheme: str, tol) -> SimState:
    k1 = velocity_at_atoms(state)
    if scheme == "euler":
        disp = dt * k1
    elif scheme == "heun":
        _, k2 = _stage(state, dt * k1, tol)
        disp = 0.5 * dt * (k1 + k2)
    else:
        _, k2 = _stage(state, 0.5 * dt * k1, tol)
        _, k3 = _stage(state, 0.5 * dt * k2, tol)
        _, k4 = _stage(state, dt * k3, tol)
        disp = dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    cloud = state.cloud.moved(state.positions + disp)
    return SimState(state.t + dt, cloud, _solve(cloud, tol, state.solve))


def step(state: SimState, dt: float, scheme: str = "heun", tol: float | None = None,
         _depth: int = 0) -> SimState:
    """Advance by dt (negative dt integrates backward).

    A failed transport solve inside a stage replaces the step by two half
    steps, recursively, at most MAX_HALVINGS levels deep.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    if dt == 0.0 or not math.isfinite(dt):
        raise ValueError("dt must be finite and nonzero")
    if tol is None:
        tol = state.solve.tol
    try:
        return _single_step(state, dt, scheme, tol)
    except (OTConvergenceError, WeightSpreadError) as exc:
        if _depth >= MAX_HALVINGS:
            raise StepFailure(f"step at t={state.t:.6g} failed after "
                              f"{MAX_HALVINGS} halvings: {exc}") from exc
        log.warning("step t=%.6g dt=%.3g failed (%s); halving", state.t, dt, exc)
        half = step(state, 0.5 * dt, scheme, tol, _depth + 1)
        return step(half, 0.5 * dt, scheme, tol, _depth + 1)


def default_dt(state: SimState) -> float:
    """dt with max|U| dt <= (smallest cell diameter) / 10."""
    umax = float(np.abs(velocity_at_atoms(state)).max(initial=0.0))
    diam = float(state.solve.diagram.diameters().min())
    if umax <= 0.0:
        return 0.1 * diam
    return 0.1 * diam / umax


@dataclass(frozen=True)
class Snapshot:
    """Light per-step record; diagrams are rebuilt from it when needed."""

    step: int
    t: float
    positions: np.ndarray
    lifts: np.ndarray
    weights: np.ndarray
    barycenters: np.ndarray
    areas: np.ndarray
    residual: float

    @classmethod
    def of(cls, k: int, state: SimState) -> "Snapshot":
        return cls(k, state.t, state.cloud.positions, state.cloud.lifts,
                   state.solve.weights, state.solve.barycenters,
                   state.solve.areas, state.solve.residual)

    @property
    def trajectory_positions(self) -> np.ndarray:
        return self.positions + self.lifts

    @property
    def velocities(self) -> np.ndarray:
        return apply_J(self.positions - self.barycenters)


@dataclass
class RunResult:
    snapshots: list
    diagnostics: list
    masses: np.ndarray
    histogram_bins: int
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])


def monitor_row(k: int, state: SimState, masses_sum: float, hist0, bins: int,
                traj0: np.ndarray) -> dict:
    u = velocity_at_atoms(state)
    umax = float(np.hypot(u[:, 0], u[:, 1]).max())
    h = histogram(state.cloud, bins).bins
    disp = state.cloud.trajectory_positions - traj0
    return {
        "step": k,
        "t": state.t,
        "mass_sum": masses_sum,
        "u_max": umax,
        "hist_min": float(h.min()),
        "hist_max": float(h.max()),
        "hist_drift": float(np.abs(h - hist0).max()),
        "ot_residual": state.solve.residual,
        "ot_iterations": state.solve.iterations,
        "max_disp": float(np.abs(disp).max()),
        "max_disp1": float(np.abs(disp[:, 0]).max()),
    }


def check_hard_invariants(row: dict, tol: float):
    if abs(row["mass_sum"] - 1.0) > 1e-12:
        raise InvariantViolation("mass", f"sum of masses {row['mass_sum']!r}")
    if row["u_max"] > TORUS_DIAMETER + U_BOUND_TOL:
        raise InvariantViolation("u_bound", f"max |U| = {row['u_max']:.6g} at t={row['t']:.6g}")
    if row["ot_residual"] > tol:
        raise InvariantViolation("ot_residual", f"{row['ot_residual']:.3e} > {tol:.3e}")


def simulate(cloud: DiracCloud, dt: float | None, t_end: float, scheme: str = "heun",
             tol: float | None = None, histogram_bins: int | None = None,
             callback=None) -> RunResult:
    """Integrate from t=0 to t_end, keeping a Snapshot of every step.

    Steps are uniform; the last one is not shortened, so the step count is
    round(t_end / dt). Hard invariants abort with InvariantViolation.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    state = initial_state(cloud, tol)
    tol = state.solve.tol
    if dt is None:
        dt = default_dt(state)
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    if t_end < 0.0:
        raise ValueError("T must be nonnegative")
    nsteps = int(round(t_end / dt))
    if histogram_bins is None:
        histogram_bins = default_histogram_bins(cloud.n)
    masses_sum = math.fsum(cloud.masses)
    hist0 = histogram(cloud, histogram_bins).bins
    traj0 = cloud.trajectory_positions.copy()
    snaps = [Snapshot.of(0, state)]
    rows = [monitor_row(0, state, masses_sum, hist0, histogram_bins, traj0)]
    check_hard_invariants(rows[0], tol)
    if callback:
        callback(state, rows[0])
    for k in range(1, nsteps + 1):
        state = step(state, dt, scheme, tol)
        # keep t on the grid instead of accumulating rounding
        state = SimState(k * dt, state.cloud, state.solve)
        # masses are never rewritten; summing them again is the audit
        masses_sum = math.fsum(state.cloud.masses)
        row = monitor_row(k, state, masses_sum, hist0, histogram_bins, traj0)
        check_hard_invariants(row, tol)
        snaps.append(Snapshot.of(k, state))
        rows.append(row)
        if callback:
            callback(state, row)
    return RunResult(snaps, rows, np.asarray(cloud.masses), histogram_bins,
                     {"dt": dt, "steps": nsteps, "scheme": scheme, "tol": tol})


def run(config, callback=None) -> RunResult:
    """Build the initial cloud described by a RunConfig and integrate it."""
    p0 = config.pressure()
    cloud = sample_initial_cloud(p0, config.N)
    res = simulate(cloud, config.dt, config.T, config.scheme, config.tol,
                   config.histogram_bins, callback)
    res.meta["scenario"] = p0.describe()
    return res

