"""Atomic dual measures and the initial pressures that generate them."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .torus import canonicalize, split_lift

TWO_PI = 2.0 * math.pi
WITNESS_GRID = 256


class ConvexityError(ValueError):
    """The initial pressure is not (-1)-convex: p0 + |x|^2/2 fails to be convex."""


@dataclass(frozen=True)
class DiracCloud:
    """Weighted atoms on the torus, the discrete dual density rho_t.

    ``positions`` are canonical points in [0,1)^2 and ``lifts`` are the
    integer offsets accumulated along each trajectory, so the continuous
    path of atom i is ``positions[i] + lifts[i]``.
    """

    positions: np.ndarray
    masses: np.ndarray
    lifts: np.ndarray = field(default=None)

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=float).reshape(-1, 2)
        m = np.ascontiguousarray(self.masses, dtype=float).reshape(-1)
        lifts = (np.zeros_like(pos) if self.lifts is None
                 else np.ascontiguousarray(self.lifts, dtype=float).reshape(-1, 2))
        if len(pos) < 1:
            raise ValueError("a cloud needs at least one atom")
        if len(m) != len(pos) or len(lifts) != len(pos):
            raise ValueError("positions, masses and lifts must have matching length")
        if np.any(pos < 0.0) or np.any(pos >= 1.0) or not np.all(np.isfinite(pos)):
            raise ValueError("atom positions must be canonical points of [0,1)^2")
        if np.any(m <= 0.0):
            raise ValueError("atom masses must be strictly positive")
        if abs(math.fsum(m) - 1.0) > 1e-12:
            raise ValueError(f"atom masses sum to {math.fsum(m)!r}, expected 1")
        for arr in (pos, m, lifts):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "lifts", lifts)

    @property
    def n(self) -> int:
        return len(self.masses)

    @property
    def trajectory_positions(self) -> np.ndarray:
        """Positions in the continuous lifted frame."""
        return self.positions + self.lifts

    @classmethod
    def from_points(cls, points, masses=None) -> "DiracCloud":
        """Build a cloud from raw points, merging exact duplicates.

        Points are canonicalized; their integer parts become the initial lifts.
        Masses default to uniform.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if masses is None:
            masses = np.full(len(pts), 1.0 / len(pts))
        masses = np.asarray(masses, dtype=float).reshape(-1)
        canon, lift = split_lift(pts)
        uniq, first, inverse = np.unique(canon, axis=0, return_index=True,
                                         return_inverse=True)
        if len(uniq) == len(canon):
            return cls(canon, masses, lift)
        inverse = inverse.reshape(-1)
        merged = np.zeros(len(uniq))
        np.add.at(merged, inverse, masses)
        # keep the order of first appearance
        order = np.argsort(first, kind="stable")
        return cls(uniq[order], merged[order], lift[first[order]])

    def moved(self, raw_positions) -> "DiracCloud":
        """New cloud with atoms at ``raw_positions`` (positions + displacement).

        Masses are carried over untouched; integer wraps are added to the lifts.
        """
        canon, wrap = split_lift(raw_positions)
        return DiracCloud(canon, self.masses, self.lifts + wrap)


@dataclass(frozen=True)
class DensityHistogram:
    bins: np.ndarray
    bin_width: float

    @property
    def n(self) -> int:
        return self.bins.shape[0]

    def total(self) -> float:
        return float(self.bins.sum() * self.bin_width ** 2)


def histogram(cloud: DiracCloud, n: int) -> DensityHistogram:
    """Bin the atom masses on an n x n grid and normalize to a density."""
    if n < 2:
        raise ValueError("histogram needs n >= 2 bins per side")
    idx = np.minimum((cloud.positions * n).astype(np.int64), n - 1)
    bins = np.zeros((n, n))
    np.add.at(bins, (idx[:, 0], idx[:, 1]), cloud.masses)
    bw = 1.0 / n
    return DensityHistogram(bins / bw ** 2, bw)


def histogram_points(points, n: int, weights=None) -> np.ndarray:
    """Density histogram of equally weighted (or weighted) torus points."""
    pts = canonicalize(points)
    if weights is None:
        weights = np.full(len(pts), 1.0 / len(pts))
    idx = np.minimum((pts * n).astype(np.int64), n - 1)
    bins = np.zeros((n, n))
    np.add.at(bins, (idx[:, 0], idx[:, 1]), weights)
    return bins * n * n


def default_histogram_bins(n_atoms: int) -> int:
    return max(2, math.ceil(math.sqrt(n_atoms) / 2))


class InitialPressure:
    """A periodic initial pressure p0 with its gradient and Hessian.

    Subclasses implement ``grad`` and ``hess`` on arrays of points (P, 2);
    ``hess`` returns (P, 2, 2).
    """

    name = "abstract"

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hess(self, x):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"scenario": self.name}

    def min_convexity_eigenvalue(self, n: int = WITNESS_GRID) -> float:
        """Smallest eigenvalue of Id + Hess p0 over a cell-centered n x n grid."""
        g = (np.arange(n) + 0.5) / n
        x = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
        lo = np.inf
        for chunk in np.array_split(x, max(1, len(x) // 8192)):
            h = self.hess(chunk)
            a = 1.0 + h[:, 0, 0]
            d = 1.0 + h[:, 1, 1]
            b = h[:, 0, 1]
            lam = 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + b * b)
            lo = min(lo, float(lam.min()))
        return lo

    def jacobian_det(self, x):
        """det(Id + Hess p0) at points x: the inverse density of the pushforward."""
        h = self.hess(np.asarray(x, dtype=float).reshape(-1, 2))
        return (1.0 + h[:, 0, 0]) * (1.0 + h[:, 1, 1]) - h[:, 0, 1] * h[:, 1, 0]

    def check_convexity(self, n: int = WITNESS_GRID) -> float:
        lam = self.min_convexity_eigenvalue(n)
        if lam < 0.0:
            raise ConvexityError(
                f"{self.name}: min eigenvalue of Id + Hess p0 is {lam:.3e} < 0")
        return lam


class ZeroPressure(InitialPressure):
    name = "zero"

    def value(self, x):
        return np.zeros(len(np.atleast_2d(x)))

    def grad(self, x):
        return np.zeros_like(np.atleast_2d(np.asarray(x, dtype=float)))

    def hess(self, x):
        return np.zeros((len(np.atleast_2d(x)), 2, 2))


class SinePressure(InitialPressure):
    """p0(x) = eps sin(2 pi x1) sin(2 pi x2), (-1)-convex iff eps <= 1/(4 pi^2)."""

    name = "sine"

    def __init__(self, epsilon: float):
        self.epsilon = float(epsilon)

    def describe(self):
        return {"scenario": self.name, "epsilon": self.epsilon}

    def value(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.epsilon * np.sin(TWO_PI * x[:, 0]) * np.sin(TWO_PI * x[:, 1])

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        s1, c1 = np.sin(TWO_PI * x[:, 0]), np.cos(TWO_PI * x[:, 0])
        s2, c2 = np.sin(TWO_PI * x[:, 1]), np.cos(TWO_PI * x[:, 1])
        e = TWO_PI * self.epsilon
        return np.column_stack([e * c1 * s2, e * s1 * c2])

    def hess(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        s1, c1 = np.sin(TWO_PI * x[:, 0]), np.cos(TWO_PI * x[:, 0])
        s2, c2 = np.sin(TWO_PI * x[:, 1]), np.cos(TWO_PI * x[:, 1])
        e = TWO_PI ** 2 * self.epsilon
        h = np.empty((len(x), 2, 2))
        h[:, 0, 0] = -e * s1 * s2
        h[:, 1, 1] = -e * s1 * s2
        h[:, 0, 1] = h[:, 1, 0] = e * c1 * c2
        return h


# 1-D shear profiles f(x1): (value, first, second derivative) for unit amplitude
SHEAR_PROFILES = {
    "cos1": (lambda s: np.cos(TWO_PI * s),
             lambda s: -TWO_PI * np.sin(TWO_PI * s),
             lambda s: -TWO_PI ** 2 * np.cos(TWO_PI * s)),
    "cos2": (lambda s: np.cos(2 * TWO_PI * s),
             lambda s: -2 * TWO_PI * np.sin(2 * TWO_PI * s),
             lambda s: -4 * TWO_PI ** 2 * np.cos(2 * TWO_PI * s)),
    "mixed": (lambda s: np.cos(TWO_PI * s) + 0.5 * np.sin(2 * TWO_PI * s),
              lambda s: -TWO_PI * np.sin(TWO_PI * s) + TWO_PI * np.cos(2 * TWO_PI * s),
              lambda s: -TWO_PI ** 2 * np.cos(TWO_PI * s)
              - 2 * TWO_PI ** 2 * np.sin(2 * TWO_PI * s)),
}


class ShearPressure(InitialPressure):
    """p0(x) = eps f(x1) for a named 1-D profile f."""

    name = "shear"

    def __init__(self, profile: str, epsilon: float):
        if profile not in SHEAR_PROFILES:
            raise ValueError(f"unknown shear profile {profile!r}; "
                             f"choose from {sorted(SHEAR_PROFILES)}")
        self.profile = profile
        self.epsilon = float(epsilon)
        self._f, self._df, self._d2f = SHEAR_PROFILES[profile]

    def describe(self):
        return {"scenario": self.name, "profile": self.profile, "epsilon": self.epsilon}

    def value(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.epsilon * self._f(x[:, 0])

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.column_stack([self.epsilon * self._df(x[:, 0]), np.zeros(len(x))])

    def hess(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = np.zeros((len(x), 2, 2))
        h[:, 0, 0] = self.epsilon * self._d2f(x[:, 0])
        return h


class GridPressure(InitialPressure):
    """Pressure given on an n x n grid, evaluated by trigonometric interpolation.

    ``values[i, j]`` is p0 at (i/n, j/n). The Nyquist mode is dropped so the
    interpolant and its derivatives are real.
    """

    name = "grid-file"

    def __init__(self, values, path: str | None = None):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("grid pressure must be a square array")
        self.path = path
        self.n = values.shape[0]
        coef = np.fft.fft2(values) / self.n ** 2
        k = np.fft.fftfreq(self.n, 1.0 / self.n)
        if self.n % 2 == 0:
            coef[self.n // 2, :] = 0.0
            coef[:, self.n // 2] = 0.0
        self._coef = coef
        self._k = k

    @classmethod
    def from_file(cls, path) -> "GridPressure":
        tokens = Path(path).read_text().split()
        if not tokens:
            raise ValueError(f"{path}: empty grid file")
        n = int(tokens[0])
        vals = np.array([float(t) for t in tokens[1:]])
        if len(vals) != n * n:
            raise ValueError(f"{path}: expected {n * n} values after header, got {len(vals)}")
        return cls(vals.reshape(n, n), str(path))

    def describe(self):
        return {"scenario": self.name, "path": self.path, "side": self.n}

    def _eval(self, x, m1, m2):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(len(x))
        c = self._coef * np.outer((2j * np.pi * self._k) ** m1, (2j * np.pi * self._k) ** m2)
        for lo in range(0, len(x), 4096):
            xs = x[lo:lo + 4096]
            e1 = np.exp(2j * np.pi * np.outer(xs[:, 0], self._k))
            e2 = np.exp(2j * np.pi * np.outer(xs[:, 1], self._k))
            out[lo:lo + 4096] = ((e1 @ c) * e2).sum(axis=1).real
        return out

    def value(self, x):
        return self._eval(x, 0, 0)

    def grad(self, x):
        return np.column_stack([self._eval(x, 1, 0), self._eval(x, 0, 1)])

    def hess(self, x):
        hxx = self._eval(x, 2, 0)
        hyy = self._eval(x, 0, 2)
        hxy = self._eval(x, 1, 1)
        h = np.empty((len(hxx), 2, 2))
        h[:, 0, 0] = hxx
        h[:, 1, 1] = hyy
        h[:, 0, 1] = h[:, 1, 0] = hxy
        return h


def make_pressure(scenario: str, epsilon: float = 0.01, profile: str = "cos1",
                  path: str | None = None) -> InitialPressure:
    """Resolve a scenario id from a config into an InitialPressure."""
    if scenario == "zero":
        return ZeroPressure()
    if scenario == "sine":
        return SinePressure(epsilon)
    if scenario == "shear":
        return ShearPressure(profile, epsilon)
    if scenario == "grid-file":
        if not path:
            raise ValueError("grid-file scenario needs a path")
        return GridPressure.from_file(path)
    raise ValueError(f"unknown scenario {scenario!r}")


def parse_scenario(text: str) -> InitialPressure:
    """Parse the short forms "zero", "sine 0.01", "shear cos1", "grid-file PATH"."""
    parts = text.split(None, 1)
    if not parts:
        raise ValueError("empty scenario")
    head = parts[0]
    arg = parts[1].strip() if len(parts) > 1 else None
    if head == "zero":
        return ZeroPressure()
    if head == "sine":
        return SinePressure(float(arg) if arg else 0.01)
    if head == "shear":
        return ShearPressure(arg or "cos1", 0.01)
    if head == "grid-file":
        return make_pressure("grid-file", path=arg)
    raise ValueError(f"unknown scenario {text!r}")


def cell_centered_grid(m: int) -> np.ndarray:
    g = (np.arange(m) + 0.5) / m
    return np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)


def sample_initial_cloud(p0: InitialPressure, m: int, check: bool = True) -> DiracCloud:
    """Push the cell-centered m x m grid forward by Id + grad p0.

    Every atom carries mass 1/m^2; the atom at index i*m + j comes from the
    grid point ((i + 1/2)/m, (j + 1/2)/m).
    """
    if m < 2:
        raise ValueError("grid side must be at least 2")
    if check:
        p0.check_convexity()
    x = cell_centered_grid(m)
    y = x + p0.grad(x)
    return DiracCloud.from_points(y, np.full(m * m, 1.0 / (m * m)))
