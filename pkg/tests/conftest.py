import math
import time

import pytest

from sgtorus.dynamics import simulate
from sgtorus.measures import ShearPressure, SinePressure, ZeroPressure, sample_initial_cloud

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = {}


def record(num: int, passed: bool, detail: str):
    ACCEPTANCE[num] = (bool(passed), detail)
    print(f"CRITERION {num:2d} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        tr.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


class TimedRun:
    def __init__(self, result, seconds):
        self.result = result
        self.seconds = seconds

    @property
    def snapshots(self):
        return self.result.snapshots

    @property
    def diagnostics(self):
        return self.result.diagnostics

    @property
    def masses(self):
        return self.result.masses


def _timed(cloud, dt, t_end, scheme="heun", bins=None):
    t0 = time.perf_counter()
    res = simulate(cloud, dt, t_end, scheme, histogram_bins=bins)
    return TimedRun(res, time.perf_counter() - t0)


SINE_EPS = 0.01


def sine_dt(m: int) -> float:
    # dt proportional to 1/sqrt(N); T = 0.5 is a multiple for m in {16, 32, 64}
    return 0.8 / m


@pytest.fixture(scope="session")
def sine_runs():
    """Sine scenario at N = 16^2, 32^2, 64^2 with dt = 0.8/sqrt(N), T = 0.5."""
    out = {}
    for m in (16, 32, 64):
        cloud = sample_initial_cloud(SinePressure(SINE_EPS), m)
        out[m] = _timed(cloud, sine_dt(m), 0.5, "heun", bins=8)
    return out


@pytest.fixture(scope="session")
def sine64(sine_runs):
    return sine_runs[64]


@pytest.fixture(scope="session")
def shear64():
    cloud = sample_initial_cloud(ShearPressure("cos1", 0.01), 64)
    return _timed(cloud, 1e-2, 0.5, "heun")


@pytest.fixture(scope="session")
def zero64():
    cloud = sample_initial_cloud(ZeroPressure(), 64)
    return _timed(cloud, 0.05, 1.0, "heun")


def order(e_coarse, e_fine, ratio=2.0):
    if e_fine <= 0.0:
        return math.inf
    return math.log(e_coarse / e_fine) / math.log(ratio)
