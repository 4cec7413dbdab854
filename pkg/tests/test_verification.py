import json
import math

import numpy as np
import pytest

from sgtorus.dynamics import simulate
from sgtorus.measures import ZeroPressure, sample_initial_cloud
from sgtorus.verification import (ManufacturedFamily, cofactor, cofactor_algebra,
                                  cofactor_divergence, convergence_orders, d1, d2,
                                  dynamic_checks, grid_hessian, lemma_orlicz_scan, lemma_terms,
                                  linearized_ma_pairing, log_plus, non_var_residual,
                                  orlicz_estimate_report, orlicz_terms, periodic_grid,
                                  refinement_study, static_checks, write_report)


def test_log_plus():
    assert log_plus([0.0, 0.5, 1.0]).tolist() == [0.0, 0.0, 0.0]
    assert log_plus(math.e ** 3) == pytest.approx(3.0)


def test_lemma_examples():
    lhs, rhs = lemma_terms(1.0, 1.0, 1)
    assert lhs == 0.0 and rhs == pytest.approx(1 / math.e + 1, abs=1e-15)
    assert rhs == pytest.approx(1.3679, abs=5e-5)
    lhs, rhs = lemma_terms(math.e ** 2, 1.0, 1)
    assert lhs == pytest.approx(2 * math.e ** 2) and lhs == pytest.approx(14.778, abs=5e-4)
    assert rhs == pytest.approx(1 / math.e + 1 + 4 * math.e ** 4, rel=1e-14)
    assert lhs <= rhs


@pytest.mark.parametrize("k", [1, 2, 5])
def test_lemma_small_a_limit(k):
    lhs, rhs = lemma_terms(1e-300, 3.0, k)
    assert lhs == 0.0
    assert rhs == pytest.approx(2 ** (k - 1) * ((k / math.e) ** k + 1) * 9.0)


def test_lemma_scan_small():
    scan = lemma_orlicz_scan(20_000, 5, seed=1)
    assert scan.passed and scan.worst_margin >= 0.0
    with pytest.raises(ValueError):
        lemma_orlicz_scan(0, 1)


def test_cofactor_examples():
    assert np.array_equal(cofactor(np.eye(2)), np.eye(2))
    assert np.array_equal(cofactor(np.diag([0.5, 3.0])), np.diag([3.0, 0.5]))
    a = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert np.allclose(cofactor(a) @ a, np.linalg.det(a) * np.eye(2), atol=1e-15)
    res = cofactor_algebra(5000, seed=3)
    assert res.passed and res.bound_margin >= -1e-12


def test_grid_calculus_second_order():
    errs = []
    for n in (32, 64):
        y = periodic_grid(n)
        f = np.sin(2 * np.pi * y[..., 0]) * np.cos(4 * np.pi * y[..., 1])
        h = 1.0 / n
        fx = 2 * np.pi * np.cos(2 * np.pi * y[..., 0]) * np.cos(4 * np.pi * y[..., 1])
        fyy = -16 * np.pi ** 2 * f
        hs = grid_hessian(f, h)
        errs.append(max(np.abs(d1(f, h, 0) - fx).max(), np.abs(d2(f, h, 1) - fyy).max(),
                        np.abs(hs[..., 1, 1] - fyy).max()))
    assert math.log2(errs[0] / errs[1]) >= 1.9


def test_family_positivity():
    assert ManufacturedFamily(32).check_positive() > 0
    with pytest.raises(ValueError):
        ManufacturedFamily(32, epsilon=0.1).check_positive()
    with pytest.raises(ValueError):
        ManufacturedFamily(32, kind="cubic")


def test_non_var_constant_eps_is_zero():
    assert non_var_residual(ManufacturedFamily(64, rate=0.0)) == 0.0


def test_refinement_orders():
    for func in (cofactor_divergence, non_var_residual):
        r = refinement_study("x", func, (32, 64, 128))
        # ratio about 4 per doubling
        assert r.passed
        assert all(3.4 <= 2 ** p <= 4.6 for p in r.orders)
    assert convergence_orders([1, 2], [4.0, 1.0]) == [2.0]


@pytest.mark.parametrize("kind", ["cos1", "sinsin"])
def test_linearized_pairing(kind):
    p = linearized_ma_pairing(ManufacturedFamily(64, kind=kind))
    assert p.gap <= 1e-12
    assert max(abs(v) for v in p.lhs) > 1e-6


def test_orlicz_terms_zero_when_rates_vanish():
    n = 10
    m = np.full(n, 1 / n)
    h = np.tile(np.eye(2) * 3.0, (n, 1, 1))
    u = np.full((n, 2), 0.1)
    lhs, rh, ru = orlicz_terms(m, np.zeros((n, 2)), h, u, np.ones(n), 1)
    assert lhs == 0.0
    hn = 3 * math.sqrt(2)
    assert rh == pytest.approx(hn * math.log(hn) ** 2)
    assert ru == pytest.approx(0.02 * hn)


@pytest.fixture(scope="module")
def zero_run():
    return simulate(sample_initial_cloud(ZeroPressure(), 16), 0.1, 0.3)


def test_orlicz_report_uniform(zero_run):
    reps = orlicz_estimate_report(zero_run.snapshots, zero_run.masses, k=2, bins=4)
    assert len(reps) == 4
    assert all(r.lhs == 0.0 and r.ratio == 0.0 for r in reps)


def test_orlicz_report_shear_steady(shear64):
    reps = orlicz_estimate_report(shear64.snapshots[::10], shear64.masses, k=1, bins=8)
    assert max(r.lhs for r in reps) <= 1e-2


def test_dynamic_checks_uniform(zero_run, tmp_path):
    checks = dynamic_checks(zero_run.snapshots, zero_run.masses, 4)
    assert all(c.status == "pass" for c in checks)
    by = {c.name: c for c in checks}
    assert by["mass_sum"].value == 0.0 and by["dual_velocity_bound"].value == 0.0
    doc = write_report(tmp_path / "r.json", checks, {"run": "zero"})
    assert doc["passed"] and json.loads((tmp_path / "r.json").read_text())["passed"]


def test_static_checks_quick():
    checks = static_checks(10_000, 5_000, (32, 64, 128), seed=4)
    bad = [c.name for c in checks if c.status != "pass"]
    assert not bad
    json.dumps([c.as_dict() for c in checks])
