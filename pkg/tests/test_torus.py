import math

import numpy as np
import pytest

from sgtorus.torus import (TORUS_DIAMETER, apply_J, canonicalize, clip_polygon_halfplane,
                           minimal_lift, polygon_area_centroid, split_lift, torus_distance)

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


@pytest.mark.parametrize("p, expected", [
    ((1.25, -0.5), (0.25, 0.5)),
    ((0.0, 0.999), (0.0, 0.999)),
    ((-3.0, 7.0), (0.0, 0.0)),
])
def test_canonicalize_examples(p, expected):
    assert np.allclose(canonicalize(p), expected, atol=1e-15, rtol=0)


def test_canonicalize_tiny_negative_stays_in_unit_square():
    r = canonicalize([-1e-20, 0.5])
    assert 0.0 <= r[0] < 1.0


def test_canonicalize_rejects_nonfinite():
    with pytest.raises(ValueError):
        canonicalize([np.nan, 0.0])
    with pytest.raises(ValueError):
        split_lift([np.inf, 0.0])


def test_canonicalize_integer_shift_invariance():
    rng = np.random.default_rng(0)
    p = rng.integers(0, 2 ** 20, (1000, 2)) / 2.0 ** 20
    h = rng.integers(-5, 6, (1000, 2))
    assert np.array_equal(canonicalize(p + h), canonicalize(p))


def test_split_lift_reassembles():
    rng = np.random.default_rng(1)
    p = rng.uniform(-4, 4, (1000, 2))
    canon, lift = split_lift(p)
    assert np.all((canon >= 0) & (canon < 1))
    assert np.allclose(canon + lift, p, atol=1e-15)
    assert np.array_equal(lift, np.round(lift))


def test_apply_J_is_quarter_turn():
    assert np.array_equal(apply_J([1.0, 0.0]), [0.0, 1.0])
    assert np.array_equal(apply_J([0.0, 1.0]), [-1.0, 0.0])
    v = np.random.default_rng(2).normal(size=(10, 2))
    assert np.allclose(apply_J(apply_J(v)), -v)


def test_minimal_lift_examples():
    assert np.allclose(minimal_lift([0.1, 0.5], [0.9, 0.5]), [-0.2, 0.0])
    assert np.array_equal(minimal_lift([0.3, 0.7], [0.3, 0.7]), [0.0, 0.0])
    v = minimal_lift([0.25, 0.25], [0.75, 0.75])
    assert np.array_equal(v, [-0.5, -0.5])
    assert math.isclose(np.linalg.norm(v), TORUS_DIAMETER)


def test_minimal_lift_properties():
    rng = np.random.default_rng(3)
    p = rng.random((5000, 2))
    q = rng.random((5000, 2))
    v = minimal_lift(p, q)
    assert np.all((v >= -0.5) & (v < 0.5))
    back = p + v - q
    assert np.allclose(back, np.round(back), atol=1e-14)
    assert np.allclose(minimal_lift(q, p), -v, atol=1e-15)
    assert torus_distance(p, q).max() <= TORUS_DIAMETER


def test_polygon_area_centroid_square_and_orientation():
    a, c = polygon_area_centroid(SQUARE)
    assert a == 1.0 and np.allclose(c, [0.5, 0.5])
    a, _ = polygon_area_centroid(SQUARE[::-1])
    assert a == -1.0
    a, _ = polygon_area_centroid(SQUARE[:2])
    assert a == 0.0


def _random_convex(rng):
    ang = np.sort(rng.uniform(0, 2 * np.pi, rng.integers(3, 9)))
    r = rng.uniform(0.3, 1.0)
    return np.column_stack([r * np.cos(ang), r * np.sin(ang)]) + rng.uniform(-1, 1, 2)


def test_polygon_area_centroid_monte_carlo():
    rng = np.random.default_rng(4)
    for _ in range(5):
        poly = _random_convex(rng)
        a, c = polygon_area_centroid(poly)
        lo, hi = poly.min(axis=0), poly.max(axis=0)
        n = 200_000
        pts = rng.uniform(lo, hi, (n, 2))
        inside = np.ones(n, dtype=bool)
        for k in range(len(poly)):
            e = poly[(k + 1) % len(poly)] - poly[k]
            d = pts - poly[k]
            inside &= e[0] * d[:, 1] - e[1] * d[:, 0] >= 0
        box = np.prod(hi - lo)
        frac = inside.mean()
        sigma_a = box * math.sqrt(frac * (1 - frac) / n)
        assert abs(a - box * frac) <= 3 * sigma_a
        sel = pts[inside]
        sigma_c = sel.std(axis=0) / math.sqrt(len(sel))
        assert np.all(np.abs(sel.mean(axis=0) - c) <= 3 * sigma_c + 1e-12)


def test_clip_examples():
    half = clip_polygon_halfplane(SQUARE, [1.0, 0.0], 0.5)
    a, c = polygon_area_centroid(half)
    assert math.isclose(a, 0.5) and np.allclose(c, [0.25, 0.5])
    same = clip_polygon_halfplane(SQUARE, [1.0, 0.0], 2.0)
    assert polygon_area_centroid(same)[0] == 1.0
    assert len(clip_polygon_halfplane(SQUARE, [1.0, 0.0], -1.0)) == 0


def test_clip_keeps_ccw_and_rejects_zero_normal():
    cut = clip_polygon_halfplane(SQUARE, [1.0, 1.0], 1.0)
    a, _ = polygon_area_centroid(cut)
    assert math.isclose(a, 0.5)
    with pytest.raises(ValueError):
        clip_polygon_halfplane(SQUARE, [0.0, 0.0], 1.0)
