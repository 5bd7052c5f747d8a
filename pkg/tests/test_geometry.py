import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from occstep import tensor as tn
from occstep.geometry import (PlanarMotion, check_pose, compose, inverse, reanchor, reflect_y,
                              relative_from_absolute, se2_to_se3, se3_to_planar, voxel_shift,
                              warp_trilinear, wrap_angle)
from occstep.grid import GridGeometry, desk_geometry, metric_to_index

finite = st.floats(-5, 5, allow_nan=False)
angles = st.floats(-3.1, 3.1, allow_nan=False)


def random_pose(rng, scale=1.0):
    return se2_to_se3((rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-math.pi, math.pi)))


def test_se2_examples():
    np.testing.assert_array_equal(se2_to_se3((0, 0, 0)), np.eye(4))
    T = se2_to_se3((1, 0, 0))
    np.testing.assert_array_equal(T[:3, :3], np.eye(3))
    np.testing.assert_array_equal(T[:3, 3], [1, 0, 0])
    np.testing.assert_allclose(se2_to_se3((0, 0, math.pi / 2))[:2, :2], [[0, -1], [1, 0]], atol=1e-15)


def test_planar_motion_rejects_non_finite():
    with pytest.raises(ValueError):
        PlanarMotion(float("nan"), 0, 0)
    with pytest.raises(ValueError):
        se2_to_se3((0, float("inf"), 0))


@given(finite, finite, angles)
def test_se2_planar_roundtrip(x, y, psi):
    m = se3_to_planar(se2_to_se3((x, y, psi)))
    np.testing.assert_allclose(m.as_array(), [x, y, psi], atol=1e-12)


def test_compose_inverse(rng):
    T = random_pose(rng)
    np.testing.assert_array_equal(compose(np.eye(4), T), T)
    np.testing.assert_allclose(compose(T, inverse(T)), np.eye(4), atol=1e-9)
    check_pose(compose(T, random_pose(rng)))


def test_chain_matches_naive_product(rng):
    poses = [random_pose(rng, 0.3) for _ in range(4)]
    out = np.eye(4)
    for p in poses:
        out = compose(out, p)
    naive = np.eye(4)
    for p in poses:
        naive = np.array([[sum(naive[i, k] * p[k, j] for k in range(4)) for j in range(4)] for i in range(4)])
    np.testing.assert_allclose(out, naive, atol=1e-12)


def test_check_pose_rejects_bad_matrices():
    with pytest.raises(ValueError):
        check_pose(np.eye(3))
    bad = np.eye(4)
    bad[0, 0] = 2
    with pytest.raises(ValueError):
        check_pose(bad)
    refl = np.diag([1.0, -1.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        check_pose(refl)


def test_reflect_y_examples(rng):
    np.testing.assert_array_equal(reflect_y(np.eye(4)), np.eye(4))
    T = random_pose(rng)
    np.testing.assert_array_equal(reflect_y(reflect_y(T)), T)
    np.testing.assert_allclose(reflect_y(se2_to_se3((1, 2, 0.3))), se2_to_se3((1, -2, -0.3)), atol=1e-15)
    check_pose(reflect_y(T))


@pytest.mark.parametrize("psi,expected", [(0, 0), (2 * math.pi, 0), (3 * math.pi / 2, -math.pi / 2),
                                          (math.pi, math.pi), (-math.pi, math.pi)])
def test_wrap_angle_examples(psi, expected):
    assert wrap_angle(psi) == pytest.approx(expected, abs=1e-12)


@given(st.floats(-10, 10, allow_nan=False), st.integers(-3, 3))
def test_wrap_angle_periodic(psi, k):
    a = wrap_angle(psi)
    assert -math.pi < a <= math.pi
    assert wrap_angle(psi + 2 * math.pi * k) == pytest.approx(a, abs=1e-9) or abs(abs(a) - math.pi) < 1e-9


def test_relative_from_absolute(rng):
    with pytest.raises(ValueError):
        relative_from_absolute([np.eye(4)])
    assert all(np.allclose(r, np.eye(4)) for r in relative_from_absolute([np.eye(4)] * 3))
    rel = relative_from_absolute([np.eye(4), se2_to_se3((1, 0, 0))])
    np.testing.assert_allclose(rel[0], se2_to_se3((1, 0, 0)))
    poses = [random_pose(rng, 3) for _ in range(6)]
    acc = poses[0]
    for r in relative_from_absolute(poses):
        acc = compose(acc, r)
    np.testing.assert_allclose(acc, poses[-1], atol=1e-9)


def test_reanchor_is_frame_change():
    """A static point seen from a moved ego appears displaced by the inverse motion."""
    g = GridGeometry((1, 8, 8), (0, 8, 0, 8, 0, 1))
    field = np.zeros((1, 1, 8, 8))
    field[0, 0, 4, 4] = 1.0
    moved = warp_trilinear(field, reanchor(se2_to_se3((1.0, 0, 0))), g)  # ego moves +1 m in x
    assert moved[0, 0, 3, 4] == 1.0 and moved.sum() == 1.0


def test_warp_identity_exact(rng):
    g = desk_geometry((4, 8, 8), 0.4)
    f = rng.standard_normal((3, 4, 8, 8))
    np.testing.assert_array_equal(warp_trilinear(f, np.eye(4), g), f)


@pytest.mark.parametrize("axis,shift", [(0, (0, 1, 0)), (1, (0, 0, 1)), (2, (1, 0, 0))])
def test_warp_integer_translation_is_shift(rng, axis, shift):
    g = desk_geometry((4, 8, 8), 0.4)
    f = rng.standard_normal((2, 4, 8, 8))
    t = np.eye(4)
    t[axis, 3] = 0.4
    np.testing.assert_array_equal(warp_trilinear(f, t, g), voxel_shift(f, shift))
    t[axis, 3] = -0.8
    np.testing.assert_array_equal(warp_trilinear(f, t, g), voxel_shift(f, tuple(-2 * s for s in shift)))


def test_warp_composition_on_ramp():
    g = desk_geometry((4, 16, 16), 0.4)
    c = g.centers()
    ramp = (0.3 * c[..., 0] - 0.7 * c[..., 1] + 0.2 * c[..., 2] + 1.0)[None]
    T1, T2 = se2_to_se3((0.23, -0.11, 0.07)), se2_to_se3((-0.17, 0.31, -0.05))
    a = warp_trilinear(warp_trilinear(ramp, T1, g), T2, g)
    b = warp_trilinear(ramp, compose(T2, T1), g)
    # compare where every sample of both paths (and their neighbours) stayed inside the grid
    pts = np.concatenate([c.reshape(-1, 3), np.ones((c[..., 0].size, 1))], 1)
    inner = np.ones(len(pts), bool)
    for t in (inverse(T2), compose(inverse(T1), inverse(T2))):
        idx = metric_to_index(g, (pts @ t.T)[:, :3])
        inner &= np.all((idx >= 1) & (idx <= np.array(g.dims) - 2), axis=1)
    assert inner.sum() > 200
    assert np.abs(a.reshape(-1)[inner] - b.reshape(-1)[inner]).max() < 1e-5


def test_warp_linear_in_field(rng):
    g = desk_geometry((4, 8, 8), 0.4)
    f, h = rng.standard_normal((2, 2, 4, 8, 8))
    T = se2_to_se3((0.3, 0.1, 0.4))
    np.testing.assert_allclose(warp_trilinear(2 * f - 3 * h, T, g),
                               2 * warp_trilinear(f, T, g) - 3 * warp_trilinear(h, T, g), atol=1e-6)


def test_warp_shape_mismatch():
    with pytest.raises(ValueError):
        warp_trilinear(np.zeros((1, 4, 8, 9)), np.eye(4), desk_geometry((4, 8, 8), 0.4))


def test_warp_gradient_matches_finite_differences(rng):
    g = desk_geometry((4, 4, 4), 0.5)
    T = se2_to_se3((0.21, -0.13, 0.3))
    err = tn.grad_check(lambda f: warp_trilinear(f, T, g), [rng.standard_normal((1, 4, 4, 4))])
    assert err < 1e-4
