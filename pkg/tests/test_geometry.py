import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posenorm.errors import ShapeMismatch, ZeroVector
from posenorm.geometry import (Transform2D, invert, rotation_matrix, signed_angle, signed_angle_to_vertical,
                               transform_point, warp_backward, warp_map)
from posenorm.scoremap import gaussian_blur

angles = st.floats(-math.pi, math.pi, allow_nan=False)
coords = st.floats(-500, 500, allow_nan=False)


def test_rotation_matrix_values():
    assert np.array_equal(rotation_matrix(0.0), np.eye(2))
    assert np.allclose(rotation_matrix(math.pi / 2), [[0, -1], [1, 0]], atol=1e-15)
    assert np.allclose(rotation_matrix(math.pi / 6), [[0.86603, -0.5], [0.5, 0.86603]], atol=1e-5)
    with pytest.raises(ValueError):
        rotation_matrix(float("inf"))


@settings(max_examples=100, deadline=None)
@given(angles)
def test_rotation_is_orthonormal(theta):
    R = rotation_matrix(theta)
    assert np.allclose(R.T @ R, np.eye(2), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_signed_angle_examples():
    assert signed_angle_to_vertical((0.0, -1.0)) == 0.0
    assert signed_angle_to_vertical((1.0, 0.0)) == pytest.approx(-math.pi / 2)
    assert np.allclose(rotation_matrix(-math.pi / 2) @ (1, 0), (0, -1), atol=1e-15)
    assert signed_angle_to_vertical((0.0, 1.0)) == math.pi
    with pytest.raises(ZeroVector):
        signed_angle_to_vertical((0.0, 0.0))


@settings(max_examples=200, deadline=None)
@given(coords, coords)
def test_signed_angle_aligns_vector_and_matches_arccos(x, y):
    v = np.array([x, y])
    if np.hypot(x, y) < 1e-6:
        return
    theta = signed_angle_to_vertical(v)
    assert -math.pi < theta <= math.pi
    u = rotation_matrix(theta) @ v / np.hypot(x, y)
    assert np.allclose(u, (0, -1), atol=1e-9)
    assert abs(theta) == pytest.approx(math.acos(np.clip(-y / np.hypot(x, y), -1, 1)), abs=1e-6)


def test_signed_angle_to_down():
    assert signed_angle((1.0, 0.0), np.array([0.0, 1.0])) == pytest.approx(math.pi / 2)


def test_transform_point_examples():
    t = Transform2D.from_angle(math.pi / 2, (10, 10))
    assert np.allclose(transform_point(t, (11, 10)), (10, 11))
    assert np.allclose(transform_point(t, (10, 10)), (10, 10))
    assert np.array_equal(transform_point(Transform2D.identity((3, 4)), (7.5, -2)), (7.5, -2))
    pts = np.array([[11.0, 10.0], [10.0, 10.0]])
    assert np.allclose(transform_point(t, pts), [[10, 11], [10, 10]])


def test_invert_examples():
    assert invert(Transform2D.identity()).is_identity()
    t = Transform2D.from_angle(math.pi / 2, (5, 5))
    fwd = transform_point(t, (9, 5))
    assert np.allclose(fwd, (5, 9))
    assert np.allclose(transform_point(invert(t), fwd), (9, 5))
    t = Transform2D.from_angle(math.pi / 3, (1.5, -2))
    p = np.array([4.0, 7.0])
    assert np.abs(transform_point(invert(t), transform_point(t, p)) - p).max() < 1e-9


@settings(max_examples=200, deadline=None)
@given(angles, coords, coords, coords, coords, coords, coords)
def test_point_roundtrip_and_isometry(theta, cx, cy, px, py, qx, qy):
    t = Transform2D.from_angle(theta, (cx, cy))
    p, q = np.array([px, py]), np.array([qx, qy])
    assert np.abs(transform_point(invert(t), transform_point(t, p)) - p).max() < 1e-9
    d = np.hypot(*(transform_point(t, p) - transform_point(t, q)))
    assert d == pytest.approx(np.hypot(*(p - q)), abs=1e-9)


# --- warping -----------------------------------------------------------------

def test_identity_warp_is_bit_equal(rng):
    m = rng.random((3, 10, 12))
    assert np.array_equal(warp_map(m, Transform2D.identity((4, 4))), m)
    assert np.array_equal(warp_backward(m, Transform2D.identity()), m)


def test_quarter_turn_moves_impulse_exactly():
    m = np.zeros((1, 33, 33))
    c = (16.0, 16.0)
    m[0, 16, 21] = 1.0  # (c_x + 5, c_y)
    out = warp_map(m, Transform2D.from_angle(math.pi / 2, c))
    expected = np.zeros_like(m)
    expected[0, 21, 16] = 1.0  # (c_x, c_y + 5)
    assert np.array_equal(out, expected)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_quarter_turns_are_permutations(rng, k):
    m = rng.random((2, 17, 17))
    t = Transform2D.from_angle(k * math.pi / 2, (8, 8))
    out = warp_map(m, t)
    assert np.array_equal(out, np.rot90(m, k=-k, axes=(1, 2)))
    assert np.array_equal(warp_map(out, invert(t)), m)


def _bilinear_oracle(m, t):
    """Per-pixel evaluation of out(q) = in(R^T (q - c) + c) with zero fill."""
    _, h, w = m.shape
    A = t.R.T
    out = np.zeros_like(m)
    for y in range(h):
        for x in range(w):
            qx, qy = x - t.c[0], y - t.c[1]
            sx = A[0, 0] * qx + A[0, 1] * qy + t.c[0]
            sy = A[1, 0] * qx + A[1, 1] * qy + t.c[1]
            x0, y0 = math.floor(sx), math.floor(sy)
            fx, fy = sx - x0, sy - y0
            acc = np.zeros(m.shape[0])
            for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                               (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
                xi, yi = x0 + dx, y0 + dy
                if 0 <= xi < w and 0 <= yi < h:
                    acc = acc + wt * m[:, yi, xi]
            out[:, y, x] = acc
    return out


def test_warp_matches_per_pixel_oracle(rng):
    m = gaussian_blur(rng.random((2, 20, 18)), 1.5)
    t = Transform2D.from_angle(0.7, (8.3, 10.1))
    assert np.abs(warp_map(m, t) - _bilinear_oracle(m, t)).max() == 0.0


def test_warp_channel_subset_copies_others(rng):
    m = rng.random((4, 12, 12))
    out = warp_map(m, Transform2D.from_angle(0.4, (6, 6)), channels=[1, 3])
    assert np.array_equal(out[[0, 2]], m[[0, 2]])
    assert not np.array_equal(out[1], m[1])
    with pytest.raises(ShapeMismatch):
        warp_map(m, Transform2D.from_angle(0.4, (6, 6)), channels=[4])


def test_warp_zero_fills_outside(rng):
    m = np.ones((1, 10, 10))
    out = warp_map(m, Transform2D.from_angle(math.pi / 4, (0, 0)))
    assert out[0, 0, 9] == 0.0


@pytest.mark.parametrize("channels", [None, [0, 2]])
def test_warp_adjoint(rng, channels):
    for _ in range(20):
        m = rng.standard_normal((3, 16, 15))
        g = rng.standard_normal((3, 16, 15))
        t = Transform2D.from_angle(rng.uniform(-math.pi, math.pi), rng.uniform(0, 16, 2))
        lhs = np.sum(warp_map(m, t, channels) * g)
        rhs = np.sum(m * warp_backward(g, t, channels))
        assert lhs == pytest.approx(rhs, abs=1e-9)


def test_backward_single_pixel_spreads_over_four_taps():
    g = np.zeros((1, 12, 12))
    g[0, 5, 5] = 2.0
    t = Transform2D.from_angle(0.3, (3.7, 2.2))
    gi = warp_backward(g, t)
    assert np.count_nonzero(gi) == 4
    assert gi.sum() == pytest.approx(2.0)


def test_warp_rejects_non_3d():
    with pytest.raises(ShapeMismatch):
        warp_map(np.zeros((4, 4)), Transform2D.from_angle(0.1, (0, 0)))
