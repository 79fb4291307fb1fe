import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posenorm.errors import DegenerateBody, ParseError, ShapeMismatch
from posenorm.scoremap import (GroundtruthSpec, extract_positions, gaussian_blur, groundtruth_radius,
                               make_groundtruth, peak_positions, read_smap, score_to_prob,
                               smap_from_bytes, smap_to_bytes, write_smap)
from posenorm.skeleton import KeypointSet


def _kp(sk, **named):
    pts = np.tile([[32.0, 32.0]], (14, 1)) + np.arange(14)[:, None] * [1.0, 0.0]
    for name, p in named.items():
        pts[sk.index(name.replace("_", "-"))] = p
    return KeypointSet(pts)


# --- groundtruth -------------------------------------------------------------

def test_radius_from_torso_diagonal(sk):
    assert groundtruth_radius(_kp(sk, l_shoulder=(10, 10), r_hip=(10, 50)), sk, 0.15) == pytest.approx(6.0)
    assert groundtruth_radius(_kp(sk, l_shoulder=(0, 0), r_hip=(30, 40)), sk, 0.15) == pytest.approx(7.5)


def test_radius_degenerate(sk):
    with pytest.raises(DegenerateBody):
        groundtruth_radius(_kp(sk, l_shoulder=(5, 5), r_hip=(5, 5)), sk)


def test_gaussian_values(sk):
    kp = _kp(sk, neck=(20, 30))
    m = make_groundtruth(kp, sk, GroundtruthSpec("gaussian", gauss_sigma=2.0), 64, 64)
    assert m.shape == (15, 64, 64)
    assert m[12, 30, 20] == 1.0
    assert m[12, 30, 22] == pytest.approx(math.exp(-0.5))
    assert np.all(m[14] == 0)


def test_disk_boundary_is_inclusive(sk):
    # r = 0.15 * 40 = 6 exactly
    kp = _kp(sk, l_shoulder=(10, 10), r_hip=(10, 50), neck=(40, 20))
    m = make_groundtruth(kp, sk, GroundtruthSpec("disk"), 64, 64)
    assert m[12, 20, 46] == 1.0
    assert m[12, 20, 47] == 0.0
    assert m[14, 20, 47] == 1.0


def test_disk_labels_partition_pixels(sk, rng):
    pts = rng.uniform(10, 54, (14, 2))
    m = make_groundtruth(KeypointSet(pts), sk, GroundtruthSpec("disk"), 64, 64)
    assert np.all(m.sum(axis=0) == 1.0)
    assert set(np.unique(m)) <= {0.0, 1.0}


def test_disk_overlap_goes_to_nearest_then_lower_index(sk):
    kp = _kp(sk, l_shoulder=(10, 10), r_hip=(10, 50), r_ankle=(30, 30), r_knee=(34, 30))
    m = make_groundtruth(kp, sk, GroundtruthSpec("disk"), 64, 64)
    assert m[0, 30, 31] == 1.0 and m[1, 30, 31] == 0.0
    assert m[1, 30, 33] == 1.0
    assert m[0, 30, 32] == 1.0 and m[1, 30, 32] == 0.0  # equidistant: lower index wins


def test_visible_only_drops_occluded(sk):
    kp = _kp(sk, neck=(20, 20))
    kp.visible[12] = False
    m = make_groundtruth(kp, sk, GroundtruthSpec("gaussian"), 32, 32, visible_only=True)
    assert np.all(m[12] == 0)
    assert make_groundtruth(kp, sk, GroundtruthSpec("gaussian"), 32, 32)[12].max() == 1.0


# --- blur, probabilities -----------------------------------------------------

def test_blur_keeps_constants():
    m = np.full((2, 16, 16), 3.25)
    assert np.allclose(gaussian_blur(m, 1.5), 3.25)


def test_blur_impulse_center_matches_kernel():
    m = np.zeros((1, 21, 21))
    m[0, 10, 10] = 1.0
    r = 3
    g = np.exp(-np.arange(-r, r + 1) ** 2 / 2.0)
    g /= g.sum()
    assert gaussian_blur(m, 1.0)[0, 10, 10] == pytest.approx(g[r] ** 2, rel=1e-12)


def test_blur_is_linear_and_preserves_mass():
    a = np.zeros((1, 40, 40))
    b = np.zeros((1, 40, 40))
    a[0, 10, 10] = 1.0
    b[0, 30, 25] = 2.0
    assert np.allclose(gaussian_blur(a + b), gaussian_blur(a) + gaussian_blur(b))
    assert gaussian_blur(a + b).sum() == pytest.approx(3.0, abs=1e-6)


def test_blur_rejects_bad_sigma():
    with pytest.raises(ValueError):
        gaussian_blur(np.zeros((1, 4, 4)), 0.0)


def test_softmax_and_sigmoid_like(rng):
    assert np.allclose(score_to_prob(np.zeros((15, 4, 4)), "softmax"), 1 / 15)
    p = score_to_prob(rng.normal(0, 10, (15, 8, 8)), "softmax")
    assert np.allclose(p.sum(axis=0), 1.0, atol=1e-6)
    assert p.min() >= 0 and p.max() <= 1
    assert score_to_prob(np.zeros((1, 1, 1)), "sigmoid_like")[0, 0, 0] == 0.5
    v = score_to_prob(np.ones((1, 1, 1)), "sigmoid_like", w=2.0, b=1.0)[0, 0, 0]
    assert v == pytest.approx(1 / (1 + math.exp(-3)))
    with pytest.raises(ValueError):
        score_to_prob(np.zeros((1, 1, 1)), "tanh")


# --- extraction --------------------------------------------------------------

def test_extract_impulse(sk):
    m = np.zeros((15, 16, 16))
    m[4, 3, 7] = 1.0
    kp = extract_positions(m, sk)
    assert tuple(kp.points[4]) == (7.0, 3.0)
    assert kp.visible.all()


def test_extract_tie_breaks_row_major(sk):
    m = np.zeros((15, 16, 16))
    m[0, 5, 2] = 1.0
    m[0, 1, 9] = 1.0
    assert tuple(extract_positions(m, sk, blur_sigma=0.3).points[0]) == (9.0, 1.0)


def test_extract_matches_exhaustive_scan(sk, rng):
    m = rng.random((15, 20, 24))
    m[:, 7, 11] += 5.0
    blurred = gaussian_blur(m[:14], 1.5)
    for k in range(14):
        best, arg = -np.inf, None
        for y in range(20):
            for x in range(24):
                if blurred[k, y, x] > best:
                    best, arg = blurred[k, y, x], (x, y)
        assert tuple(extract_positions(m, sk).points[k]) == arg


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_extract_invariant_to_monotone_rescaling(scale, shift):
    from posenorm.skeleton import canonical_skeleton
    sk = canonical_skeleton()
    m = np.random.default_rng(7).random((15, 12, 12))
    assert extract_positions(m, sk) == extract_positions(scale * m + shift, sk)


def test_extract_shape_check(sk):
    with pytest.raises(ShapeMismatch):
        extract_positions(np.zeros((3, 8, 8)), sk)


def test_peak_positions_order():
    m = np.zeros((2, 20, 22))
    m[1, 14, 5] = 1
    m[0, 6, 15] = 1
    assert peak_positions(m).tolist() == [[15.0, 6.0], [5.0, 14.0]]


# --- SMAP1 -------------------------------------------------------------------

def test_smap_layout():
    m = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    buf = smap_to_bytes(m)
    assert buf[:4] == b"SMAP"
    assert np.frombuffer(buf[4:20], "<u4").tolist() == [1, 2, 3, 4]
    assert np.frombuffer(buf[20:], "<f4").tolist() == list(range(24))


def test_smap_roundtrip(tmp_path, rng):
    m = rng.random((15, 9, 7)).astype(np.float32)
    write_smap(tmp_path / "a.smap", m)
    back = read_smap(tmp_path / "a.smap")
    assert np.array_equal(back, m)
    assert smap_to_bytes(back) == (tmp_path / "a.smap").read_bytes()


@pytest.mark.parametrize("cut", [0, 10, 19, 21])
def test_smap_truncation(cut):
    buf = smap_to_bytes(np.zeros((1, 2, 2), np.float32))
    with pytest.raises(ParseError) as exc:
        smap_from_bytes(buf[:cut])
    assert exc.value.offset is not None


def test_smap_bad_magic_and_version():
    buf = bytearray(smap_to_bytes(np.zeros((1, 2, 2), np.float32)))
    with pytest.raises(ParseError):
        smap_from_bytes(b"XMAP" + bytes(buf[4:]))
    buf[4] = 2
    with pytest.raises(ParseError):
        smap_from_bytes(bytes(buf))
