"""Planar rotations about a centre and bilinear warping of score maps."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, ZeroVector

UP = np.array([0.0, -1.0])  # vertical upward in y-down image coordinates
DOWN = np.array([0.0, 1.0])

# Source coordinates this close to a pixel centre are snapped onto it, which
# keeps 90-degree turns and identity warps exact permutations.
_SNAP = 1e-9


def rotation_matrix(theta):
    if not np.isfinite(theta):
        raise ValueError("theta must be finite")
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def signed_angle(v, target):
    """Angle that rotates ``v`` onto the direction of ``target``, in (-pi, pi]."""
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        raise ZeroVector("cannot measure the angle of a zero vector")
    cross = v[0] * target[1] - v[1] * target[0]
    theta = float(np.arctan2(cross, v @ target))
    return np.pi if theta == -np.pi else theta


def signed_angle_to_vertical(v):
    return signed_angle(v, UP)


@dataclass(frozen=True)
class Transform2D:
    """x -> R (x - c) + c."""

    R: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(2, 2))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float).reshape(2))

    @classmethod
    def from_angle(cls, theta, center):
        return cls(rotation_matrix(theta), center)

    @classmethod
    def identity(cls, center=(0.0, 0.0)):
        return cls(np.eye(2), center)

    @property
    def angle(self):
        return float(np.arctan2(self.R[1, 0], self.R[0, 0]))

    def is_identity(self):
        return np.array_equal(self.R, np.eye(2))

    def __eq__(self, other):
        if not isinstance(other, Transform2D):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.c, other.c)


def transform_point(t, p):
    """Apply ``t`` to one point or an ``(n, 2)`` array of points."""
    p = np.asarray(p, dtype=float)
    return (p - t.c) @ t.R.T + t.c


def invert(t):
    return Transform2D(t.R.T, t.c)


def _bilinear_taps(h, w, A, c):
    """Flat source indices and weights for sampling at A (q - c) + c over the grid.

    Returns ``idx, wts`` of shape ``(4, h*w)``; taps falling outside the map
    carry weight 0.
    """
    ys, xs = np.mgrid[0:h, 0:w]
    qx = xs.ravel() - c[0]
    qy = ys.ravel() - c[1]
    sx = A[0, 0] * qx + A[0, 1] * qy + c[0]
    sy = A[1, 0] * qx + A[1, 1] * qy + c[1]
    for s in (sx, sy):
        r = np.round(s)
        near = np.abs(s - r) < _SNAP
        s[near] = r[near]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    idx = np.empty((4, h * w), dtype=np.int64)
    wts = np.empty((4, h * w))
    corners = ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
               (0, 1, (1 - fx) * fy), (1, 1, fx * fy))
    for k, (dx, dy, wk) in enumerate(corners):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx[k] = np.where(ok, yi * w + xi, 0)
        wts[k] = np.where(ok, wk, 0.0)
    return idx, wts


def _channel_list(n, channels):
    if channels is None:
        return list(range(n))
    channels = list(channels)
    if any(ch < 0 or ch >= n for ch in channels):
        raise ShapeMismatch(f"channel subset {channels} outside 0..{n - 1}")
    return channels


def resample(m, A, c, channels=None):
    """out(q) = in(A (q - c) + c) with bilinear interpolation and zero fill.

    Channels not listed in ``channels`` are copied unchanged.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 3:
        raise ShapeMismatch(f"score map must be 3-D, got shape {m.shape}")
    n, h, w = m.shape
    out = m.copy()
    idx, wts = _bilinear_taps(h, w, np.asarray(A, dtype=float), np.asarray(c, dtype=float))
    for ch in _channel_list(n, channels):
        src = m[ch].ravel()
        out[ch] = (wts[0] * src[idx[0]] + wts[1] * src[idx[1]]
                   + wts[2] * src[idx[2]] + wts[3] * src[idx[3]]).reshape(h, w)
    return out


def resample_backward(grad_out, A, c, channels=None):
    """Adjoint of :func:`resample` with respect to the input values."""
    g = np.asarray(grad_out, dtype=float)
    n, h, w = g.shape
    grad_in = g.copy()
    idx, wts = _bilinear_taps(h, w, np.asarray(A, dtype=float), np.asarray(c, dtype=float))
    flat_idx = idx.ravel()
    for ch in _channel_list(n, channels):
        contrib = (wts * g[ch].ravel()).ravel()
        grad_in[ch] = np.bincount(flat_idx, weights=contrib, minlength=h * w).reshape(h, w)
    return grad_in


def warp_map(m, t, channels=None):
    """Move map content by ``t``: content at p ends up at R (p - c) + c."""
    if t.is_identity():
        return np.array(m, dtype=float)
    return resample(m, t.R.T, t.c, channels)


def warp_backward(grad_out, t, channels=None):
    if t.is_identity():
        return np.array(grad_out, dtype=float)
    return resample_backward(grad_out, t.R.T, t.c, channels)
