"""Score maps: groundtruth generation, probability mapping, blur, and peak extraction.

A score map is a float array of shape ``(C, H, W)``.  Full maps carry
``K + 1`` channels: the K joint channels in skeleton order followed by one
background channel.  Pixel ``(x, y)`` lives at ``data[:, y, x]`` and pixel
centres sit on integer coordinates.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .errors import DegenerateBody, ParseError, ShapeMismatch
from .skeleton import KeypointSet

SMAP_MAGIC = b"SMAP"
SMAP_VERSION = 1
_SMAP_HEADER = struct.Struct("<4sIIII")

DEFAULT_BLUR_SIGMA = 1.5


@dataclass(frozen=True)
class GroundtruthSpec:
    mode: str = "gaussian"  # "disk" | "gaussian"
    radius_factor: float = 0.15
    gauss_sigma: float = 1.5
    min_radius: float = 1.0  # used when the reference joints coincide

    def __post_init__(self):
        if self.mode not in ("disk", "gaussian"):
            raise ValueError(f"unknown groundtruth mode {self.mode!r}")
        if self.radius_factor <= 0 or self.gauss_sigma <= 0 or self.min_radius <= 0:
            raise ValueError("groundtruth radius factor, sigma and min radius must be positive")


def reference_length(kp, sk):
    """Distance between the left shoulder and the right hip."""
    p = kp.points
    return float(np.hypot(*(p[sk.index("l-shoulder")] - p[sk.index("r-hip")])))


def groundtruth_radius(kp, sk, factor=0.15):
    if factor <= 0:
        raise ValueError("factor must be positive")
    dist = reference_length(kp, sk)
    if dist == 0.0:
        raise DegenerateBody("left shoulder and right hip coincide")
    return factor * dist


def _pixel_grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(float), ys.astype(float)


def make_groundtruth(kp, sk, spec=GroundtruthSpec(), h=64, w=64, visible_only=False):
    """Render the ``(K + 1, h, w)`` groundtruth stack for one pose.

    With ``visible_only`` set, occluded joints get no label (detection
    supervision); by default every joint is labelled (refinement supervision).
    """
    if h < 1 or w < 1:
        raise ValueError("map size must be positive")
    kp.validate(sk)
    K = sk.num_joints
    labelled = kp.visible if visible_only else np.ones(K, dtype=bool)
    xs, ys = _pixel_grid(h, w)
    d2 = np.stack([(xs - x) ** 2 + (ys - y) ** 2 for x, y in kp.points])
    out = np.zeros((K + 1, h, w))

    if spec.mode == "gaussian":
        out[:K] = np.exp(-d2 / (2.0 * spec.gauss_sigma ** 2))
        out[:K][~labelled] = 0.0
        return out

    try:
        r = groundtruth_radius(kp, sk, spec.radius_factor)
    except DegenerateBody:
        r = spec.min_radius
    d2 = np.where(labelled[:, None, None], d2, np.inf)
    inside = np.sqrt(d2) <= r
    nearest = np.argmin(d2, axis=0)
    hit = np.take_along_axis(inside, nearest[None], axis=0)[0]
    label = np.where(hit, nearest, K)
    np.put_along_axis(out, label[None], 1.0, axis=0)
    return out


def gaussian_blur(m, sigma=DEFAULT_BLUR_SIGMA):
    """Per-channel Gaussian blur, kernel cut at ``ceil(3 sigma)`` and renormalised."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    m = np.asarray(m, dtype=float)
    radius = int(math.ceil(3.0 * sigma))
    return ndimage.gaussian_filter(m, sigma, mode="reflect", radius=radius, axes=(-2, -1))


def score_to_prob(m, mode="identity", w=1.0, b=0.0):
    m = np.asarray(m, dtype=float)
    if mode == "identity":
        return m
    if mode == "softmax":
        e = np.exp(m - m.max(axis=0, keepdims=True))
        return e / e.sum(axis=0, keepdims=True)
    if mode == "sigmoid_like":
        return expit(w * m + b)
    raise ValueError(f"unknown probability mode {mode!r}")


def peak_positions(maps, blur_sigma=DEFAULT_BLUR_SIGMA):
    """(x, y) of the maximum of each blurred channel; first hit in row-major order wins."""
    blurred = gaussian_blur(maps, blur_sigma)
    c, h, w = blurred.shape
    flat = np.argmax(blurred.reshape(c, h * w), axis=1)
    return np.stack([flat % w, flat // w], axis=1).astype(float)


def extract_positions(m, sk, blur_sigma=DEFAULT_BLUR_SIGMA, mode="identity", w=1.0, b=0.0):
    """Joint positions from the K joint channels of ``m``.

    The probability mapping is applied across all channels first (softmax
    needs the background channel); the background channel is then dropped.
    """
    m = np.asarray(m, dtype=float)
    K = sk.num_joints
    if m.ndim != 3 or m.shape[0] < K:
        raise ShapeMismatch(f"need at least {K} channels, got shape {m.shape}")
    probs = score_to_prob(m, mode, w, b)[:K]
    return KeypointSet(peak_positions(probs, blur_sigma), np.ones(K, dtype=bool))


def smap_to_bytes(m):
    m = np.asarray(m)
    if m.ndim != 3:
        raise ShapeMismatch(f"score map must be 3-D, got shape {m.shape}")
    c, h, w = m.shape
    header = _SMAP_HEADER.pack(SMAP_MAGIC, SMAP_VERSION, c, h, w)
    return header + np.ascontiguousarray(m, dtype="<f4").tobytes()


def smap_from_bytes(buf):
    if len(buf) < _SMAP_HEADER.size:
        raise ParseError(f"SMAP header truncated at byte {len(buf)}", offset=len(buf))
    magic, version, c, h, w = _SMAP_HEADER.unpack_from(buf)
    if magic != SMAP_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != SMAP_VERSION:
        raise ParseError(f"unsupported SMAP version {version}", offset=4)
    expected = _SMAP_HEADER.size + 4 * c * h * w
    if len(buf) != expected:
        raise ParseError(f"SMAP payload has {len(buf)} bytes, expected {expected}",
                         offset=min(len(buf), expected))
    data = np.frombuffer(buf, dtype="<f4", offset=_SMAP_HEADER.size)
    return data.reshape(c, h, w).astype(np.float32)


def write_smap(path, m):
    with open(path, "wb") as f:
        f.write(smap_to_bytes(m))


def read_smap(path):
    with open(path, "rb") as f:
        return smap_from_bytes(f.read())
