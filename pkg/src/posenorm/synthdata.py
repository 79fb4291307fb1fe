"""Synthetic articulated poses, simulated detector output, augmentation and corpus I/O."""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import CanvasTooSmall, ParseError, SchemaMismatch
from .geometry import resample, rotation_matrix
from .scoremap import read_smap, write_smap
from .skeleton import JOINT_NAMES, KeypointSet, canonical_skeleton

_DEFAULT_BONES = {
    "shoulder_width": 8.0,
    "hip_width": 6.0,
    "torso": 14.0,  # shoulder line to hip line
    "neck": 2.5,  # shoulder midpoint to neck
    "head": 5.0,
    "upper_arm": 8.0,
    "forearm": 7.0,
    "thigh": 10.0,
    "shin": 9.0,
}

# Articulation ranges in radians.  Limb angles are measured from vertical-down
# in the body frame, positive outward; flexion angles bend the distal segment.
_DEFAULT_ANGLES = {
    "global_rotation": (-np.pi, np.pi),
    "torso_lean": (-0.15, 0.15),
    "head": (-0.4, 0.4),
    "upper_arm": (-np.pi, np.pi),
    "elbow": (0.0, 1.75),
    "thigh": (-0.8, 1.6),
    "knee": (0.0, 1.75),
}


@dataclass
class PoseSamplerConfig:
    canvas: tuple = (64, 64)  # (h, w)
    bones: dict = field(default_factory=lambda: dict(_DEFAULT_BONES))
    angles: dict = field(default_factory=lambda: dict(_DEFAULT_ANGLES))
    margin: float = 2.0
    occlusion_prob: float = 0.1
    max_resample: int = 100
    allow_shrink: bool = True
    seed: int = 0

    def __post_init__(self):
        self.canvas = tuple(int(v) for v in self.canvas)
        bones = dict(_DEFAULT_BONES)
        bones.update(self.bones)
        angles = dict(_DEFAULT_ANGLES)
        angles.update({k: tuple(v) for k, v in self.angles.items()})
        self.bones, self.angles = bones, angles
        if any(v <= 0 for v in self.bones.values()):
            raise ValueError("bone lengths must be positive")
        for name, (lo, hi) in self.angles.items():
            if not (-np.pi <= lo <= hi <= np.pi):
                raise ValueError(f"angle range {name}={lo, hi} outside [-pi, pi]")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be in [0, 1]")

    @classmethod
    def upright(cls, **kw):
        """Config whose every articulation range is a single value (canonical pose)."""
        angles = {k: (0.0, 0.0) for k in _DEFAULT_ANGLES}
        angles.update(kw.pop("angles", {}))
        return cls(angles=angles, **kw)


@dataclass(frozen=True)
class NoiseSpec:
    jitter_sigma: float = 0.0
    amplitude_noise: float = 0.0
    false_peak_prob: float = 0.0
    false_peak_gain: float = 1.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.false_peak_prob <= 1.0:
            raise ValueError("false_peak_prob must be in [0, 1]")
        if self.jitter_sigma < 0 or self.amplitude_noise < 0:
            raise ValueError("noise magnitudes must be non-negative")

    def is_zero(self):
        return (self.jitter_sigma == 0 and self.amplitude_noise == 0
                and self.false_peak_prob == 0)


def _direction(angle, side):
    """Unit vector at ``angle`` from vertical-down, positive turning outward on ``side``."""
    return np.array([side * np.sin(angle), np.cos(angle)])


def _body_frame_pose(cfg, rng, sk):
    b = cfg.bones
    draw = {name: rng.uniform(lo, hi) for name, (lo, hi) in cfg.angles.items()}
    pts = np.zeros((sk.num_joints, 2))
    idx = sk.index
    half = b["torso"] / 2.0
    hip_mid = np.array([0.0, half])
    pts[idx("r-hip")] = (-b["hip_width"] / 2.0, half)
    pts[idx("l-hip")] = (b["hip_width"] / 2.0, half)

    # Upper body leans about the hip midpoint.
    lean = rotation_matrix(draw["torso_lean"])
    upper = {
        "r-shoulder": (-b["shoulder_width"] / 2.0, -half),
        "l-shoulder": (b["shoulder_width"] / 2.0, -half),
        "neck": (0.0, -half - b["neck"]),
    }
    for name, p in upper.items():
        pts[idx(name)] = lean @ (np.array(p) - hip_mid) + hip_mid
    up = lean @ rotation_matrix(draw["head"]) @ np.array([0.0, -1.0])
    pts[idx("head-top")] = pts[idx("neck")] + b["head"] * up

    # Person-centric sides: the right side sits at negative x in the image.
    for side, prefix in ((1.0, "l-"), (-1.0, "r-")):
        shoulder = pts[idx(prefix + "shoulder")]
        a = draw["upper_arm"] + side * draw["torso_lean"]
        elbow = shoulder + b["upper_arm"] * _direction(a, side)
        pts[idx(prefix + "elbow")] = elbow
        pts[idx(prefix + "wrist")] = elbow + b["forearm"] * _direction(a - draw["elbow"], side)
        hip = pts[idx(prefix + "hip")]
        knee = hip + b["thigh"] * _direction(draw["thigh"], side)
        pts[idx(prefix + "knee")] = knee
        pts[idx(prefix + "ankle")] = knee + b["shin"] * _direction(draw["thigh"] - draw["knee"], side)
    return pts, draw["global_rotation"]


def _fits(pts, h, w, margin):
    return (np.all(pts[:, 0] >= margin) and np.all(pts[:, 0] <= w - 1 - margin)
            and np.all(pts[:, 1] >= margin) and np.all(pts[:, 1] <= h - 1 - margin))


def sample_pose(cfg, rng, sk=None):
    """Draw one pose with its torso centre on the canvas centre."""
    sk = sk or canonical_skeleton()
    h, w = cfg.canvas
    if h <= 2 * cfg.margin + 1 or w <= 2 * cfg.margin + 1:
        raise CanvasTooSmall(f"canvas {cfg.canvas} leaves no room inside margin {cfg.margin}")
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    for _ in range(cfg.max_resample):
        body, phi = _body_frame_pose(cfg, rng, sk)
        c = body[list(sk.torso_joints)].mean(axis=0)
        pts = (body - c) @ rotation_matrix(phi).T + center
        if _fits(pts, h, w, cfg.margin):
            break
    else:
        if not cfg.allow_shrink:
            raise CanvasTooSmall(f"no pose fit the canvas after {cfg.max_resample} draws")
        rel = pts - center
        room = np.array([w - 1 - 2 * cfg.margin, h - 1 - 2 * cfg.margin]) / 2.0
        pts = center + rel * float(np.min(room / np.abs(rel).max(axis=0)))
    visible = rng.random(sk.num_joints) >= cfg.occlusion_prob
    return KeypointSet(pts, visible)


def simulate_detector(gt, spec, rng, num_joints=None, return_events=False):
    """Corrupt Gaussian groundtruth maps the way an imperfect detector would.

    Each joint channel's peak is shifted by N(0, jitter_sigma^2) per axis,
    scaled by 1 + U(-a, a), and with probability ``false_peak_prob`` a copy
    of the peak with relative gain ``false_peak_gain`` is added at a uniform
    location.  The background channel is left as is.
    """
    gt = np.asarray(gt, dtype=float)
    if spec.is_zero():
        return (gt.copy(), []) if return_events else gt.copy()
    c, h, w = gt.shape
    K = c - 1 if num_joints is None else num_joints
    out = gt.copy()
    events = []
    for k in range(K):
        channel = gt[k]
        shift = rng.normal(0.0, spec.jitter_sigma, size=2) if spec.jitter_sigma > 0 else np.zeros(2)
        moved = ndimage.shift(channel, (shift[1], shift[0]), order=3, mode="constant") if np.any(shift) else channel.copy()
        if spec.amplitude_noise > 0:
            moved *= 1.0 + rng.uniform(-spec.amplitude_noise, spec.amplitude_noise)
        if spec.false_peak_prob > 0 and rng.random() < spec.false_peak_prob:
            peak = np.array(np.unravel_index(np.argmax(channel), channel.shape), dtype=float)
            target = rng.uniform([0.0, 0.0], [h - 1.0, w - 1.0])
            moved += spec.false_peak_gain * ndimage.shift(channel, target - peak, order=3, mode="constant")
            events.append((k, float(target[1]), float(target[0])))
        out[k] = moved
    return (out, events) if return_events else out


# Bones drawn into each channel of a stick-figure image: left limbs, right limbs, head and torso.
STICK_GROUPS = (
    (("l-shoulder", "l-elbow"), ("l-elbow", "l-wrist"), ("l-hip", "l-knee"), ("l-knee", "l-ankle")),
    (("r-shoulder", "r-elbow"), ("r-elbow", "r-wrist"), ("r-hip", "r-knee"), ("r-knee", "r-ankle")),
    (("neck", "head-top"), ("r-shoulder", "l-shoulder"), ("r-hip", "l-hip"),
     ("r-shoulder", "r-hip"), ("l-shoulder", "l-hip")),
)


def render_stick_figure(kp, sk, h, w, width=1.0):
    """A 3-channel image of the pose's bones, each a soft line of scale ``width``.

    Stands in for an input photograph when a detector has to be trained.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    img = np.zeros((len(STICK_GROUPS), h, w))
    for c, group in enumerate(STICK_GROUPS):
        for a, b in group:
            p, q = kp.points[sk.index(a)], kp.points[sk.index(b)]
            d = q - p
            t = np.clip(((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / max(d @ d, 1e-12), 0.0, 1.0)
            dist2 = (xx - p[0] - t * d[0]) ** 2 + (yy - p[1] - t * d[1]) ** 2
            img[c] = np.maximum(img[c], np.exp(-dist2 / (2 * width ** 2)))
    return img


@dataclass(frozen=True)
class AugmentParams:
    mode: str = "lsp"  # "lsp": full-circle rotation, "mpii": +/-30 degrees, "none"
    scale_range: tuple = (0.80, 1.25)
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.mode not in ("lsp", "mpii", "none"):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")


def apply_augmentation(kp, maps, scale, flip, theta, canvas, sk=None):
    """Scale by ``scale``, optionally mirror, then rotate by ``theta`` about the canvas centre.

    The same transform is applied to the keypoints and, if given, to every
    channel of ``maps``; mirroring also swaps left/right labels.
    """
    sk = sk or canonical_skeleton()
    h, w = canvas
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    A = rotation_matrix(theta) @ np.diag([scale, scale]) @ np.diag([-1.0 if flip else 1.0, 1.0])
    pts, vis = kp.points, kp.visible
    if flip:
        perm = sk.flip_permutation()
        pts, vis = pts[perm], vis[perm]
    if np.array_equal(A, np.eye(2)):
        out_kp = KeypointSet(pts.copy(), vis.copy())
    else:
        out_kp = KeypointSet((pts - center) @ A.T + center, vis.copy())
    if maps is None:
        return out_kp, None
    maps = np.asarray(maps, dtype=float)
    if flip:
        order = list(sk.flip_permutation()) + list(range(sk.num_joints, maps.shape[0]))
        maps = maps[order]
    if not np.array_equal(A, np.eye(2)):
        maps = resample(maps, np.linalg.inv(A), center)
    return out_kp, maps.copy()


def augment(kp, maps, params, rng, canvas, sk=None):
    """Random augmentation; returns ``(kp, maps, applied)`` where ``applied`` records the draw."""
    if params.mode == "none":
        scale, flip, theta = 1.0, False, 0.0
    else:
        scale = rng.uniform(*params.scale_range)
        flip = bool(rng.random() < params.flip_prob)
        if params.mode == "lsp":
            theta = rng.uniform(0.0, 2 * np.pi)
        else:
            theta = rng.uniform(-np.pi / 6, np.pi / 6)
    out_kp, out_maps = apply_augmentation(kp, maps, scale, flip, theta, canvas, sk)
    return out_kp, out_maps, {"scale": scale, "flip": flip, "theta": theta}


# --- annotation I/O ---------------------------------------------------------


@dataclass
class Annotation:
    id: str
    width: int
    height: int
    keypoints: KeypointSet

    def to_json(self):
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "joints": [
                {"name": name, "x": float(x), "y": float(y), "visible": bool(v)}
                for name, (x, y), v in zip(JOINT_NAMES, self.keypoints.points, self.keypoints.visible)
            ],
        }

    @classmethod
    def from_json(cls, obj, where="annotation"):
        if not isinstance(obj, dict):
            raise ParseError(f"{where}: expected an object", field=where)
        for key in ("id", "width", "height", "joints"):
            if key not in obj:
                raise ParseError(f"{where}: missing field {key!r}", field=key)
        joints = obj["joints"]
        if not isinstance(joints, list):
            raise ParseError(f"{where}: 'joints' must be a list", field="joints")
        if len(joints) != len(JOINT_NAMES):
            raise SchemaMismatch(f"{where}: expected {len(JOINT_NAMES)} joints, got {len(joints)}")
        pts, vis = [], []
        for i, (j, name) in enumerate(zip(joints, JOINT_NAMES)):
            if j.get("name") != name:
                raise SchemaMismatch(f"{where}: joint {i} is {j.get('name')!r}, expected {name!r}")
            try:
                pts.append((float(j["x"]), float(j["y"])))
                vis.append(bool(j["visible"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{where}: joint {name}: {exc}", field=f"joints[{i}]") from exc
        return cls(str(obj["id"]), int(obj["width"]), int(obj["height"]), KeypointSet(pts, vis))

    def __eq__(self, other):
        if not isinstance(other, Annotation):
            return NotImplemented
        return (self.id, self.width, self.height) == (other.id, other.width, other.height) \
            and self.keypoints == other.keypoints


def _dump(obj):
    return json.dumps(obj, indent=1, ensure_ascii=False) + "\n"


def _load(text, path):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise ParseError(f"{path}: {exc.msg} at byte {offset} (line {exc.lineno})",
                         offset=offset, line=exc.lineno) from exc


def write_annotations(path, corpus):
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dump([a.to_json() for a in corpus]))


def read_annotations(path):
    with open(path, encoding="utf-8") as f:
        data = _load(f.read(), path)
    if not isinstance(data, list):
        raise ParseError(f"{path}: expected a JSON array of annotations", offset=0)
    return [Annotation.from_json(obj, f"{path}[{i}]") for i, obj in enumerate(data)]


# --- corpus directories -----------------------------------------------------


def write_corpus(directory, annotations, maps, meta=None):
    """Write ``<id>.json`` + ``<id>.smap`` pairs and an ``index.json`` listing the ids."""
    os.makedirs(directory, exist_ok=True)
    for ann, m in zip(annotations, maps):
        with open(os.path.join(directory, f"{ann.id}.json"), "w", encoding="utf-8") as f:
            f.write(_dump(ann.to_json()))
        write_smap(os.path.join(directory, f"{ann.id}.smap"), m)
    index = {"ids": [a.id for a in annotations], "meta": meta or {}}
    with open(os.path.join(directory, "index.json"), "w", encoding="utf-8") as f:
        f.write(_dump(index))


def read_corpus(directory, load_maps=True):
    """Returns ``(annotations, maps, meta)``; ``maps`` is None unless ``load_maps``."""
    index_path = os.path.join(directory, "index.json")
    with open(index_path, encoding="utf-8") as f:
        index = _load(f.read(), index_path)
    if not isinstance(index, dict) or "ids" not in index:
        raise ParseError(f"{index_path}: missing 'ids'", field="ids")
    annotations, maps = [], []
    for ident in index["ids"]:
        path = os.path.join(directory, f"{ident}.json")
        with open(path, encoding="utf-8") as f:
            annotations.append(Annotation.from_json(_load(f.read(), path), path))
        if load_maps:
            maps.append(read_smap(os.path.join(directory, f"{ident}.smap")))
    return annotations, (maps if load_maps else None), index.get("meta", {})


def config_dict(cfg):
    d = asdict(cfg)
    return json.loads(json.dumps(d, default=float))
