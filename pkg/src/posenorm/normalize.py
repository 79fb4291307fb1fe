"""Body (global) and limb (local) rotation normalization and the two-stage refinement pipeline.

Body normalization rotates every score map about the torso centre so that
the centre-to-neck direction points straight up.  Limb normalization then
rotates each limb's three maps about its root joint so that the
root-to-middle segment points straight down.  Refined estimates are mapped
back to the image with the inverse rotations.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import DOWN, UP, Transform2D, invert, rotation_matrix, signed_angle, transform_point, warp_map
from .nnet import predict
from .scoremap import DEFAULT_BLUR_SIGMA, extract_positions, peak_positions, score_to_prob
from .skeleton import KeypointSet, torso_center

APPLIED = "applied"
DEGENERATE = "degenerate-identity"
DISABLED = "disabled"


@dataclass(frozen=True)
class PipelineConfig:
    blur_sigma: float = DEFAULT_BLUR_SIGMA
    detector_mode: str = "identity"  # probability mapping applied to detector maps
    body_norm: bool = True
    limb_norm: bool = True
    eps_pos: float = 1e-3  # px; shorter reference vectors give an identity transform
    theta_tol_deg: float = 3.0


@dataclass
class NormalizationRecord:
    body: Transform2D
    limbs: list
    body_flag: str = APPLIED
    limb_flags: list = field(default_factory=lambda: [APPLIED] * 4)

    @classmethod
    def identity(cls, center=(0.0, 0.0)):
        eye = Transform2D.identity(center)
        return cls(eye, [eye] * 4, DISABLED, [DISABLED] * 4)


def _rotation_to(v, target, center, eps):
    if np.hypot(*v) < eps:
        return Transform2D.identity(center), DEGENERATE
    return Transform2D(rotation_matrix(signed_angle(v, target)), center), APPLIED


def body_transform_params(kp, sk, eps_pos=1e-3):
    """Rotation about the torso centre that makes centre -> neck point up.

    Returns ``(transform, flag)``; the flag is ``DEGENERATE`` (with an identity
    transform) when the neck sits on the centre.
    """
    c = torso_center(kp, sk)
    return _rotation_to(kp.points[sk.neck_index] - c, UP, c, eps_pos)


def body_normalize(m, t):
    return warp_map(m, t)


def limb_transform_params(kp, sk, limb_index, eps_pos=1e-3):
    """Rotation about the limb root that makes root -> middle point down."""
    root, middle, _ = sk.limb_defs[limb_index]
    p = kp.points
    return _rotation_to(p[middle] - p[root], DOWN, p[root], eps_pos)


def limb_normalize(m, sk, limb_index, t):
    return warp_map(m, t, channels=sk.limb_defs[limb_index])


def _limb_joint_owner(sk):
    owner = {}
    for i, (_, middle, end) in enumerate(sk.limb_defs):
        owner[middle] = owner[end] = i
    return owner


def normalize_points(kp, rec, sk):
    """Image frame -> normalized frame: body rotation, then each limb's rotation
    on that limb's middle and end joints."""
    pts = transform_point(rec.body, kp.points)
    for j, i in _limb_joint_owner(sk).items():
        pts[j] = transform_point(rec.limbs[i], pts[j])
    return KeypointSet(pts, kp.visible.copy())


def denormalize_points(kp, rec, sk):
    pts = kp.points.copy()
    for j, i in _limb_joint_owner(sk).items():
        pts[j] = transform_point(invert(rec.limbs[i]), pts[j])
    return KeypointSet(transform_point(invert(rec.body), pts), kp.visible.copy())


def measured_body_angle(kp, sk):
    """Signed angle (radians) still separating centre -> neck from vertical-up."""
    return signed_angle(kp.points[sk.neck_index] - torso_center(kp, sk), UP)


def measured_limb_angle(kp, sk, limb_index):
    root, middle, _ = sk.limb_defs[limb_index]
    return signed_angle(kp.points[middle] - kp.points[root], DOWN)


@dataclass
class RefinementNets:
    """Trained refinement nets; ``None`` entries pass maps through unchanged.

    ``semi_global`` is a placeholder for the parallel semi-global branch and is
    currently ignored.
    """

    global_net: object = None
    limb_nets: list = field(default_factory=lambda: [None] * 4)
    semi_global: object = None


@dataclass
class PipelineResult:
    keypoints: KeypointSet
    record: NormalizationRecord
    stages: dict  # "detector", "stage1", "stage2" -> image-frame KeypointSet


def global_stage_maps(normalized, sk, net):
    """Stage-1 output as a (K + 1)-channel stack in the normalized frame.

    The appended background channel is zero, the same layout as Gaussian-mode
    groundtruth, so limb nets see inputs shaped like their training targets.
    """
    if net is None:
        return np.asarray(normalized, dtype=float)
    out = np.asarray(predict(net, normalized), dtype=float)[:sk.num_joints]
    return np.concatenate([out, np.zeros((1,) + out.shape[1:])], axis=0)


def limb_stage_maps(limb_normalized, sk, limb_index, net):
    """Three (root, middle, end) maps from one limb branch."""
    if net is None:
        return np.asarray(limb_normalized, dtype=float)[list(sk.limb_defs[limb_index])]
    return np.asarray(predict(net, limb_normalized), dtype=float)


def run_pipeline(detector_maps, sk, cfg=PipelineConfig(), nets=None):
    """detect -> body normalize -> global refine -> limb normalize -> limb refine -> invert."""
    nets = nets or RefinementNets()
    K = sk.num_joints
    detector_maps = np.asarray(detector_maps, dtype=float)
    kp0 = extract_positions(detector_maps, sk, cfg.blur_sigma, cfg.detector_mode)
    maps0 = detector_maps
    if cfg.detector_mode != "identity":
        maps0 = score_to_prob(detector_maps, cfg.detector_mode)

    center = torso_center(kp0, sk)
    rec = NormalizationRecord.identity(center)
    if cfg.body_norm:
        rec.body, rec.body_flag = body_transform_params(kp0, sk, cfg.eps_pos)
    stage1_maps = global_stage_maps(body_normalize(maps0, rec.body), sk, nets.global_net)
    kp1 = extract_positions(stage1_maps, sk, cfg.blur_sigma)

    final = kp1.points.copy()
    for i, limb in enumerate(sk.limb_defs):
        if cfg.limb_norm:
            rec.limbs[i], rec.limb_flags[i] = limb_transform_params(kp1, sk, i, cfg.eps_pos)
        else:
            rec.limbs[i] = Transform2D.identity(kp1.points[limb[0]])
        branch = limb_stage_maps(limb_normalize(stage1_maps, sk, i, rec.limbs[i]), sk, i,
                                 nets.limb_nets[i])
        pos = peak_positions(branch, cfg.blur_sigma)
        final[limb[1]] = pos[1]
        final[limb[2]] = pos[2]

    stage1_rec = NormalizationRecord(rec.body, [Transform2D.identity(c) for c in kp1.points[:4]],
                                     rec.body_flag, [DISABLED] * 4)
    stage1 = denormalize_points(kp1, stage1_rec, sk)
    out = denormalize_points(KeypointSet(final, np.ones(K, dtype=bool)), rec, sk)
    return PipelineResult(out, rec, {"detector": kp0, "stage1": stage1, "stage2": out})
