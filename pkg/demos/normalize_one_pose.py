"""Follow one rotated pose through body and limb normalization and back.

Run:  python demos/normalize_one_pose.py
"""

import numpy as np

from posenorm.normalize import (PipelineConfig, body_normalize, body_transform_params, limb_normalize,
                                limb_transform_params, measured_body_angle, measured_limb_angle, run_pipeline)
from posenorm.scoremap import GroundtruthSpec, extract_positions, make_groundtruth
from posenorm.skeleton import canonical_skeleton
from posenorm.synthdata import PoseSamplerConfig, sample_pose

sk = canonical_skeleton()
rng = np.random.default_rng(3)

# A pose turned 120 degrees, rendered as Gaussian score maps on a 128 x 128 canvas.
base = PoseSamplerConfig()
cfg = PoseSamplerConfig(canvas=(128, 128), bones={k: 2 * v for k, v in base.bones.items()},
                        angles={"global_rotation": (2.1, 2.1)})
kp = sample_pose(cfg, rng, sk)
maps = make_groundtruth(kp, sk, GroundtruthSpec(), 128, 128)
found = extract_positions(maps, sk)
print(f"body angle as detected:        {np.degrees(measured_body_angle(found, sk)):7.2f} deg")

# Body normalization: rotate about the torso centre until the neck is straight up.
t, flag = body_transform_params(found, sk)
upright = body_normalize(maps, t)
k1 = extract_positions(upright, sk)
print(f"body angle after normalizing:  {np.degrees(measured_body_angle(k1, sk)):7.2f} deg  ({flag})")

# Limb normalization: each upper segment is turned to point straight down.
# Angles are re-measured on integer argmax peaks, so short segments keep a few degrees of residue.
for i, name in enumerate(sk.limb_names):
    tl, _ = limb_transform_params(k1, sk, i)
    k2 = extract_positions(limb_normalize(upright, sk, i, tl), sk)
    before = np.degrees(measured_limb_angle(k1, sk, i))
    after = np.degrees(measured_limb_angle(k2, sk, i))
    print(f"  {name:6s} limb angle {before:8.2f} -> {after:6.2f} deg")

# With pass-through refinement the full pipeline hands back what it was given.
res = run_pipeline(maps, sk, PipelineConfig())
shift = np.hypot(*(res.keypoints.points - found.points).T)
print(f"largest shift after the round trip: {shift.max():.2f} px")
