"""How much each normalization step tightens the relative joint positions.

Run:  python demos/compactness.py
"""

import numpy as np

from posenorm.metrics import compactness, relative_positions
from posenorm.skeleton import canonical_skeleton
from posenorm.synthdata import PoseSamplerConfig, sample_pose

sk = canonical_skeleton()
rng = np.random.default_rng(0)
corpus = [sample_pose(PoseSamplerConfig(), rng, sk) for _ in range(2000)]

pairs = [("head-top", "neck"), ("neck", "r-hip"), ("l-wrist", "l-shoulder"), ("r-ankle", "r-hip")]
print(f"{'joint':>10} {'relative to':>12} {'raw':>9} {'body':>9} {'limb':>9}   (90% radius, px)")
for joint, ref in pairs:
    r90 = [compactness(relative_positions(corpus, sk, joint, ref, stage))["r90"]
           for stage in ("raw", "body_normalized", "limb_normalized")]
    print(f"{joint:>10} {ref:>12} " + " ".join(f"{v:9.2f}" for v in r90))

# Body normalization handles the head; wrists and ankles only tighten once the limb is turned as well.
