"""A reduced version of the normalization ablation: detector, stage 1 and stage 2.

The acceptance suite runs the full-size version (1000 training poses, 500 test
poses, 2000 + 1000 steps).  This one keeps the 2000 global steps but uses fewer
limb steps and test poses, and takes six or seven minutes on one core.  Cutting
the global steps much further is not a useful shortcut: after 600 steps both
stage-1 nets still score below the detector they are meant to refine.

Expect the normalized stage-1 net to beat the un-normalized one on the total.
With only 500 limb steps the limb nets barely move from their stage-1 start, so
stage 2 stays level with stage 1 here.  The gain on wrists and ankles shows up
in the full-size run.

Run:  python demos/ablation.py
"""

import logging

from posenorm.experiment import AblationConfig, run_ablation
from posenorm.metrics import format_rows

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = AblationConfig(n_train=1000, n_test=200, global_steps=2000, limb_steps=500)
res = run_ablation(cfg)
print(format_rows(res.reports))
for row in res.reports:
    print(f"{row:12s} wrist+ankle PCK {res.extremity_pck(row):6.2f}")
print("seconds:", {k: round(v, 1) for k, v in res.seconds.items()})
