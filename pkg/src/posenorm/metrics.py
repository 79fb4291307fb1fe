"""PCK / AUC evaluation and compactness statistics of relative joint positions."""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyEval, TooFewPoints
from .normalize import NormalizationRecord, body_transform_params, limb_transform_params, normalize_points


@dataclass(frozen=True)
class EvalConfig:
    alpha: float = 0.2
    ref_mode: str = "torso"  # "torso" | "head"
    auc_range: tuple = (0.0, 0.5)
    auc_step: float = 0.01

    def __post_init__(self):
        if self.alpha <= 0 or self.auc_step <= 0:
            raise ValueError("alpha and auc_step must be positive")
        if self.ref_mode not in ("torso", "head"):
            raise ValueError(f"unknown reference mode {self.ref_mode!r}")

    def auc_alphas(self):
        lo, hi = self.auc_range
        n = int(round((hi - lo) / self.auc_step)) + 1
        return lo + np.arange(n) * self.auc_step


@dataclass
class EvalReport:
    joint_names: tuple
    per_joint: np.ndarray  # percent
    total: float
    auc: float
    n_images: int

    def to_json(self):
        return {
            "per_joint": {n: float(v) for n, v in zip(self.joint_names, self.per_joint)},
            "total": float(self.total),
            "auc": float(self.auc),
            "n_images": int(self.n_images),
        }

    def table(self, title=""):
        lines = [title] if title else []
        width = max(len(n) for n in self.joint_names)
        for name, v in zip(self.joint_names, self.per_joint):
            lines.append(f"  {name:<{width}}  {v:6.2f}")
        lines.append(f"  {'total':<{width}}  {self.total:6.2f}")
        lines.append(f"  {'auc':<{width}}  {self.auc:6.2f}")
        lines.append(f"  {'images':<{width}}  {self.n_images:6d}")
        return "\n".join(lines)


def reference_lengths(gts, sk, ref_mode="torso"):
    if ref_mode == "torso":
        a, b = sk.index("l-shoulder"), sk.index("r-hip")
    else:
        a, b = sk.head_index, sk.neck_index
    pts = np.stack([g.points for g in gts])
    return np.hypot(*(pts[:, a] - pts[:, b]).T)


def _errors(preds, gts, sk, ref_mode):
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} groundtruths")
    if not gts:
        raise EmptyEval("nothing to evaluate")
    p = np.stack([k.points for k in preds])
    g = np.stack([k.points for k in gts])
    dist = np.hypot(*(p - g).transpose(2, 0, 1))
    return dist, reference_lengths(gts, sk, ref_mode)


def _pck_from(dist, lr, alpha):
    return 100.0 * np.mean(dist <= alpha * lr[:, None], axis=0)


def pck(preds, gts, sk, cfg=EvalConfig()):
    """Per-joint and total PCK, plus AUC over ``cfg.auc_range``."""
    dist, lr = _errors(preds, gts, sk, cfg.ref_mode)
    per_joint = _pck_from(dist, lr, cfg.alpha)
    auc_value = float(np.mean([_pck_from(dist, lr, a).mean() for a in cfg.auc_alphas()]))
    return EvalReport(tuple(sk.joint_names), per_joint, float(per_joint.mean()), auc_value, len(gts))


def auc(preds, gts, sk, cfg=EvalConfig()):
    return pck(preds, gts, sk, cfg).auc


def joint_subset_pck(report, names):
    idx = [report.joint_names.index(n) for n in names]
    return float(np.mean(report.per_joint[idx]))


def write_report(path, rows):
    """Write ``{row_name: EvalReport}`` as JSON."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump({name: r.to_json() for name, r in rows.items()}, f, indent=1)
        f.write("\n")


def format_rows(rows):
    """Side-by-side table: one line per joint, one column per row name."""
    names = list(rows)
    first = rows[names[0]]
    width = max(len(n) for n in first.joint_names + ("total", "auc"))
    cols = [max(len(n), 7) for n in names]
    head = " " * (width + 2) + "  ".join(f"{n:>{c}}" for n, c in zip(names, cols))
    lines = [head]
    for j, joint in enumerate(first.joint_names):
        vals = "  ".join(f"{rows[n].per_joint[j]:>{c}.2f}" for n, c in zip(names, cols))
        lines.append(f"  {joint:<{width}}{vals}")
    for key in ("total", "auc"):
        vals = "  ".join(f"{getattr(rows[n], key):>{c}.2f}" for n, c in zip(names, cols))
        lines.append(f"  {key:<{width}}{vals}")
    return "\n".join(lines)


# --- relative positions and compactness -------------------------------------


def stage_record(kp, sk, stage):
    """Transforms that take annotated points to the requested normalization stage."""
    rec = NormalizationRecord.identity()
    if stage == "raw":
        return rec
    if stage not in ("body_normalized", "limb_normalized"):
        raise ValueError(f"unknown stage {stage!r}")
    rec.body, rec.body_flag = body_transform_params(kp, sk)
    if stage == "limb_normalized":
        body_kp = normalize_points(kp, rec, sk)
        for i in range(len(sk.limb_defs)):
            rec.limbs[i], rec.limb_flags[i] = limb_transform_params(body_kp, sk, i)
    return rec


def relative_positions(corpus, sk, joint, ref_joint, stage="raw"):
    """``p_joint - p_ref`` for every pose after moving it to ``stage``.

    ``corpus`` is a sequence of KeypointSets; ``joint`` / ``ref_joint`` are
    names or indices.
    """
    j = sk.index(joint) if isinstance(joint, str) else joint
    r = sk.index(ref_joint) if isinstance(ref_joint, str) else ref_joint
    out = []
    for kp in corpus:
        pts = normalize_points(kp, stage_record(kp, sk, stage), sk).points
        out.append(pts[j] - pts[r])
    return np.array(out).reshape(-1, 2)


def compactness(cloud):
    """``{"cov_trace", "r90"}``: trace of the sample covariance, and the nearest-rank
    90th-percentile distance to the centroid."""
    cloud = np.asarray(cloud, dtype=float)
    if len(cloud) < 2:
        raise TooFewPoints(f"need at least 2 points, got {len(cloud)}")
    cov = np.cov(cloud, rowvar=False)
    d = np.sort(np.hypot(*(cloud - cloud.mean(axis=0)).T))
    rank = math.ceil(0.9 * len(d))
    return {"cov_trace": float(np.trace(cov)), "r90": float(d[rank - 1])}
