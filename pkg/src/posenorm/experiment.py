"""Synthetic ablation of body and limb normalization.

A corpus of random poses is rendered to Gaussian groundtruth maps and passed
through the detector simulator.  Refinement nets are trained on the noisy
maps, with or without rotation normalization, and compared on held-out poses.
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Transform2D, invert, transform_point
from .metrics import EvalConfig, joint_subset_pck, pck
from .nnet import predict
from .normalize import (body_normalize, body_transform_params, global_stage_maps, limb_normalize,
                        limb_transform_params)
from .refine import TrainConfig, limb_net_from_global, train_refinement
from .scoremap import GroundtruthSpec, extract_positions, make_groundtruth, peak_positions
from .skeleton import KeypointSet, canonical_skeleton
from .synthdata import NoiseSpec, PoseSamplerConfig, sample_pose, simulate_detector

log = logging.getLogger(__name__)

EXTREMITIES = ("l-wrist", "r-wrist", "l-ankle", "r-ankle")


@dataclass(frozen=True)
class AblationConfig:
    n_train: int = 1000
    n_test: int = 500
    global_steps: int = 2000
    limb_steps: int = 1000
    sampler: PoseSamplerConfig = field(default_factory=PoseSamplerConfig)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(
        jitter_sigma=2.0, amplitude_noise=0.1, false_peak_prob=0.2, false_peak_gain=1.3))
    gauss_sigma: float = 1.5
    limb_init: str = "global"  # "global": start limb nets from the stage-1 net; "random"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        width=16, lr=0.1, momentum=0.9, loss_reduction="mean"))
    seed: int = 0


@dataclass
class Sample:
    keypoints: KeypointSet
    groundtruth: np.ndarray  # (K+1, H, W) Gaussian-mode targets
    detector: np.ndarray  # (K+1, H, W) simulated detector maps, zero background


def make_samples(n, seed, cfg=AblationConfig(), sk=None):
    """``n`` poses with groundtruth and simulated detector maps; deterministic in ``seed``."""
    sk = sk or canonical_skeleton()
    h, w = cfg.sampler.canvas
    spec = GroundtruthSpec("gaussian", gauss_sigma=cfg.gauss_sigma)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        kp = sample_pose(cfg.sampler, rng, sk)
        gt = make_groundtruth(kp, sk, spec, h, w)
        det = simulate_detector(gt, cfg.noise, rng, num_joints=sk.num_joints)
        out.append(Sample(kp, gt.astype(np.float32), det.astype(np.float32)))
    return out


def body_transform(sample, sk, normalize=True):
    """Body transform estimated from the detector maps (identity when disabled)."""
    kp0 = extract_positions(sample.detector, sk)
    if not normalize:
        return Transform2D.identity()
    return body_transform_params(kp0, sk)[0]


def global_pairs(samples, sk, normalize=True):
    """(inputs, targets) for the global net; both warped by the same transform."""
    pairs = []
    for s in samples:
        t = body_transform(s, sk, normalize)
        pairs.append((body_normalize(s.detector, t).astype(np.float32),
                      body_normalize(s.groundtruth, t)[:sk.num_joints].astype(np.float32)))
    return pairs


def run_stage1(net, sample, sk, normalize=True):
    """Stage-1 maps in the body frame, the body transform, and image-frame estimates."""
    t = body_transform(sample, sk, normalize)
    maps = global_stage_maps(body_normalize(sample.detector, t), sk, net)
    kp1 = extract_positions(maps, sk)
    return maps, t, KeypointSet(transform_point(invert(t), kp1.points))


def limb_pairs(stage1, samples, sk, limb_index):
    """(inputs, targets) for one limb net from cached stage-1 outputs.

    ``stage1`` holds ``(maps, body_transform, _)`` per sample.  Targets are the
    groundtruth warped by the body transform and then the limb transform.
    """
    limb = list(sk.limb_defs[limb_index])
    pairs = []
    for (maps, t, _), s in zip(stage1, samples):
        kp1 = extract_positions(maps, sk)
        tl = limb_transform_params(kp1, sk, limb_index)[0]
        x = limb_normalize(maps, sk, limb_index, tl)
        target = limb_normalize(body_normalize(s.groundtruth, t), sk, limb_index, tl)[limb]
        pairs.append((x.astype(np.float32), target.astype(np.float32)))
    return pairs


def run_stage2(limb_nets, stage1_out, sk):
    """Image-frame estimates after the limb branches."""
    maps, t, _ = stage1_out
    kp1 = extract_positions(maps, sk)
    pts = kp1.points.copy()
    for i, limb in enumerate(sk.limb_defs):
        tl = limb_transform_params(kp1, sk, i)[0]
        x = limb_normalize(maps, sk, i, tl).astype(np.float32)
        branch = np.asarray(predict(limb_nets[i], x), dtype=float)
        pos = transform_point(invert(tl), peak_positions(branch))
        pts[limb[1]], pts[limb[2]] = pos[1], pos[2]
    return KeypointSet(transform_point(invert(t), pts))


@dataclass
class AblationResult:
    reports: dict  # row name -> EvalReport
    seconds: dict  # phase name -> wall time
    nets: dict

    def extremity_pck(self, row):
        return joint_subset_pck(self.reports[row], EXTREMITIES)


def _train(stage, pairs, cfg, steps, net=None):
    return train_refinement(stage, pairs, replace(cfg.train, steps=steps, seed=cfg.seed), net=net).net


def run_ablation(cfg=AblationConfig(), limb_stage=True, eval_cfg=EvalConfig()):
    """Detector-only vs stage 1 with and without body normalization, then stage 2.

    Rows of the result: ``detector``, ``stage1_norm``, ``stage1_raw`` and, when
    ``limb_stage`` is set, ``stage2_norm``.
    """
    sk = canonical_skeleton()
    secs = {}
    t0 = time.perf_counter()
    train = make_samples(cfg.n_train, cfg.seed * 2 + 1, cfg, sk)
    test = make_samples(cfg.n_test, cfg.seed * 2 + 2, cfg, sk)
    secs["data"] = time.perf_counter() - t0
    gts = [s.keypoints for s in test]
    reports = {"detector": pck([extract_positions(s.detector, sk) for s in test], gts, sk, eval_cfg)}
    nets = {}
    for name, normalize in (("stage1_norm", True), ("stage1_raw", False)):
        t0 = time.perf_counter()
        net = _train("global", global_pairs(train, sk, normalize), cfg, cfg.global_steps)
        secs[name] = time.perf_counter() - t0
        nets[name] = net
        preds = [run_stage1(net, s, sk, normalize)[2] for s in test]
        reports[name] = pck(preds, gts, sk, eval_cfg)
        log.info("%s total %.2f", name, reports[name].total)
    if limb_stage:
        t0 = time.perf_counter()
        net = nets["stage1_norm"]
        cached = [run_stage1(net, s, sk) for s in train]
        limb_nets = []
        for i, limb in enumerate(sk.limb_defs):
            start = limb_net_from_global(net, limb) if cfg.limb_init == "global" else None
            limb_nets.append(_train(f"limb{i}", limb_pairs(cached, train, sk, i), cfg, cfg.limb_steps, start))
        nets["limbs"] = limb_nets
        preds = [run_stage2(limb_nets, run_stage1(net, s, sk), sk) for s in test]
        reports["stage2_norm"] = pck(preds, gts, sk, eval_cfg)
        secs["stage2_norm"] = time.perf_counter() - t0
    return AblationResult(reports, secs, nets)
