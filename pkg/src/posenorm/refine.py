"""Refinement networks, multi-scale supervision/fusion, and training loops."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceDetected, ShapeMismatch
from .nnet import (SGD, Conv2D, LossSpec, ReLU, SigmoidLike, TinyNet, backprop, backward,
                   forward, init_gaussian, sigmoid_xent, softmax_xent, visibility_mask)
from .scoremap import GroundtruthSpec, make_groundtruth, peak_positions, score_to_prob
from .skeleton import KeypointSet

log = logging.getLogger(__name__)

REFINE_WIDTH = 128
REFINE_KERNELS = (9, 15, 15)


def build_refine_net(K, J, width=REFINE_WIDTH, kernels=REFINE_KERNELS, dtype=np.float64):
    """conv k0 (K+1 -> width), conv k1, conv k2 (width -> width), conv 1x1 (width -> J),
    ReLU between convs and a sigmoid-like output.  Same padding throughout."""
    if K < 1 or J < 1:
        raise ValueError("K and J must be positive")
    k0, k1, k2 = kernels
    return TinyNet([
        Conv2D(K + 1, width, k0, dtype=dtype), ReLU(),
        Conv2D(width, width, k1, dtype=dtype), ReLU(),
        Conv2D(width, width, k2, dtype=dtype), ReLU(),
        Conv2D(width, J, 1, dtype=dtype),
        SigmoidLike(dtype=dtype),
    ], input_channels=K + 1)


def limb_net_from_global(global_net, joints):
    """A limb net that starts as a copy of ``global_net`` keeping only ``joints`` at the output.

    Trained from scratch, a limb net's sparse targets let it settle on an
    all-zero output before it learns anything; starting from the global
    refiner avoids that plateau.
    """
    net = global_net.copy()
    last = [l for l in net.layers if isinstance(l, Conv2D)][-1]
    idx = list(joints)
    last.weight = last.weight[idx].copy()
    last.bias = last.bias[idx].copy()
    last.grad_weight = np.zeros_like(last.weight)
    last.grad_bias = np.zeros_like(last.bias)
    last.cout = len(idx)
    return net


# --- multi-scale fusion ------------------------------------------------------

LOSS_NAMES = ("L_D1", "L_D2", "L_D3", "L_F1", "L_F2")
_SCHEDULE = {
    1: ("L_D1",),
    2: ("L_D1", "L_D2", "L_F1"),
    3: ("L_D1", "L_D2", "L_D3", "L_F1", "L_F2"),
}


def progressive_schedule(phase):
    if phase not in _SCHEDULE:
        raise ValueError(f"phase must be 1, 2 or 3, got {phase!r}")
    return frozenset(_SCHEDULE[phase])


def fusion_matrix(n_scales, channels, weights):
    """Expand per-scale scalar weights into a (C, n*C) 1x1-conv matrix."""
    weights = np.asarray(weights, dtype=float)
    if weights.ndim == 1:
        if len(weights) != n_scales:
            raise ShapeMismatch(f"{len(weights)} weights for {n_scales} scales")
        return np.kron(weights[None, :], np.eye(channels))
    if weights.shape != (channels, n_scales * channels):
        raise ShapeMismatch(f"fusion matrix shape {weights.shape}, expected "
                            f"{(channels, n_scales * channels)}")
    return weights


def fuse_scales(maps, fusion_weights, bias=None):
    """Per-pixel linear combination of same-size maps (a 1x1 conv over their concatenation).

    ``fusion_weights`` is either one scalar per scale or a full ``(C, n*C)``
    matrix.
    """
    maps = [np.asarray(m, dtype=float) for m in maps]
    if not maps or any(m.shape != maps[0].shape for m in maps):
        raise ShapeMismatch("fuse_scales needs maps of identical shape")
    c = maps[0].shape[0]
    W = fusion_matrix(len(maps), c, fusion_weights)
    stacked = np.concatenate(maps, axis=0)
    out = np.tensordot(W, stacked, axes=([1], [0]))
    if bias is not None:
        out = out + np.asarray(bias, dtype=float)[:, None, None]
    return out


def upsample(m, factor):
    return m.repeat(factor, axis=-2).repeat(factor, axis=-1)


def _downsample_sum(g, factor):
    c, h, w = g.shape
    return g.reshape(c, h // factor, factor, w // factor, factor).sum(axis=(2, 4))


def scaled_keypoints(kp, stride):
    """Keypoints on a grid ``stride`` times coarser (nearest-upsampling aligned)."""
    return KeypointSet((kp.points - (stride - 1) / 2.0) / stride, kp.visible.copy())


class MultiScaleDetector:
    """Toy encoder-decoder producing score maps at strides 4, 2 and 1 plus two fusions.

    ``D1`` (stride 4), ``D2`` (stride 2) and ``D3`` (stride 1) stand in for
    FCN-32s/16s/8s; ``F1`` fuses D1 and D2 at stride 2 and ``F2`` fuses all
    three at stride 1, each with a 1x1 convolution.
    """

    def __init__(self, in_channels, num_classes, width=16, dtype=np.float64):
        c, n = width, num_classes
        self.in_channels, self.num_classes = in_channels, n
        self.enc1 = TinyNet([Conv2D(in_channels, c, 3, stride=2, dtype=dtype), ReLU()])
        self.enc2 = TinyNet([Conv2D(c, c, 3, stride=2, dtype=dtype), ReLU()])
        self.dec1 = TinyNet([Conv2D(2 * c, c, 3, dtype=dtype), ReLU()])
        self.dec2 = TinyNet([Conv2D(c + in_channels, c, 3, dtype=dtype), ReLU()])
        self.head1 = TinyNet([Conv2D(c, n, 1, dtype=dtype)])
        self.head2 = TinyNet([Conv2D(c, n, 1, dtype=dtype)])
        self.head3 = TinyNet([Conv2D(c, n, 1, dtype=dtype)])
        self.fuse1 = TinyNet([Conv2D(2 * n, n, 1, dtype=dtype)])
        self.fuse2 = TinyNet([Conv2D(3 * n, n, 1, dtype=dtype)])
        self.width = width

    @property
    def nets(self):
        return [self.enc1, self.enc2, self.dec1, self.dec2, self.head1, self.head2,
                self.head3, self.fuse1, self.fuse2]

    def params(self):
        return [p for net in self.nets for p in net.params()]

    def grads(self):
        return [g for net in self.nets for g in net.grads()]

    def init(self, variance=0.001, seed=0, fusion="mean"):
        for i, net in enumerate(self.nets):
            init_gaussian(net, variance, seed=seed * 97 + i)
        if fusion == "mean":
            # Start fusions at the plain average of their inputs.
            n = self.num_classes
            self.fuse1.layers[0].weight[:, :, 0, 0] = fusion_matrix(2, n, [0.5, 0.5])
            self.fuse2.layers[0].weight[:, :, 0, 0] = fusion_matrix(3, n, [1 / 3] * 3)
        return self

    def forward(self, x):
        x = np.asarray(x, dtype=self.enc1.dtype)
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise ShapeMismatch(f"input size {x.shape[1:]} must be divisible by 4")
        s = {"x": x}
        s["a1"] = forward(self.enc1, x)
        s["a2"] = forward(self.enc2, s["a1"].output)
        s["h1"] = forward(self.head1, s["a2"].output)
        s["a3"] = forward(self.dec1, np.concatenate([upsample(s["a2"].output, 2), s["a1"].output]))
        s["h2"] = forward(self.head2, s["a3"].output)
        s["a4"] = forward(self.dec2, np.concatenate([upsample(s["a3"].output, 2), x]))
        s["h3"] = forward(self.head3, s["a4"].output)
        d1, d2, d3 = s["h1"].output, s["h2"].output, s["h3"].output
        s["f1"] = forward(self.fuse1, np.concatenate([upsample(d1, 2), d2]))
        s["f2"] = forward(self.fuse2, np.concatenate([upsample(d1, 4), upsample(d2, 2), d3]))
        s["out"] = {"L_D1": d1, "L_D2": d2, "L_D3": d3,
                    "L_F1": s["f1"].output, "L_F2": s["f2"].output}
        return s

    def backward(self, s, losses):
        """Accumulate gradients for ``{loss_name: LossSpec}``; returns the total loss."""
        for net in self.nets:
            net.zero_grad()
        n = self.num_classes
        total = 0.0
        g = {k: np.zeros_like(v) for k, v in s["out"].items()}
        for name, spec in losses.items():
            value, grad = _output_loss(s["out"][name], spec)
            total += value
            g[name] += grad
        c = self.width
        gf2 = backprop(self.fuse2, s["f2"], g["L_F2"])
        g["L_D1"] += _downsample_sum(gf2[:n], 4)
        g["L_D2"] += _downsample_sum(gf2[n:2 * n], 2)
        g["L_D3"] += gf2[2 * n:]
        gf1 = backprop(self.fuse1, s["f1"], g["L_F1"])
        g["L_D1"] += _downsample_sum(gf1[:n], 2)
        g["L_D2"] += gf1[n:]
        ga4 = backprop(self.head3, s["h3"], g["L_D3"])
        gcat2 = backprop(self.dec2, s["a4"], ga4)
        ga3 = backprop(self.head2, s["h2"], g["L_D2"]) + _downsample_sum(gcat2[:c], 2)
        gcat1 = backprop(self.dec1, s["a3"], ga3)
        ga2 = backprop(self.head1, s["h1"], g["L_D1"]) + _downsample_sum(gcat1[:c], 2)
        ga1 = backprop(self.enc2, s["a2"], ga2) + gcat1[c:]
        backprop(self.enc1, s["a1"], ga1)
        return total


def _output_loss(z, spec):
    if spec.kind == "softmax_xent_visible":
        return softmax_xent(z, spec)
    return sigmoid_xent(z, spec)


SCALE_STRIDES = {"L_D1": 4, "L_D2": 2, "L_D3": 1, "L_F1": 2, "L_F2": 1}


def detector_targets(kp, sk, h, w, gt_spec=GroundtruthSpec(mode="disk"), weights=None):
    """Softmax losses for every detector output, each with disk groundtruth at its stride."""
    weights = weights or {}
    out = {}
    for name, stride in SCALE_STRIDES.items():
        k = scaled_keypoints(kp, stride)
        spec = GroundtruthSpec("disk", gt_spec.radius_factor, gt_spec.gauss_sigma,
                               min_radius=max(gt_spec.min_radius / stride, 0.5))
        target = make_groundtruth(k, sk, spec, h // stride, w // stride)
        out[name] = LossSpec("softmax_xent_visible", target,
                             mask=visibility_mask(target, kp.visible), weight=weights.get(name, 1.0))
    return out


def detector_positions(out, sk, blur_sigma=1.5):
    """Joint positions read from each detector output at full input resolution."""
    res = {}
    for name, z in out.items():
        probs = score_to_prob(upsample(np.asarray(z, dtype=float), SCALE_STRIDES[name]), "softmax")
        res[name] = KeypointSet(peak_positions(probs[:sk.num_joints], blur_sigma))
    return res


@dataclass
class DetectorTrainConfig:
    phase_steps: tuple = (300, 300, 400)
    lr: float = 0.001
    momentum: float = 0.0
    init_variance: float = 0.001
    width: int = 16
    loss_weights: dict = field(default_factory=dict)
    seed: int = 0


def train_detector(samples, sk, cfg=DetectorTrainConfig(), h=None, w=None):
    """Progressively train a :class:`MultiScaleDetector`.

    ``samples`` is a list of ``(input_maps, keypoints)``.  Returns the detector
    and the per-step loss history as ``(phase, loss)`` pairs.
    """
    x0 = np.asarray(samples[0][0])
    h = h or x0.shape[1]
    w = w or x0.shape[2]
    det = MultiScaleDetector(x0.shape[0], sk.num_joints + 1, cfg.width).init(cfg.init_variance, cfg.seed)
    targets = [detector_targets(kp, sk, h, w, weights=cfg.loss_weights) for _, kp in samples]
    opt = SGD(cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for phase, steps in enumerate(cfg.phase_steps, start=1):
        active = progressive_schedule(phase)
        for _ in range(steps):
            i = int(rng.integers(len(samples)))
            s = det.forward(samples[i][0])
            loss = det.backward(s, {k: v for k, v in targets[i].items() if k in active})
            if not np.isfinite(loss):
                raise DivergenceDetected(f"detector loss became {loss} in phase {phase}",
                                         [l for _, l in history] + [loss])
            opt.step(det.params(), det.grads())
            history.append((phase, loss))
    return det, history


# --- refinement training -----------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 0.001
    fine_tune_lr: float = 0.0002
    fine_tune_steps: int = 0
    momentum: float = 0.0
    init_variance: float = 0.001
    width: int = REFINE_WIDTH
    kernels: tuple = REFINE_KERNELS
    dtype: str = "float32"
    loss_reduction: str = "sum"  # "sum" over pixels or per-pixel "mean"
    seed: int = 0
    log_every: int = 0


@dataclass
class TrainResult:
    net: TinyNet
    losses: list


def train_refinement(stage, corpus, cfg=TrainConfig(), K=14, net=None):
    """Train a refinement net on ``corpus``: a sequence of ``(inputs, targets)``.

    ``stage`` is ``"global"`` (J = K outputs) or ``"limb0"``..``"limb3"`` (J = 3).
    Targets are soft maps in [0, 1] trained with the sigmoid cross-entropy
    over every labelled joint, visible or not.
    """
    if stage == "global":
        J = K
    elif stage in ("limb0", "limb1", "limb2", "limb3"):
        J = 3
    else:
        raise ValueError(f"unknown stage {stage!r}")
    dtype = np.dtype(cfg.dtype)
    if net is None:
        net = build_refine_net(K, J, cfg.width, cfg.kernels, dtype=dtype)
        init_gaussian(net, cfg.init_variance, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    losses = []
    phases = [(cfg.steps, cfg.lr), (cfg.fine_tune_steps, cfg.fine_tune_lr)]
    n = len(corpus)
    for steps, lr in phases:
        opt = SGD(lr, cfg.momentum)
        order = rng.permutation(n)
        for step in range(steps):
            if step and step % n == 0:
                order = rng.permutation(n)
            x, t = corpus[int(order[step % n])]
            acts = forward(net, x)
            value, grads = backward(net, acts, LossSpec("sigmoid_xent_all", np.asarray(t, dtype=dtype),
                                                         reduction=cfg.loss_reduction))
            if not np.isfinite(value):
                raise DivergenceDetected(f"{stage} loss became {value} at step {len(losses)}",
                                         losses + [value])
            opt.step(net.params(), grads)
            losses.append(value)
            if cfg.log_every and len(losses) % cfg.log_every == 0:
                log.info("%s step %d loss %.4f", stage, len(losses),
                         float(np.mean(losses[-cfg.log_every:])))
    return TrainResult(net, losses)
