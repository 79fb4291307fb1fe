"""Property suites for the warp, its adjoint and the network gradients.

Each check returns a :class:`CheckResult`.  ``run_suites`` accepts a set of
fault names that swap in deliberately broken operators, so a harness can
confirm the suites actually catch failures.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import Transform2D, invert, transform_point, warp_backward, warp_map
from .nnet import Conv2D, LossSpec, ReLU, SigmoidLike, TinyNet, backward, forward, init_gaussian, loss_and_grad
from .scoremap import GroundtruthSpec, gaussian_blur, make_groundtruth
from .skeleton import canonical_skeleton
from .synthdata import PoseSamplerConfig, sample_pose

FAULTS = ("adjoint", "gradient", "inverse")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    informational: bool = False

    def line(self):
        status = "info" if self.informational else ("PASS" if self.passed else "FAIL")
        return f"[{status}] {self.name}: {self.value:.3g} (limit {self.limit:.3g})"


def _random_transform(rng, size=64.0):
    return Transform2D.from_angle(rng.uniform(-np.pi, np.pi), rng.uniform(0, size, 2))


def point_roundtrip(rng, n=1000, inverse=invert):
    worst = 0.0
    for _ in range(n):
        t = _random_transform(rng)
        p = rng.uniform(-100, 200, 2)
        worst = max(worst, float(np.hypot(*(transform_point(inverse(t), transform_point(t, p)) - p))))
    return CheckResult("point round-trip", worst <= 1e-9, worst, 1e-9)


def isometry(rng, n=1000):
    worst = 0.0
    for _ in range(n):
        t = _random_transform(rng)
        p, q = rng.uniform(-100, 200, (2, 2))
        d = np.hypot(*(transform_point(t, p) - transform_point(t, q))) - np.hypot(*(p - q))
        worst = max(worst, abs(float(d)))
    return CheckResult("isometry", worst <= 1e-9, worst, 1e-9)


def quarter_turns_exact(rng, n=20, size=33):
    """90-degree multiples about the lattice-aligned centre permute pixels exactly."""
    c = ((size - 1) / 2, (size - 1) / 2)
    bad = 0
    for _ in range(n):
        m = rng.random((3, size, size))
        for k in (1, 2, 3):
            t = Transform2D.from_angle(k * np.pi / 2, c)
            w = warp_map(m, t)
            if not np.array_equal(w, np.rot90(m, k=-k, axes=(1, 2))):
                bad += 1
            if not np.array_equal(warp_map(w, invert(t)), m):
                bad += 1
    return CheckResult("quarter-turn warps exact", bad == 0, bad, 0)


def warp_adjoint(rng, n=100, backward_op=warp_backward):
    worst = 0.0
    for _ in range(n):
        m = rng.standard_normal((4, 24, 24))
        g = rng.standard_normal((4, 24, 24))
        t = _random_transform(rng, 24.0)
        channels = None if rng.random() < 0.5 else sorted(rng.choice(4, 2, replace=False))
        lhs = np.sum(warp_map(m, t, channels) * g)
        rhs = np.sum(m * backward_op(g, t, channels))
        worst = max(worst, abs(float(lhs - rhs)))
    return CheckResult("warp adjoint", worst <= 1e-6, worst, 1e-6)


def map_roundtrip(rng, n=50, size=128, blur_sigma=1.5):
    """Largest ``|warp(warp(m, t), t^-1) - m| / max|m|`` over blurred groundtruth maps."""
    sk = canonical_skeleton()
    cfg = PoseSamplerConfig(canvas=(size, size))
    worst = 0.0
    for _ in range(n):
        kp = sample_pose(cfg, rng, sk)
        m = gaussian_blur(make_groundtruth(kp, sk, GroundtruthSpec(), size, size)[:sk.num_joints], blur_sigma)
        t = Transform2D.from_angle(rng.uniform(-np.pi, np.pi), ((size - 1) / 2, (size - 1) / 2))
        err = np.abs(warp_map(warp_map(m, t), invert(t)) - m).max() / np.abs(m).max()
        worst = max(worst, float(err))
    return CheckResult("smooth-map round-trip", worst <= 0.02, worst, 0.02)


def small_net(sigmoid=True, seed=0):
    layers = [Conv2D(3, 4, 3), ReLU(), Conv2D(4, 4, 5), ReLU(), Conv2D(4, 3, 3, stride=2)]
    if sigmoid:
        layers.append(SigmoidLike(1.3, -0.2))
    net = TinyNet(layers, input_channels=3)
    init_gaussian(net, 0.1, seed=seed)
    if sigmoid:
        layers[-1].w[...] = 1.3
        layers[-1].b[...] = -0.2
    return net


def _loss_value(net, x, loss):
    return loss_and_grad(net, forward(net, x), loss)[0]


def fd_gradient_error(net, x, loss, h=1e-6, corrupt=False):
    """Norm-wise relative error between backprop and central differences over every parameter."""
    _, grads = backward(net, forward(net, x), loss)
    analytic = np.concatenate([g.ravel() for g in grads])
    if corrupt:
        analytic = analytic * 1.01
    numeric = []
    for p in net.params():
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = _loss_value(net, x, loss)
            flat[i] = old - h
            down = _loss_value(net, x, loss)
            flat[i] = old
            numeric.append((up - down) / (2 * h))
    numeric = np.array(numeric)
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(numeric - analytic) / scale)


def gradient_suite(rng, corrupt=False):
    x = rng.standard_normal((3, 10, 10))
    out = []
    soft = small_net(sigmoid=False)
    z_shape = soft.output_shape(x.shape)
    label = rng.integers(0, z_shape[0], z_shape[1:])
    target = np.eye(z_shape[0])[label].transpose(2, 0, 1)
    mask = (rng.random(z_shape[1:]) < 0.8).astype(float)
    err = fd_gradient_error(soft, x, LossSpec("softmax_xent_visible", target, mask=mask), corrupt=corrupt)
    out.append(CheckResult("softmax loss gradient", err <= 1e-4, err, 1e-4))
    sig = small_net(sigmoid=True)
    target = rng.random(sig.output_shape(x.shape))
    err = fd_gradient_error(sig, x, LossSpec("sigmoid_xent_all", target), corrupt=corrupt)
    out.append(CheckResult("sigmoid loss gradient", err <= 1e-4, err, 1e-4))
    return out


def _broken_backward(g, t, channels=None):
    return 1.001 * warp_backward(g, t, channels)


def _broken_invert(t):
    return Transform2D(t.R.T, t.c + 1e-6)


def run_suites(seed=0, faults=(), include_gradients=True):
    """All property checks; ``faults`` names operators to replace with broken ones."""
    unknown = set(faults) - set(FAULTS)
    if unknown:
        raise ValueError(f"unknown faults {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    results = [
        point_roundtrip(rng, inverse=_broken_invert if "inverse" in faults else invert),
        isometry(rng),
        quarter_turns_exact(rng),
        warp_adjoint(rng, backward_op=_broken_backward if "adjoint" in faults else warp_backward),
    ]
    if include_gradients:
        results += gradient_suite(rng, corrupt="gradient" in faults)
    return results
