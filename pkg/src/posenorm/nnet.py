"""A small convolutional network engine: layers, losses, back-propagation and SGD.

Inputs and activations are single images of shape ``(C, H, W)``.  Convolution
is cross-correlation (no kernel flip) with a per-output-channel bias.
"""

import copy
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_expit

from .errors import ParseError, ShapeMismatch

# Kernels with at least this many taps use the FFT path at stride 1.
FFT_MIN_TAPS = 25


def _same_pads(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


class Layer:
    kind = ""

    def params(self):
        return []

    def grads(self):
        return []

    def zero_grad(self):
        for g in self.grads():
            g[...] = 0.0

    def output_shape(self, shape):
        return shape

    def astype(self, dtype):
        return self


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, cin, cout, kh, kw=None, stride=1, padding="same", method="auto",
                 dtype=np.float64):
        kw = kh if kw is None else kw
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        self.cin, self.cout, self.kh, self.kw = cin, cout, kh, kw
        self.stride, self.padding, self.method = stride, padding, method
        self.weight = np.zeros((cout, cin, kh, kw), dtype=dtype)
        self.bias = np.zeros(cout, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    def __repr__(self):
        return (f"Conv2D({self.cin}->{self.cout}, {self.kh}x{self.kw}, "
                f"stride={self.stride}, padding={self.padding!r})")

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def astype(self, dtype):
        for name in ("weight", "bias", "grad_weight", "grad_bias"):
            setattr(self, name, getattr(self, name).astype(dtype))
        return self

    def _pads(self, h, w):
        if self.padding == "valid":
            return (0, 0), (0, 0)
        return _same_pads(h, self.kh, self.stride), _same_pads(w, self.kw, self.stride)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.cin:
            raise ShapeMismatch(f"{self!r} got {c} input channels")
        (pt, pb), (pl, pr) = self._pads(h, w)
        ho = (h + pt + pb - self.kh) // self.stride + 1
        wo = (w + pl + pr - self.kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"{self!r} cannot consume a {h}x{w} input")
        return (self.cout, ho, wo)

    def _use_fft(self):
        if self.method == "fft":
            return True
        if self.method == "direct":
            return False
        return self.stride == 1 and self.kh * self.kw >= FFT_MIN_TAPS

    def forward(self, x):
        self.output_shape(x.shape)
        (pt, pb), (pl, pr) = self._pads(x.shape[1], x.shape[2])
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr))) if pt or pb or pl or pr else x
        if self._use_fft() and self.stride == 1:
            y, cache = self._forward_fft(xp)
        else:
            y, cache = self._forward_direct(xp)
        y += self.bias[:, None, None]
        cache["xp_shape"] = xp.shape
        cache["pads"] = (pt, pl)
        return y, cache

    def backward(self, dy, x, cache):
        self.grad_bias += dy.sum(axis=(1, 2))
        if "Xf" in cache:
            dxp = self._backward_fft(dy, cache)
        else:
            dxp = self._backward_direct(dy, cache)
        pt, pl = cache["pads"]
        return dxp[:, pt:pt + x.shape[1], pl:pl + x.shape[2]]

    # direct path: strided windows + tensordot

    def _windows(self, xp):
        s = self.stride
        return sliding_window_view(xp, (self.kh, self.kw), axis=(1, 2))[:, ::s, ::s]

    def _forward_direct(self, xp):
        win = self._windows(xp)
        y = np.tensordot(self.weight, win, axes=([1, 2, 3], [0, 3, 4]))
        return y, {"xp": xp}

    def _backward_direct(self, dy, cache):
        xp = cache["xp"]
        win = self._windows(xp)
        self.grad_weight += np.tensordot(dy, win, axes=([1, 2], [1, 2]))
        dcols = np.tensordot(self.weight, dy, axes=([0], [0]))  # (C, kh, kw, Ho, Wo)
        dxp = np.zeros(xp.shape, dtype=dy.dtype)
        s = self.stride
        ho, wo = dy.shape[1:]
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
        return dxp

    # FFT path (stride 1): linear correlation on a grid large enough to avoid wrap-around

    def _fft_shape(self, xp_shape):
        return (scipy.fft.next_fast_len(xp_shape[1], real=True),
                scipy.fft.next_fast_len(xp_shape[2], real=True))

    def _forward_fft(self, xp):
        n = self._fft_shape(xp.shape)
        Xf = scipy.fft.rfft2(xp, s=n)
        Wf = scipy.fft.rfft2(self.weight, s=n)
        Yf = np.einsum("cuv,ocuv->ouv", Xf, Wf.conj())
        ho = xp.shape[1] - self.kh + 1
        wo = xp.shape[2] - self.kw + 1
        y = scipy.fft.irfft2(Yf, s=n)[:, :ho, :wo]
        return np.ascontiguousarray(y), {"Xf": Xf, "Wf": Wf, "n": n}

    def _backward_fft(self, dy, cache):
        n = cache["n"]
        DYf = scipy.fft.rfft2(dy, s=n)
        Gf = np.einsum("cuv,ouv->ocuv", cache["Xf"], DYf.conj())
        self.grad_weight += scipy.fft.irfft2(Gf, s=n)[:, :, :self.kh, :self.kw]
        DXf = np.einsum("ouv,ocuv->cuv", DYf, cache["Wf"])
        _, hp, wp = cache["xp_shape"]
        return scipy.fft.irfft2(DXf, s=n)[:, :hp, :wp]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0), None

    def backward(self, dy, x, cache):
        return dy * (x > 0)


class Upsample2x(Layer):
    """Nearest-neighbour upsampling by 2 along both spatial axes."""

    kind = "upsample2x"

    def output_shape(self, shape):
        c, h, w = shape
        return (c, 2 * h, 2 * w)

    def forward(self, x):
        return x.repeat(2, axis=1).repeat(2, axis=2), None

    def backward(self, dy, x, cache):
        c, h, w = x.shape
        return dy.reshape(c, h, 2, w, 2).sum(axis=(2, 4))


class SigmoidLike(Layer):
    """Elementwise 1 / (1 + exp(-(w x + b))) with learnable scalars w, b."""

    kind = "sigmoid_like"

    def __init__(self, w=1.0, b=0.0, dtype=np.float64):
        self.w = np.array([w], dtype=dtype)
        self.b = np.array([b], dtype=dtype)
        self.grad_w = np.zeros_like(self.w)
        self.grad_b = np.zeros_like(self.b)

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.grad_w, self.grad_b]

    def astype(self, dtype):
        for name in ("w", "b", "grad_w", "grad_b"):
            setattr(self, name, getattr(self, name).astype(dtype))
        return self

    def forward(self, x):
        return expit(self.w[0] * x + self.b[0]), None

    def backward(self, dy, x, cache, y=None):
        y = expit(self.w[0] * x + self.b[0]) if y is None else y
        return self.backward_pre(dy * y * (1.0 - y), x)

    def backward_pre(self, ds, x):
        """Backward given the gradient with respect to the pre-activation w x + b."""
        self.grad_w += np.sum(ds * x)
        self.grad_b += np.sum(ds)
        return ds * self.w[0]


@dataclass
class TinyNet:
    layers: list
    input_channels: int = None

    def __post_init__(self):
        if self.input_channels is None:
            convs = [l for l in self.layers if isinstance(l, Conv2D)]
            self.input_channels = convs[0].cin if convs else None

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def num_params(self):
        return sum(p.size for p in self.params())

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    @property
    def dtype(self):
        ps = self.params()
        return ps[0].dtype if ps else np.float64

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class Activations:
    values: list  # input followed by each layer's output
    caches: list = field(default_factory=list)

    @property
    def output(self):
        return self.values[-1]


def forward(net, x):
    x = np.asarray(x, dtype=net.dtype)
    if x.ndim != 3:
        raise ShapeMismatch(f"expected a (C, H, W) input, got shape {x.shape}")
    if net.input_channels is not None and x.shape[0] != net.input_channels:
        raise ShapeMismatch(f"net expects {net.input_channels} channels, got {x.shape[0]}")
    acts = Activations([x], [])
    for layer in net.layers:
        y, cache = layer.forward(acts.values[-1])
        acts.values.append(y)
        acts.caches.append(cache)
    return acts


def predict(net, x):
    return forward(net, x).output


@dataclass
class LossSpec:
    """``softmax_xent_visible``: hard one-hot ``target`` over all channels, ``mask``
    zeroes pixels labelled with occluded joints; averaged over unmasked pixels.

    ``sigmoid_xent_all``: per-channel binary cross-entropy against soft targets
    in [0, 1], summed over pixels and channels.  When the net ends with a
    :class:`SigmoidLike` layer the loss is evaluated on its pre-activation.
    """

    kind: str
    target: np.ndarray
    mask: np.ndarray = None  # (H, W) pixel weights
    weight: float = 1.0
    reduction: str = None  # "sum" | "mean"; default depends on kind

    def __post_init__(self):
        if self.kind not in ("softmax_xent_visible", "sigmoid_xent_all"):
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.reduction is None:
            self.reduction = "mean" if self.kind == "softmax_xent_visible" else "sum"


def visibility_mask(target, visible):
    """Pixel mask excluding pixels whose one-hot label is an occluded joint."""
    target = np.asarray(target)
    label = np.argmax(target, axis=0)
    K = len(visible)
    hidden = np.zeros(target.shape[0], dtype=bool)
    hidden[:K] = ~np.asarray(visible, dtype=bool)
    return (~hidden[label]).astype(float)


def _reduce(total, loss, npix):
    if loss.reduction == "mean":
        return total / max(npix, 1e-12)
    return total


def softmax_xent(z, loss):
    """Loss value and gradient with respect to the scores ``z``."""
    t = np.asarray(loss.target, dtype=z.dtype)
    if t.shape != z.shape:
        raise ShapeMismatch(f"target {t.shape} vs output {z.shape}")
    mask = np.ones(z.shape[1:], dtype=z.dtype) if loss.mask is None else np.asarray(loss.mask, dtype=z.dtype)
    zmax = z.max(axis=0, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=0, keepdims=True)
    logp = z - zmax - np.log(se)
    p = e / se
    npix = mask.sum()
    value = _reduce(-np.sum(mask * np.sum(t * logp, axis=0)), loss, npix)
    grad = mask * (p * t.sum(axis=0, keepdims=True) - t)
    grad = _reduce(grad, loss, npix)
    return loss.weight * float(value), loss.weight * grad


def sigmoid_xent(s, loss):
    """Loss value and gradient with respect to the logits ``s``."""
    t = np.asarray(loss.target, dtype=s.dtype)
    if t.shape != s.shape:
        raise ShapeMismatch(f"target {t.shape} vs output {s.shape}")
    mask = 1.0 if loss.mask is None else np.asarray(loss.mask, dtype=s.dtype)
    npix = s.shape[1] * s.shape[2] if loss.mask is None else float(np.sum(loss.mask))
    value = _reduce(-np.sum(mask * (t * log_expit(s) + (1 - t) * log_expit(-s))), loss, npix)
    grad = _reduce(mask * (expit(s) - t), loss, npix)
    return loss.weight * float(value), loss.weight * grad


def loss_and_grad(net, acts, loss):
    """Returns ``(value, grad, start)`` without touching any gradient buffer.

    ``grad`` is with respect to the output of layer ``start - 1``.  A trailing
    sigmoid_like layer fused with the sigmoid loss is the one exception: then
    ``start == len(layers) - 1`` and ``grad`` is taken at its pre-activation.
    """
    n = len(net.layers)
    if loss.kind == "softmax_xent_visible":
        value, g = softmax_xent(acts.output, loss)
        return value, g, n
    last = net.layers[-1] if net.layers else None
    if isinstance(last, SigmoidLike):
        x = acts.values[-2]
        value, ds = sigmoid_xent(last.w[0] * x + last.b[0], loss)
        return value, ds, n - 1
    value, g = sigmoid_xent(acts.output, loss)
    return value, g, n


def backprop(net, acts, grad, start=None):
    """Propagate ``grad`` (w.r.t. output of layer ``start - 1``) back to the input,
    accumulating parameter gradients.  Returns the input gradient."""
    start = len(net.layers) if start is None else start
    g = grad
    for i in range(start - 1, -1, -1):
        g = net.layers[i].backward(g, acts.values[i], acts.caches[i])
    return g


def backward(net, acts, loss):
    """Zero the gradient buffers, back-propagate ``loss`` and return ``(value, grads)``.

    ``grads`` are copies, so later passes do not change them.
    """
    net.zero_grad()
    value, g, start = loss_and_grad(net, acts, loss)
    if start < len(net.layers):
        last = net.layers[-1]
        g = last.backward_pre(g, acts.values[-2])
    backprop(net, acts, g, start)
    return value, [g.copy() for g in net.grads()]


class SGD:
    """Plain SGD, optionally with classical momentum."""

    def __init__(self, lr, momentum=0.0):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.momentum = momentum
        self._velocity = None

    def step(self, params, grads):
        if self.momentum == 0.0:
            for p, g in zip(params, grads):
                p -= self.lr * g
            return
        if self._velocity is None:
            self._velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self._velocity):
            v *= self.momentum
            v -= self.lr * g
            p += v


def sgd_step(net, grads, lr):
    """p <- p - lr * g for every parameter, in place; returns ``net``."""
    SGD(lr).step(net.params(), grads)
    return net


def init_gaussian(net, variance=0.001, seed=0):
    if variance <= 0:
        raise ValueError("variance must be positive")
    rng = np.random.default_rng(seed)
    std = np.sqrt(variance)
    for layer in net.layers:
        if isinstance(layer, Conv2D):
            layer.weight[...] = rng.normal(0.0, std, size=layer.weight.shape)
            layer.bias[...] = 0.0
        elif isinstance(layer, SigmoidLike):
            layer.w[...] = 1.0
            layer.b[...] = 0.0
    return net


# --- TNET1 checkpoints -------------------------------------------------------

TNET_MAGIC = b"TNET"
TNET_VERSION = 1
_KIND_TAGS = {"conv2d": 1, "relu": 2, "upsample2x": 3, "sigmoid_like": 4}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_PADDING_CODES = {"same": 0, "valid": 1}


def net_to_bytes(net):
    out = [struct.pack("<4sII", TNET_MAGIC, TNET_VERSION, len(net.layers))]
    for layer in net.layers:
        if isinstance(layer, Conv2D):
            dims = [layer.cout, layer.cin, layer.kh, layer.kw, layer.stride,
                    _PADDING_CODES[layer.padding]]
        else:
            dims = []
        out.append(struct.pack(f"<BI{len(dims)}I", _KIND_TAGS[layer.kind], len(dims), *dims))
        for p in layer.params():
            out.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise ParseError(f"TNET data truncated at byte {len(self.buf)}", offset=len(self.buf))
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def floats(self, n):
        (raw,) = self.take(f"<{4 * n}s")
        return np.frombuffer(raw, dtype="<f4")


def net_from_bytes(buf, dtype=np.float64):
    r = _Reader(buf)
    magic, version, nlayers = r.take("<4sII")
    if magic != TNET_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != TNET_VERSION:
        raise ParseError(f"unsupported TNET version {version}", offset=4)
    layers = []
    for _ in range(nlayers):
        tag, ndims = r.take("<BI")
        if tag not in _TAG_KINDS:
            raise ParseError(f"unknown layer tag {tag}", offset=r.pos - 5)
        dims = r.take(f"<{ndims}I")
        kind = _TAG_KINDS[tag]
        if kind == "conv2d":
            cout, cin, kh, kw, stride, pad = dims
            padding = {v: k for k, v in _PADDING_CODES.items()}[pad]
            layer = Conv2D(cin, cout, kh, kw, stride=stride, padding=padding, dtype=dtype)
        elif kind == "relu":
            layer = ReLU()
        elif kind == "upsample2x":
            layer = Upsample2x()
        else:
            layer = SigmoidLike(dtype=dtype)
        for p in layer.params():
            p[...] = r.floats(p.size).reshape(p.shape)
        layers.append(layer)
    if r.pos != len(buf):
        raise ParseError(f"{len(buf) - r.pos} trailing bytes after last layer", offset=r.pos)
    return TinyNet(layers)


def save_net(path, net):
    with open(path, "wb") as f:
        f.write(net_to_bytes(net))


def load_net(path, dtype=np.float64):
    with open(path, "rb") as f:
        return net_from_bytes(f.read(), dtype=dtype)
