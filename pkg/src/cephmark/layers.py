"""Layers with hand-written forward and backward passes.

Each op comes as a pair of functions: ``*_forward`` returns the output and a
:class:`GradTape` holding whatever the backward pass needs, ``*_backward``
consumes that tape. The small classes at the bottom bind parameters to the
functional core and enforce forward-before-backward ordering.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, SeededRng, ShapeError, as_tensor4, randn_init

log = logging.getLogger(__name__)


class TapeError(RuntimeError):
    """Backward called without (or with the wrong) recorded forward."""


@dataclass
class GradTape:
    op: str
    cache: dict = field(default_factory=dict)

    def expect(self, op: str) -> dict:
        if self.op != op:
            raise TapeError(f"tape recorded {self.op!r}, backward for {op!r} requested")
        return self.cache


# --------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_c, in_c // groups, kh, kw)
    bias: np.ndarray  # (out_c,)
    stride: int = 1
    padding: int = 0
    groups: int = 1
    grad_weight: np.ndarray | None = None
    grad_bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        out_c = self.weight.shape[0]
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got {self.weight.shape}")
        if self.bias.shape != (out_c,):
            raise ShapeError(f"conv bias shape {self.bias.shape} != ({out_c},)")
        if self.groups < 1 or out_c % self.groups:
            raise ShapeError(f"out_c={out_c} not divisible by groups={self.groups}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        if self.grad_weight is None:
            self.grad_weight = np.zeros_like(self.weight)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def kaiming(cls, in_c, out_c, k, rng: SeededRng, stride=1, padding=0, groups=1):
        """He-normal weights with std sqrt(2 / fan_in), zero bias."""
        if in_c % groups:
            raise ShapeError(f"in_c={in_c} not divisible by groups={groups}")
        kh, kw = (k, k) if isinstance(k, int) else k
        fan_in = (in_c // groups) * kh * kw
        weight = randn_init((out_c, in_c // groups, kh, kw), rng, math.sqrt(2.0 / fan_in))
        return cls(weight, np.zeros(out_c), stride, padding, groups)


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x: np.ndarray, p: ConvParams) -> tuple[np.ndarray, GradTape]:
    """Grouped 2-D cross-correlation via im2col + batched matmul."""
    x = as_tensor4(x, "conv input")
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"conv expects {p.in_channels} input channels, got {c}")
    out_c, cin_g, kh, kw = p.weight.shape
    s, pad, g = p.stride, p.padding, p.groups
    oh, ow = _out_size(h, kh, s, pad), _out_size(w, kw, s, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv output would be empty for input {x.shape}, kernel {kh}x{kw}")

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
    cols = cols.reshape(n, g, cin_g * kh * kw, oh * ow)
    wmat = p.weight.reshape(g, out_c // g, cin_g * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, out_c, oh, ow)
    out += p.bias[None, :, None, None]
    return out, GradTape("conv2d", {"cols": cols, "x_shape": x.shape, "out_hw": (oh, ow)})


def conv2d_backward(grad_out: np.ndarray, tape: GradTape, p: ConvParams):
    """Returns (grad_x, grad_weight, grad_bias)."""
    cache = tape.expect("conv2d")
    cols = cache["cols"]
    n, c, h, w = cache["x_shape"]
    oh, ow = cache["out_hw"]
    out_c, cin_g, kh, kw = p.weight.shape
    s, pad, g = p.stride, p.padding, p.groups
    if grad_out.shape != (n, out_c, oh, ow):
        raise ShapeError(f"conv grad_out shape {grad_out.shape} != {(n, out_c, oh, ow)}")

    gmat = grad_out.reshape(n, g, out_c // g, oh * ow)
    grad_w = np.matmul(gmat, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(p.weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))

    wmat = p.weight.reshape(g, out_c // g, cin_g * kh * kw)
    gcols = np.matmul(wmat.transpose(0, 2, 1), gmat).reshape(n, c, kh, kw, oh, ow)
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += gcols[:, :, i, j]
    grad_x = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"
    trained: bool = False
    grad_gamma: np.ndarray | None = None
    grad_beta: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(np.asarray(self.running_var) <= 0):
            raise ValueError("running_var must be strictly positive")
        if self.grad_gamma is None:
            self.grad_gamma = np.zeros_like(self.gamma)
        if self.grad_beta is None:
            self.grad_beta = np.zeros_like(self.beta)

    @classmethod
    def identity(cls, channels: int, **kw):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), **kw)


def batchnorm_forward(x: np.ndarray, p: BatchNormParams) -> tuple[np.ndarray, GradTape]:
    x = as_tensor4(x, "batchnorm input")
    c = x.shape[1]
    if p.gamma.shape != (c,):
        raise ShapeError(f"batchnorm has {p.gamma.shape[0]} channels, input has {c}")
    if p.mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // c
        unbiased = var * m / max(m - 1, 1)
        p.running_mean = (1 - p.momentum) * p.running_mean + p.momentum * mean
        p.running_var = (1 - p.momentum) * p.running_var + p.momentum * unbiased
        p.trained = True
    elif p.mode == "eval":
        if not p.trained:
            log.warning("batchnorm used in eval mode before any training step; running stats are defaults")
        mean, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {p.mode!r}")
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * p.gamma[None, :, None, None] + p.beta[None, :, None, None]
    return out, GradTape("batchnorm", {"xhat": xhat, "inv_std": inv_std, "mode": p.mode})


def batchnorm_backward(grad_out: np.ndarray, tape: GradTape, p: BatchNormParams):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    cache = tape.expect("batchnorm")
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    gxhat = grad_out * p.gamma[None, :, None, None]
    if cache["mode"] == "eval":
        return gxhat * inv_std[None, :, None, None], grad_gamma, grad_beta
    mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    grad_x = (gxhat - mean_g - xhat * mean_gx) * inv_std[None, :, None, None]
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# activations

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> tuple[np.ndarray, GradTape]:
    """Tanh-approximated GELU."""
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), GradTape("gelu", {"x": x, "t": t})


def gelu_backward(grad_out: np.ndarray, tape: GradTape) -> np.ndarray:
    cache = tape.expect("gelu")
    x, t = cache["x"], cache["t"]
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner)


def relu(x: np.ndarray) -> tuple[np.ndarray, GradTape]:
    mask = x > 0
    return np.where(mask, x, 0.0), GradTape("relu", {"mask": mask})


def relu_backward(grad_out: np.ndarray, tape: GradTape) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(tape.expect("relu")["mask"], grad_out, 0.0)


# --------------------------------------------------------------------------
# pixel shuffle and resampling


def pixel_shuffle(x: np.ndarray, s: int) -> np.ndarray:
    """(n, c*s*s, h, w) -> (n, c, h*s, w*s).

    out[n, c, y, x] = in[n, c*s*s + (y % s)*s + (x % s), y // s, x // s]
    """
    x = as_tensor4(x, "pixel_shuffle input")
    n, c, h, w = x.shape
    if s < 1 or c % (s * s):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by s^2={s * s}")
    co = c // (s * s)
    return x.reshape(n, co, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * s, w * s)


def pixel_unshuffle(x: np.ndarray, s: int) -> np.ndarray:
    """Inverse permutation of :func:`pixel_shuffle`; also its backward pass."""
    x = as_tensor4(x, "pixel_unshuffle input")
    n, c, hs, ws = x.shape
    if s < 1 or hs % s or ws % s:
        raise ShapeError(f"pixel_unshuffle: spatial dims {hs}x{ws} not divisible by {s}")
    h, w = hs // s, ws // s
    return x.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h, w)


def interp_matrix(src: int, dst: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (dst, src).

    Source coordinate of destination index d is d * (src - 1) / (dst - 1).
    A 1-pixel source axis (or destination) degenerates to replication.
    """
    a = np.zeros((dst, src), dtype=DTYPE)
    if src == 1 or dst == 1:
        a[:, 0] = 1.0
        return a
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    rows = np.arange(dst)
    a[rows, lo] = 1.0 - frac
    a[rows, lo + 1] += frac
    return a


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    x = as_tensor4(x, "resize input")
    ah = interp_matrix(x.shape[2], out_h)
    aw = interp_matrix(x.shape[3], out_w)
    return np.matmul(np.matmul(ah, x), aw.T)


def bilinear_upsample_x2(x: np.ndarray) -> tuple[np.ndarray, GradTape]:
    x = as_tensor4(x, "upsample input")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        log.debug("upsample on a 1-pixel axis falls back to replication")
    ah, aw = interp_matrix(h, 2 * h), interp_matrix(w, 2 * w)
    out = np.matmul(np.matmul(ah, x), aw.T)
    return out, GradTape("upsample", {"ah": ah, "aw": aw})


def bilinear_upsample_x2_backward(grad_out: np.ndarray, tape: GradTape) -> np.ndarray:
    cache = tape.expect("upsample")
    return np.matmul(np.matmul(cache["ah"].T, grad_out), cache["aw"])


# --------------------------------------------------------------------------
# stateful layer wrappers


class Layer:
    """Base class: owns parameters and the tape of its last forward."""

    training = True

    def __init__(self):
        self._tape = None

    def _take_tape(self):
        if self._tape is None:
            raise TapeError(f"{type(self).__name__}.backward called before forward")
        tape, self._tape = self._tape, None
        return tape

    def parameters(self, prefix: str = ""):
        """Yield (path, value_array, grad_array) for learnable tensors."""
        return iter(())

    def buffers(self, prefix: str = ""):
        """Yield (path, array) for non-learnable persistent state."""
        return iter(())

    def train(self, mode: bool = True):
        self.training = mode
        return self


class Conv2d(Layer):
    def __init__(self, in_c, out_c, k, rng: SeededRng, stride=1, padding=0, groups=1):
        super().__init__()
        self.p = ConvParams.kaiming(in_c, out_c, k, rng, stride, padding, groups)

    def forward(self, x):
        out, self._tape = conv2d_forward(x, self.p)
        return out

    def backward(self, grad_out):
        gx, gw, gb = conv2d_backward(grad_out, self._take_tape(), self.p)
        self.p.grad_weight += gw
        self.p.grad_bias += gb
        return gx

    def parameters(self, prefix=""):
        yield f"{prefix}weight", self.p.weight, self.p.grad_weight
        yield f"{prefix}bias", self.p.bias, self.p.grad_bias


class BatchNorm2d(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5):
        super().__init__()
        self.p = BatchNormParams.identity(channels, momentum=momentum, epsilon=epsilon)

    def forward(self, x):
        self.p.mode = "train" if self.training else "eval"
        out, self._tape = batchnorm_forward(x, self.p)
        return out

    def backward(self, grad_out):
        gx, gg, gb = batchnorm_backward(grad_out, self._take_tape(), self.p)
        self.p.grad_gamma += gg
        self.p.grad_beta += gb
        return gx

    def parameters(self, prefix=""):
        yield f"{prefix}gamma", self.p.gamma, self.p.grad_gamma
        yield f"{prefix}beta", self.p.beta, self.p.grad_beta

    def buffers(self, prefix=""):
        yield f"{prefix}running_mean", self.p.running_mean
        yield f"{prefix}running_var", self.p.running_var


class GELU(Layer):
    def forward(self, x):
        out, self._tape = gelu(x)
        return out

    def backward(self, grad_out):
        return gelu_backward(grad_out, self._take_tape())


class ReLU(Layer):
    def forward(self, x):
        out, self._tape = relu(x)
        return out

    def backward(self, grad_out):
        return relu_backward(grad_out, self._take_tape())


class PixelShuffle(Layer):
    def __init__(self, s: int):
        super().__init__()
        self.s = s

    def forward(self, x):
        self._tape = GradTape("pixel_shuffle")
        return pixel_shuffle(x, self.s)

    def backward(self, grad_out):
        self._take_tape().expect("pixel_shuffle")
        return pixel_unshuffle(grad_out, self.s)


class Upsample2x(Layer):
    def forward(self, x):
        out, self._tape = bilinear_upsample_x2(x)
        return out

    def backward(self, grad_out):
        return bilinear_upsample_x2_backward(grad_out, self._take_tape())


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def parameters(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.parameters(f"{prefix}{i}.")

    def buffers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.buffers(f"{prefix}{i}.")

    def train(self, mode=True):
        self.training = mode
        for layer in self.layers:
            layer.train(mode)
        return self


def iter_layers(root: Layer):
    """Depth-first walk over ``root`` and every Layer reachable from its attributes."""
    seen = set()
    stack = [root]
    while stack:
        layer = stack.pop()
        if id(layer) in seen:
            continue
        seen.add(id(layer))
        yield layer
        for value in vars(layer).values():
            items = value.values() if isinstance(value, dict) else value if isinstance(value, list) else [value]
            stack.extend(v for v in items if isinstance(v, Layer))


def conv_bn_relu(in_c, out_c, k, rng, stride=1) -> Sequential:
    return Sequential(Conv2d(in_c, out_c, k, rng, stride=stride, padding=k // 2), BatchNorm2d(out_c), ReLU())
