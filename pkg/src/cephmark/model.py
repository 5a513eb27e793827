"""Backbone-neck-head landmark network with pixel-shuffle heads.

The backbone is a plain strided-conv pyramid emitting F2..F5 at strides
4..32. The neck fuses top-down (M5 = F5, M_i = fuse(F_i, M_{i+1})) and each
supervised scale gets a keypoint head: pointwise encoder + ReLU, one
large-kernel conv per keypoint producing s*s low-resolution maps, then pixel
shuffle up to (H / 2**i) * s.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .layers import (
    GELU,
    BatchNorm2d,
    Conv2d,
    Layer,
    PixelShuffle,
    ReLU,
    Sequential,
    Upsample2x,
    conv_bn_relu,
    iter_layers,
)
from .tensor import DTYPE, SeededRng, ShapeError, as_tensor4, concat_channels, randn_init

PARAM_MAGIC = b"SRKPv1"
SCALES = (2, 3, 4, 5)


@dataclass
class BackboneConfig:
    in_channels: int = 1
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 128)
    input_size: tuple = (128, 128)  # (H, W)

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_size = tuple(int(v) for v in self.input_size)
        if len(self.stage_channels) != 4:
            raise ValueError("stage_channels needs one width for each of F2..F5")
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} must be divisible by 32")


@dataclass
class HeadConfig:
    num_keypoints: int = 4
    supervised_scales: tuple = (2, 3)
    upscale: dict = field(default_factory=dict)  # scale -> pixel-shuffle ratio; default 2**scale
    lkc_kernel: int = 9

    def __post_init__(self):
        self.supervised_scales = tuple(sorted(int(s) for s in self.supervised_scales))
        if not self.supervised_scales or not set(self.supervised_scales) <= set(SCALES):
            raise ValueError(f"supervised_scales must be a non-empty subset of {SCALES}")
        self.upscale = {int(k): int(v) for k, v in self.upscale.items()}
        for s in self.supervised_scales:
            self.upscale.setdefault(s, 2**s)
        if self.lkc_kernel % 2 == 0:
            raise ValueError("lkc_kernel must be odd")
        if self.num_keypoints < 1:
            raise ValueError("num_keypoints must be positive")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    neck_width: int = 32

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            backbone=BackboneConfig(**d.get("backbone", {})),
            head=HeadConfig(**d.get("head", {})),
            neck_width=d.get("neck_width", 32),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["stage_channels"] = list(self.backbone.stage_channels)
        d["backbone"]["input_size"] = list(self.backbone.input_size)
        d["head"]["supervised_scales"] = list(self.head.supervised_scales)
        d["head"]["upscale"] = {str(k): v for k, v in sorted(self.head.upscale.items())}
        return d

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    def heatmap_size(self, scale: int) -> tuple[int, int]:
        h, w = self.backbone.input_size
        s = self.head.upscale[scale]
        return h // 2**scale * s, w // 2**scale * s


class Backbone(Layer):
    """Stem (two stride-2 3x3 conv blocks) then three stride-2 stages."""

    def __init__(self, cfg: BackboneConfig, rng: SeededRng):
        super().__init__()
        c2, c3, c4, c5 = cfg.stage_channels
        self.cfg = cfg
        self.stem = Sequential(
            conv_bn_relu(cfg.in_channels, cfg.stem_channels, 3, rng, stride=2),
            conv_bn_relu(cfg.stem_channels, c2, 3, rng, stride=2),
        )
        self.stages = [conv_bn_relu(a, b, 3, rng, stride=2) for a, b in ((c2, c3), (c3, c4), (c4, c5))]

    def _children(self):
        return [("stem.", self.stem)] + [(f"stage{i + 3}.", s) for i, s in enumerate(self.stages)]

    def forward(self, x):
        x = as_tensor4(x, "image")
        h, w = x.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w} not divisible by 32")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        feats = [self.stem.forward(x)]
        for stage in self.stages:
            feats.append(stage.forward(feats[-1]))
        return tuple(feats)

    def backward(self, grads):
        """``grads`` holds dL/dF2..dL/dF5 (``None`` for unused levels)."""
        g = grads[3]
        for k in (2, 1, 0):
            up = self.stages[k].backward(g) if g is not None else None
            g = _add(grads[k], up)
        return self.stem.backward(g) if g is not None else None

    def parameters(self, prefix=""):
        for name, child in self._children():
            yield from child.parameters(prefix + name)

    def buffers(self, prefix=""):
        for name, child in self._children():
            yield from child.buffers(prefix + name)

    def train(self, mode=True):
        for _, child in self._children():
            child.train(mode)
        return self


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


class Fuse(Layer):
    """M_i = fuse(F_i, M_{i+1}).

    conv block on F_i, 2x bilinear upsample of M_{i+1}, concat, pointwise
    block, two [depthwise 3x3, BN, pointwise, GELU] modules, final pointwise.
    """

    def __init__(self, f_channels: int, m_channels: int, width: int, rng: SeededRng):
        super().__init__()
        self.lateral = conv_bn_relu(f_channels, width, 3, rng)
        self.up = Upsample2x()
        self.body = Sequential(
            conv_bn_relu(width + m_channels, width, 1, rng),
            Conv2d(width, width, 3, rng, padding=1, groups=width),
            BatchNorm2d(width),
            Conv2d(width, width, 1, rng),
            GELU(),
            Conv2d(width, width, 3, rng, padding=1, groups=width),
            BatchNorm2d(width),
            Conv2d(width, width, 1, rng),
            GELU(),
            Conv2d(width, width, 1, rng),
        )
        self.width = width

    def forward(self, f, m_next):
        if (m_next.shape[2] * 2, m_next.shape[3] * 2) != f.shape[2:]:
            raise ShapeError(f"fuse: M_next {m_next.shape} is not half the size of F {f.shape}")
        self._tape = True
        return self.body.forward(concat_channels(self.lateral.forward(f), self.up.forward(m_next)))

    def backward(self, grad_out):
        self._take_tape()
        g = self.body.backward(grad_out)
        return self.lateral.backward(g[:, : self.width]), self.up.backward(g[:, self.width :])

    def parameters(self, prefix=""):
        yield from self.lateral.parameters(prefix + "lateral.")
        yield from self.body.parameters(prefix + "body.")

    def buffers(self, prefix=""):
        yield from self.lateral.buffers(prefix + "lateral.")
        yield from self.body.buffers(prefix + "body.")

    def train(self, mode=True):
        self.lateral.train(mode)
        self.body.train(mode)
        return self


class KeypointHead(Sequential):
    """Encoder (1x1 conv to N channels + ReLU), per-keypoint LKC, pixel shuffle.

    The per-keypoint large-kernel convs are one grouped conv with
    groups = N, so keypoint j's s*s maps depend only on encoder channel j.
    """

    def __init__(self, in_c: int, num_keypoints: int, s: int, kernel: int, rng: SeededRng):
        super().__init__(
            Conv2d(in_c, num_keypoints, 1, rng),
            ReLU(),
            Conv2d(num_keypoints, num_keypoints * s * s, kernel, rng, padding=kernel // 2, groups=num_keypoints),
            PixelShuffle(s),
        )
        # near-zero initial heatmaps; a large start drives the encoder ReLU dead
        lkc = self.layers[2].p
        lkc.weight[...] = randn_init(lkc.weight.shape, rng.spawn(1), 1e-3)


class SRPoseModel(Layer):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or ModelConfig()
        rng = SeededRng(seed)
        bb = config.backbone
        self.backbone = Backbone(bb, rng.spawn(0))
        lowest = min(config.head.supervised_scales)
        width = config.neck_width
        m_channels = {5: bb.stage_channels[3]}
        self.fuses: dict[int, Fuse] = {}
        for i in (4, 3, 2):
            if i < lowest:
                break
            self.fuses[i] = Fuse(bb.stage_channels[i - 2], m_channels[i + 1], width, rng.spawn(10 + i))
            m_channels[i] = width
        self.heads = {
            i: KeypointHead(
                m_channels[i], config.head.num_keypoints, config.head.upscale[i], config.head.lkc_kernel, rng.spawn(20 + i)
            )
            for i in config.head.supervised_scales
        }

    # -- structure -------------------------------------------------------
    def _children(self):
        yield "backbone.", self.backbone
        for i, f in sorted(self.fuses.items(), reverse=True):
            yield f"neck.fuse{i}.", f
        for i, h in sorted(self.heads.items()):
            yield f"head{i}.", h

    def parameters(self, prefix=""):
        for name, child in self._children():
            yield from child.parameters(prefix + name)

    def buffers(self, prefix=""):
        for name, child in self._children():
            yield from child.buffers(prefix + name)

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for _, _, g in self.parameters():
            g[...] = 0.0

    def param_dict(self) -> dict[str, np.ndarray]:
        return {path: v for path, v, _ in self.parameters()}

    def grad_dict(self) -> dict[str, np.ndarray]:
        return {path: g for path, _, g in self.parameters()}

    def num_parameters(self) -> int:
        return sum(v.size for _, v, _ in self.parameters())

    def heatmap_stride(self, scale: int) -> tuple[float, float]:
        """Input pixels per heatmap pixel under the (size - 1) convention."""
        H, W = self.config.backbone.input_size
        h, w = self.config.heatmap_size(scale)
        return (W - 1) / (w - 1), (H - 1) / (h - 1)

    # -- passes ----------------------------------------------------------
    def forward(self, image):
        feats = self.backbone.forward(image)
        ms = {5: feats[3]}
        for i in sorted(self.fuses, reverse=True):
            ms[i] = self.fuses[i].forward(feats[i - 2], ms[i + 1])
        self._tape = True
        return {i: head.forward(ms[i]) for i, head in self.heads.items()}

    def backward(self, grads: dict):
        """Accumulate parameter gradients given dL/dheatmap per scale."""
        self._take_tape()
        if set(grads) != set(self.heads):
            raise ShapeError(f"gradients given for scales {sorted(grads)}, model has {sorted(self.heads)}")
        gm = {i: self.heads[i].backward(grads[i]) for i in self.heads}
        gf = [None, None, None, None]
        for i in sorted(self.fuses):
            g_f, g_next = self.fuses[i].backward(gm.pop(i))
            gf[i - 2] = g_f
            gm[i + 1] = _add(gm.get(i + 1), g_next)
        gf[3] = _add(gf[3], gm.get(5))
        return self.backbone.backward(gf)

    # -- serialization ---------------------------------------------------
    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(p, v) for p, v, _ in self.parameters()] + list(self.buffers())

    def save_params(self, path) -> None:
        chunks = [PARAM_MAGIC, self.config.digest()]
        state = self.state()
        chunks.append(struct.pack("<I", len(state)))
        for name, arr in state:
            key = name.encode()
            chunks.append(struct.pack("<I", len(key)) + key)
            chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    def load_params(self, path) -> None:
        """Load a parameter file; validates everything before assigning."""
        records, digest = read_param_file(path)
        current = dict(self.state())
        for name, arr in current.items():
            if name not in records:
                raise ParamFileError(f"{path}: missing parameter {name}")
            if records[name].shape != arr.shape:
                raise ParamFileError(
                    f"{path}: shape mismatch for {name}: file {records[name].shape}, model {arr.shape}"
                )
        extra = set(records) - set(current)
        if extra:
            raise ParamFileError(f"{path}: unexpected parameter {sorted(extra)[0]}")
        if digest != self.config.digest():
            raise ParamFileError(f"{path}: model config digest differs from the file's")
        for name, arr in current.items():
            arr[...] = records[name]
        for layer in iter_layers(self):
            if isinstance(layer, BatchNorm2d):
                layer.p.trained = True


class ParamFileError(ValueError):
    pass


def read_param_file(path) -> tuple[dict[str, np.ndarray], bytes]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise ParamFileError(f"{path}: truncated parameter file")
        out = raw[pos : pos + n]
        pos += n
        return out

    if take(len(PARAM_MAGIC)) != PARAM_MAGIC:
        raise ParamFileError(f"{path}: not an SRKPv1 parameter file")
    digest = take(32)
    (count,) = struct.unpack("<I", take(4))
    records = {}
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4))
        name = take(klen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        records[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(DTYPE).reshape(shape)
    if pos != len(raw):
        raise ParamFileError(f"{path}: {len(raw) - pos} trailing bytes")
    return records, digest
