"""Coordinate <-> heatmap conversion under the unbiased pixel convention.

Pixel centers sit at integer coordinates with the origin at the top-left
pixel center. Resizing maps the first and last pixel centers onto each
other, so a heatmap of width w covering an input of width W has stride
(W - 1) / (w - 1) and heatmap column c corresponds to input x = c * stride.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import DTYPE, SeededRng, ShapeError, as_tensor4

log = logging.getLogger(__name__)

# E|(U, V)| for U, V ~ Unif(-1/2, 1/2): mean distance to the nearest grid point
QUANT_BIAS_UNIT = (math.sqrt(2.0) + math.asinh(1.0)) / 6.0

DECODERS = ("argmax", "shifted", "dark")


@dataclass
class LandmarkSet:
    """N continuous (x, y) points plus visibility.

    ``flags`` marks points whose decode hit a degenerate case (tie, boundary
    peak, singular Hessian) or that were encoded out of frame.
    """

    points: np.ndarray
    visible: np.ndarray | None = None
    flags: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=DTYPE).reshape(-1, 2)
        n = len(self.points)
        self.visible = np.ones(n, bool) if self.visible is None else np.asarray(self.visible, bool).copy()
        self.flags = np.zeros(n, bool) if self.flags is None else np.asarray(self.flags, bool).copy()
        if self.visible.shape != (n,) or self.flags.shape != (n,):
            raise ShapeError("visible/flags must have one entry per point")

    def __len__(self):
        return len(self.points)

    def in_frame(self, width: int, height: int) -> np.ndarray:
        x, y = self.points[:, 0], self.points[:, 1]
        return (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)


@dataclass
class GaussianSpec:
    sigma: float = 6.0  # in input-frame pixels
    amplitude: float = 1.0
    truncate: float = 3.0  # in units of sigma

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass
class HeatmapStack:
    maps: np.ndarray  # (1, N, h, w)
    stride: tuple = (1.0, 1.0)  # (x, y) input pixels per heatmap pixel
    flags: np.ndarray | None = None

    def __post_init__(self):
        self.maps = as_tensor4(self.maps, "heatmaps")
        if np.isscalar(self.stride):
            self.stride = (float(self.stride), float(self.stride))
        self.stride = tuple(float(s) for s in self.stride)
        if self.flags is None:
            self.flags = np.zeros(self.maps.shape[1], bool)

    @property
    def num_keypoints(self) -> int:
        return self.maps.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        return self.maps.shape[2], self.maps.shape[3]

    @classmethod
    def for_input(cls, maps, input_hw) -> "HeatmapStack":
        """Wrap maps whose grid spans an input of size ``input_hw`` end to end."""
        maps = as_tensor4(maps)
        h, w = maps.shape[2:]
        H, W = input_hw
        return cls(maps, unbiased_stride((H, W), (h, w)))


def unbiased_stride(input_hw, heatmap_hw) -> tuple[float, float]:
    (H, W), (h, w) = input_hw, heatmap_hw
    sx = (W - 1) / (w - 1) if w > 1 else 1.0
    sy = (H - 1) / (h - 1) if h > 1 else 1.0
    return sx, sy


# --------------------------------------------------------------------------
# affine coordinate maps


@dataclass
class AffineMap:
    """2x3 matrix taking (x, y, 1) to (x', y')."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=DTYPE).reshape(2, 3)
        if abs(np.linalg.det(self.matrix[:, :2])) < 1e-12:
            raise ValueError("affine map has a non-invertible linear part")

    @classmethod
    def identity(cls):
        return cls(np.array([[1.0, 0, 0], [0, 1.0, 0]]))

    def _full(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def apply_xy(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=DTYPE)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def compose(self, first: "AffineMap") -> "AffineMap":
        """Map that applies ``first`` and then ``self``."""
        return AffineMap((self._full() @ first._full())[:2])

    def inverse(self) -> "AffineMap":
        return AffineMap(np.linalg.inv(self._full())[:2])


def affine_apply(amap: AffineMap, pts: LandmarkSet) -> LandmarkSet:
    return LandmarkSet(amap.apply_xy(pts.points), pts.visible, pts.flags)


def make_resize_map(src_w: int, src_h: int, dst_w: int, dst_h: int) -> AffineMap:
    sx = (dst_w - 1) / (src_w - 1)
    sy = (dst_h - 1) / (src_h - 1)
    return AffineMap(np.array([[sx, 0.0, 0.0], [0.0, sy, 0.0]]))


def make_flip_map(w: int) -> AffineMap:
    return AffineMap(np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0]]))


def make_jitter_map(w: int, h: int, scale: float, rotation_deg: float, tx: float, ty: float) -> AffineMap:
    """Scale and rotate about the image center, then translate by (tx, ty)."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    a = math.radians(rotation_deg)
    ca, sa = scale * math.cos(a), scale * math.sin(a)
    return AffineMap(
        np.array([[ca, -sa, cx - ca * cx + sa * cy + tx], [sa, ca, cy - sa * cx - ca * cy + ty]])
    )


def warp_image(img: np.ndarray, amap: AffineMap, out_h: int, out_w: int, order: int = 1) -> np.ndarray:
    """Resample a (h, w) or (c, h, w) image so that dst = amap(src)."""
    inv = amap.inverse().matrix
    # scipy works in (row, col) = (y, x)
    mat = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
    offset = np.array([inv[1, 2], inv[0, 2]])
    img = np.asarray(img, dtype=DTYPE)
    if img.ndim == 2:
        return ndimage.affine_transform(img, mat, offset, (out_h, out_w), order=order, mode="constant")
    return np.stack([warp_image(ch, amap, out_h, out_w, order) for ch in img])


# --------------------------------------------------------------------------
# encoding


def encode_gaussian(
    landmarks: LandmarkSet,
    spec: GaussianSpec,
    h: int,
    w: int,
    stride=1.0,
    quantize: bool = False,
) -> HeatmapStack:
    """Render one Gaussian per landmark on an (h, w) heatmap grid.

    Landmarks are input-frame coordinates; the center is mapped to the
    heatmap frame by dividing by the stride and is left unrounded unless
    ``quantize`` is set (the classic biased encoding).
    """
    sx, sy = (stride, stride) if np.isscalar(stride) else stride
    mu = landmarks.points / np.array([sx, sy])
    if quantize:
        mu = np.round(mu)
    sig_x, sig_y = spec.sigma / sx, spec.sigma / sy
    xs = np.arange(w, dtype=DTYPE)
    ys = np.arange(h, dtype=DTYPE)
    dx2 = ((xs[None, :] - mu[:, :1]) / sig_x) ** 2  # (N, w)
    dy2 = ((ys[None, :] - mu[:, 1:]) / sig_y) ** 2  # (N, h)
    r2 = dy2[:, :, None] + dx2[:, None, :]
    maps = spec.amplitude * np.exp(-0.5 * r2)
    maps[r2 > spec.truncate**2] = 0.0

    tol = 1e-9
    in_frame = (mu[:, 0] >= -tol) & (mu[:, 0] <= w - 1 + tol) & (mu[:, 1] >= -tol) & (mu[:, 1] <= h - 1 + tol)
    out_of_frame = landmarks.visible & ~in_frame
    if out_of_frame.any():
        log.warning("landmarks %s fall outside the heatmap frame; zero targets", np.flatnonzero(out_of_frame))
    maps[~(landmarks.visible & in_frame)] = 0.0
    return HeatmapStack(maps[None], (sx, sy), out_of_frame)


# --------------------------------------------------------------------------
# decoding


def _peaks(maps: np.ndarray):
    """Grid argmax per map with row-major tie-breaking (smallest y, then x)."""
    k, h, w = maps.shape
    flat = maps.reshape(k, -1)
    idx = flat.argmax(axis=1)
    vmax = flat[np.arange(k), idx]
    vmin = flat.min(axis=1)
    iy, ix = np.divmod(idx, w)
    return ix, iy, vmax, vmax == vmin


def _stack_maps(hm: HeatmapStack) -> np.ndarray:
    if hm.maps.shape[0] != 1:
        raise ShapeError("decoders take a single-image HeatmapStack (batch 1)")
    return hm.maps[0]


def _to_input(hm: HeatmapStack, x, y) -> np.ndarray:
    return np.stack([np.asarray(x, DTYPE) * hm.stride[0], np.asarray(y, DTYPE) * hm.stride[1]], axis=-1)


def decode_argmax(hm: HeatmapStack) -> LandmarkSet:
    maps = _stack_maps(hm)
    ix, iy, vmax, uniform = _peaks(maps)
    visible = ~(uniform & (vmax == 0))
    return LandmarkSet(_to_input(hm, ix, iy), visible, uniform)


def _quarter_shift(maps, ix, iy):
    k, h, w = maps.shape
    r = np.arange(k)
    dx = np.zeros(k)
    dy = np.zeros(k)
    inner_x = (ix > 0) & (ix < w - 1)
    inner_y = (iy > 0) & (iy < h - 1)
    right = maps[r, iy, np.minimum(ix + 1, w - 1)]
    left = maps[r, iy, np.maximum(ix - 1, 0)]
    down = maps[r, np.minimum(iy + 1, h - 1), ix]
    up = maps[r, np.maximum(iy - 1, 0), ix]
    dx[inner_x] = 0.25 * np.sign(right - left)[inner_x]
    dy[inner_y] = 0.25 * np.sign(down - up)[inner_y]
    return dx, dy


def decode_shifted(hm: HeatmapStack) -> LandmarkSet:
    """Argmax moved a quarter pixel toward the larger neighbor on each axis."""
    maps = _stack_maps(hm)
    ix, iy, vmax, uniform = _peaks(maps)
    dx, dy = _quarter_shift(maps, ix, iy)
    visible = ~(uniform & (vmax == 0))
    return LandmarkSet(_to_input(hm, ix + dx, iy + dy), visible, uniform)


def modulate(maps: np.ndarray, sigma_xy) -> np.ndarray:
    """Gaussian-smooth each map, then rescale so its peak matches the original."""
    out = np.empty_like(maps)
    for j, m in enumerate(maps):
        peak = m.max()
        sm = ndimage.gaussian_filter(m, sigma=(sigma_xy[1], sigma_xy[0]), mode="constant", truncate=3.0)
        top = sm.max()
        out[j] = sm * (peak / top) if top > 0 else sm
    return out


def decode_dark(hm: HeatmapStack, spec: GaussianSpec | None = None, modulation: bool = False) -> LandmarkSet:
    """Distribution-aware sub-pixel decode.

    Second-order Taylor expansion of the log-heatmap at the grid argmax:
    offset = -H^-1 g, with g and H from central differences and each offset
    component clamped to [-1, 1]. Peaks on the border ring, stencils touching
    non-positive values (log undefined, e.g. a truncated Gaussian narrower than
    the grid) and Hessians that are singular or not negative definite fall back
    to the quarter-offset decode and are flagged.
    """
    spec = spec or GaussianSpec()
    maps = _stack_maps(hm)
    k, h, w = maps.shape
    ix, iy, vmax, uniform = _peaks(maps)
    work = modulate(maps, (spec.sigma / hm.stride[0], spec.sigma / hm.stride[1])) if modulation else maps
    logm = np.log(np.maximum(work, 1e-10))

    dx, dy = _quarter_shift(maps, ix, iy)
    flags = uniform.copy()
    for j in range(k):
        x, y = ix[j], iy[j]
        if x < 1 or x > w - 2 or y < 1 or y > h - 2:
            flags[j] = True
            continue
        if work[j, y - 1 : y + 2, x - 1 : x + 2].min() <= 0:
            flags[j] = True
            continue
        L = logm[j]
        gx = 0.5 * (L[y, x + 1] - L[y, x - 1])
        gy = 0.5 * (L[y + 1, x] - L[y - 1, x])
        hxx = L[y, x + 1] - 2 * L[y, x] + L[y, x - 1]
        hyy = L[y + 1, x] - 2 * L[y, x] + L[y - 1, x]
        hxy = 0.25 * (L[y + 1, x + 1] - L[y + 1, x - 1] - L[y - 1, x + 1] + L[y - 1, x - 1])
        det = hxx * hyy - hxy * hxy
        if not np.isfinite(det) or abs(det) < 1e-12 or hxx >= 0 or det < 0:
            flags[j] = True
            continue
        ox = -(hyy * gx - hxy * gy) / det
        oy = -(hxx * gy - hxy * gx) / det
        dx[j] = np.clip(ox, -1.0, 1.0)
        dy[j] = np.clip(oy, -1.0, 1.0)
    visible = ~(uniform & (vmax == 0))
    return LandmarkSet(_to_input(hm, ix + dx, iy + dy), visible, flags)


def decode(hm: HeatmapStack, method: str = "dark", spec: GaussianSpec | None = None, modulation: bool = False):
    if method == "argmax":
        return decode_argmax(hm)
    if method == "shifted":
        return decode_shifted(hm)
    if method == "dark":
        return decode_dark(hm, spec, modulation)
    raise ValueError(f"unknown decoder {method!r}; choose from {DECODERS}")


# --------------------------------------------------------------------------
# flip test


def _check_permutation(swap, n):
    swap = np.arange(n) if swap is None else np.asarray(swap, dtype=int)
    if swap.shape != (n,) or sorted(swap.tolist()) != list(range(n)):
        raise ValueError(f"keypoint swap {swap.tolist()} is not a permutation of 0..{n - 1}")
    return swap


def flip_average(hm_direct, hm_from_flipped, swap=None):
    """Unflip the mirrored-input prediction, permute keypoints, average.

    Accepts raw (n, N, h, w) arrays or HeatmapStacks; returns the same kind
    as ``hm_direct``.
    """
    a = hm_direct.maps if isinstance(hm_direct, HeatmapStack) else as_tensor4(hm_direct)
    b = hm_from_flipped.maps if isinstance(hm_from_flipped, HeatmapStack) else as_tensor4(hm_from_flipped)
    if a.shape != b.shape:
        raise ShapeError(f"flip_average shape mismatch {a.shape} vs {b.shape}")
    swap = _check_permutation(swap, a.shape[1])
    out = (a + b[:, swap, :, ::-1]) / 2.0
    if isinstance(hm_direct, HeatmapStack):
        return HeatmapStack(out, hm_direct.stride)
    return out


# --------------------------------------------------------------------------
# quantization bias


def quantization_bias(stride: float, n_samples: int, rng: SeededRng, bins: int | None = None):
    """Mean distance from uniform sub-pixel positions to the nearest stride-grid point.

    Returns the mean, or ``(mean, (counts, edges))`` when ``bins`` is given.
    """
    if stride <= 0:
        raise ValueError("stride must be positive")
    pts = rng.uniform(0.0, 64.0 * stride, size=(n_samples, 2))
    nearest = np.round(pts / stride) * stride
    dist = np.hypot(*(pts - nearest).T)
    mean = float(dist.mean())
    if bins is None:
        return mean
    return mean, np.histogram(dist, bins=bins, range=(0.0, stride * math.sqrt(0.5)))
