"""Dense NCHW float64 tensors, seeded RNG and structural ops.

A "Tensor4" is a plain ``numpy.ndarray`` with ``ndim == 4`` laid out as
(batch, channels, rows, cols), row-major. Operations never mutate their
inputs; every writer allocates a fresh array.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DTYPE = np.float64
DUMP_MAGIC = b"T4v1"


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def as_tensor4(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected 4-D (n, c, h, w), got shape {arr.shape}")
    return arr


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name}: contains NaN or Inf")
    return x


class SeededRng:
    """Deterministic random source.

    Wraps numpy's PCG64 bit generator (O'Neill's permuted congruential
    generator, 128-bit state). The same seed yields the same stream on every
    platform numpy supports.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.generator.standard_normal(size) * scale

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def spawn(self, key: int) -> "SeededRng":
        """Derive an independent child stream keyed by ``key``."""
        return SeededRng((self.seed * 0x9E3779B97F4A7C15 + int(key) + 1) & 0xFFFFFFFFFFFFFFFF)


def randn_init(shape, rng: SeededRng, scale: float) -> np.ndarray:
    """Draw i.i.d. N(0, scale**2) values of the given shape."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return rng.normal(tuple(shape), scale).astype(DTYPE, copy=False)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor4(a, "a")
    b = as_tensor4(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: n/h/w mismatch {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(t: np.ndarray, c_first: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`concat_channels` (used to route gradients)."""
    return t[:, :c_first], t[:, c_first:]


def flip_horizontal(t: np.ndarray) -> np.ndarray:
    t = as_tensor4(t)
    return t[..., ::-1].copy()


def dump_tensor(t: np.ndarray, path) -> None:
    """Write ``T4v1`` + four uint32 LE dims + float64 LE payload."""
    t = as_tensor4(t)
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<4I", *t.shape))
        fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DUMP_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    dims = struct.unpack("<4I", raw[4:20])
    count = int(np.prod(dims))
    payload = raw[20:]
    if len(payload) != count * 8:
        raise ValueError(f"{path}: expected {count * 8} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(dims)
