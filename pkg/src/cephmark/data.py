"""On-disk dataset format and the synthetic landmark-image generator.

Images are 8-bit binary PGM (P5). A dataset is one JSON annotation file:

    {"schema_version": 1, "num_landmarks": N, "samples": [
        {"image": "img_0000.pgm", "split": "train", "width": 128, "height": 128,
         "pixel_spacing_mm": 0.1, "landmarks": [[x, y], ...], "visible": [true, ...]},
        ...]}

Image paths are relative to the annotation file's directory.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import LandmarkSet
from .tensor import SeededRng

SCHEMA_VERSION = 1


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------------------
# PGM


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pos += 1
    data = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise DatasetError(f"{path}: truncated pixel data")
    return data.reshape(h, w)


# --------------------------------------------------------------------------
# annotation records


@dataclass
class SampleRecord:
    image: str
    width: int
    height: int
    pixel_spacing_mm: float
    landmarks: list
    visible: list
    split: str = "train"

    def __post_init__(self):
        if not self.pixel_spacing_mm or self.pixel_spacing_mm <= 0:
            raise DatasetError(f"{self.image}: pixel_spacing_mm must be positive")
        if len(self.landmarks) != len(self.visible):
            raise DatasetError(f"{self.image}: landmarks/visible length mismatch")

    def to_json(self) -> dict:
        return {
            "image": self.image,
            "split": self.split,
            "width": self.width,
            "height": self.height,
            "pixel_spacing_mm": self.pixel_spacing_mm,
            "landmarks": [[float(x), float(y)] for x, y in self.landmarks],
            "visible": [bool(v) for v in self.visible],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SampleRecord":
        missing = {"image", "width", "height", "pixel_spacing_mm", "landmarks"} - set(d)
        if missing:
            raise DatasetError(f"sample record missing keys {sorted(missing)}")
        lms = d["landmarks"]
        return cls(
            image=d["image"],
            width=int(d["width"]),
            height=int(d["height"]),
            pixel_spacing_mm=float(d["pixel_spacing_mm"]),
            landmarks=[[float(x), float(y)] for x, y in lms],
            visible=[bool(v) for v in d.get("visible", [True] * len(lms))],
            split=d.get("split", "train"),
        )


def dump_annotations(records: list[SampleRecord], num_landmarks: int) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "num_landmarks": num_landmarks,
        "samples": [r.to_json() for r in records],
    }
    return json.dumps(doc, indent=2) + "\n"


def parse_annotations(text: str, source="<string>") -> tuple[list[SampleRecord], int]:
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"{source}: unsupported schema_version {doc.get('schema_version')!r}")
    n = int(doc["num_landmarks"])
    records = [SampleRecord.from_json(s) for s in doc["samples"]]
    for r in records:
        if len(r.landmarks) != n:
            raise DatasetError(f"{source}: {r.image} has {len(r.landmarks)} landmarks, expected {n}")
    return records, n


@dataclass
class Sample:
    image: np.ndarray  # (h, w) float64 in [0, 1]
    landmarks: LandmarkSet
    pixel_spacing_mm: float
    name: str = ""

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape


@dataclass
class Dataset:
    samples: list = field(default_factory=list)
    num_landmarks: int = 0

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @classmethod
    def load(cls, annotation_path, split: str | None = None) -> "Dataset":
        path = Path(annotation_path)
        if not path.exists():
            raise FileNotFoundError(f"annotation file not found: {path}")
        records, n = parse_annotations(path.read_text(), path)
        samples = []
        for r in records:
            if split is not None and r.split != split:
                continue
            img_path = path.parent / r.image
            if not img_path.exists():
                raise FileNotFoundError(f"image not found: {img_path}")
            img = read_pgm(img_path)
            if img.shape != (r.height, r.width):
                raise DatasetError(f"{img_path}: size {img.shape[::-1]} disagrees with annotation")
            lm = LandmarkSet(np.array(r.landmarks, dtype=float).reshape(-1, 2), r.visible)
            samples.append(Sample(img / 255.0, lm, r.pixel_spacing_mm, r.image))
        return cls(samples, n)


# --------------------------------------------------------------------------
# synthetic generator

PATTERN_RADIUS = 8.0


def _pattern_mask(kind: int, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Indicator of pattern ``kind`` at offsets (dx, dy) from its center.

    Every pattern is symmetric under 180-degree rotation, so its intensity
    centroid is its center.
    """
    r = np.hypot(dx, dy)
    ax, ay = np.abs(dx), np.abs(dy)
    shape = kind % 8
    grow = 1.0 + 0.15 * (kind // 8)
    r, ax, ay = r / grow, ax / grow, ay / grow
    if shape == 0:  # filled disk
        return r <= 4.5
    if shape == 1:  # ring
        return (r >= 4.0) & (r <= 6.5)
    if shape == 2:  # plus
        return ((ax <= 1.25) & (ay <= 6.5)) | ((ay <= 1.25) & (ax <= 6.5))
    if shape == 3:  # square outline
        m = np.maximum(ax, ay)
        return (m >= 4.0) & (m <= 6.0)
    if shape == 4:  # bullseye: dot inside a ring
        return (r <= 2.0) | ((r >= 4.5) & (r <= 6.5))
    if shape == 5:  # diagonal cross
        u, v = np.abs(dx + dy) / (math.sqrt(2) * grow), np.abs(dx - dy) / (math.sqrt(2) * grow)
        return ((u <= 1.25) & (v <= 6.5)) | ((v <= 1.25) & (u <= 6.5))
    if shape == 6:  # horizontal bar pair
        return (ax <= 6.0) & (ay >= 2.0) & (ay <= 4.0)
    return (ax <= 5.0) & (ay <= 5.0) & ~((ax <= 2.5) & (ay <= 2.5))  # thick square frame


def render_pattern(img: np.ndarray, kind: int, cx: float, cy: float, intensity: float, supersample: int = 16):
    """Add an anti-aliased pattern (area coverage via supersampling) in place."""
    h, w = img.shape
    rad = int(math.ceil(PATTERN_RADIUS * (1.0 + 0.15 * (kind // 8)))) + 1
    x0, x1 = max(int(cx) - rad, 0), min(int(cx) + rad + 1, w)
    y0, y1 = max(int(cy) - rad, 0), min(int(cy) + rad + 1, h)
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    xs = (np.arange(x0, x1)[:, None] + sub[None, :]).ravel()
    ys = (np.arange(y0, y1)[:, None] + sub[None, :]).ravel()
    mask = _pattern_mask(kind, xs[None, :] - cx, ys[:, None] - cy).astype(float)
    cover = mask.reshape(y1 - y0, supersample, x1 - x0, supersample).mean(axis=(1, 3))
    img[y0:y1, x0:x1] += intensity * cover


def generate_image(size: int, n_landmarks: int, rng: SeededRng, margin: float = 16.0, max_tries: int = 200):
    """Return (uint8 image, centers (N, 2)).

    Centers are uniform in [margin, size - 1 - margin] with a minimum
    separation so patterns never touch.
    """
    lo, hi = margin, size - 1 - margin
    min_sep = 2.5 * PATTERN_RADIUS * (1.0 + 0.15 * ((n_landmarks - 1) // 8))  # patterns grow past kind 8
    centers = []
    for _ in range(max_tries):
        centers = []
        for _ in range(n_landmarks):
            for _ in range(max_tries):
                c = rng.uniform(lo, hi, size=2)
                if all(np.hypot(*(c - o)) >= min_sep for o in centers):
                    centers.append(c)
                    break
            else:
                break
        if len(centers) == n_landmarks:
            break
    else:
        raise DatasetError(
            f"could not place {n_landmarks} non-overlapping patterns in a {size}px image with margin {margin}"
        )
    centers = np.array(centers)

    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    img = 0.25 + gx * (xx - 0.5) + gy * (yy - 0.5)
    for k, (cx, cy) in enumerate(centers):
        render_pattern(img, k, cx, cy, 0.55)
    img = img + rng.normal(img.shape, 0.02)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8), centers


def generate_dataset(
    out_dir,
    n_images: int,
    n_landmarks: int,
    size: int = 128,
    seed: int = 0,
    n_val: int = 0,
    pixel_spacing_mm: float = 0.1,
    margin: float = 16.0,
) -> Path:
    """Write ``n_images`` PGMs (the last ``n_val`` tagged split "val") and annotations.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(seed)
    records = []
    for i in range(n_images):
        img, centers = generate_image(size, n_landmarks, rng.spawn(i), margin)
        name = f"img_{i:04d}.pgm"
        write_pgm(out / name, img)
        records.append(
            SampleRecord(
                image=name,
                width=size,
                height=size,
                pixel_spacing_mm=pixel_spacing_mm,
                landmarks=centers.tolist(),
                visible=[True] * n_landmarks,
                split="val" if i >= n_images - n_val else "train",
            )
        )
    ann = out / "annotations.json"
    ann.write_text(dump_annotations(records, n_landmarks))
    return ann
