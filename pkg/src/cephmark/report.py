"""CSV tables and SVG figures: decoder benchmark, quantization-bias report,
and the per-image prediction overlay."""
from __future__ import annotations

import csv
import math

import numpy as np

from .codec import DECODERS, QUANT_BIAS_UNIT, GaussianSpec, LandmarkSet, decode, encode_gaussian, quantization_bias
from .tensor import SeededRng

BENCH_COLUMNS = ("decoder", "stride", "sigma", "mean_err_px", "max_err_px", "n_samples")
BIAS_COLUMNS = ("stride", "n_samples", "mean_err_px", "closed_form_px", "rel_diff")


def decode_bench(strides, sigmas, n_samples: int, seed: int = 0, decoders=DECODERS) -> list[dict]:
    """Decode clean rendered Gaussians at random interior sub-pixel centers.

    One row per (decoder, stride, sigma); errors are radial, in input pixels.
    The same centers are shared by every decoder within a (stride, sigma) cell.
    """
    rows = []
    for stride in strides:
        for sigma in sigmas:
            spec = GaussianSpec(sigma=float(sigma))
            margin = spec.truncate * sigma / stride + 2
            size = int(math.ceil(2 * margin)) + 16
            rng = SeededRng(seed).spawn(int(stride * 1000 + sigma * 10))
            mu = rng.uniform(margin, size - 1 - margin, size=(n_samples, 2)) * stride
            hm = encode_gaussian(LandmarkSet(mu), spec, size, size, float(stride))
            for name in decoders:
                err = np.hypot(*(decode(hm, name, spec).points - mu).T)
                rows.append(
                    dict(decoder=name, stride=stride, sigma=sigma, mean_err_px=float(err.mean()),
                         max_err_px=float(err.max()), n_samples=n_samples)
                )
    return rows


def bias_report(strides, n_samples: int, seed: int = 0) -> list[dict]:
    rows = []
    for stride in strides:
        mean = quantization_bias(float(stride), n_samples, SeededRng(seed).spawn(int(stride * 1000)))
        closed = QUANT_BIAS_UNIT * stride
        rows.append(dict(stride=stride, n_samples=n_samples, mean_err_px=mean, closed_form_px=closed,
                         rel_diff=(mean - closed) / closed))
    return rows


def write_rows(path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# --------------------------------------------------------------------------
# figures (matplotlib, SVG only)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cephmark"  # stable ids -> byte-identical files
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    _pyplot().close(fig)


def bench_svg(rows: list[dict], path) -> None:
    plt = _pyplot()
    cells = sorted({(r["stride"], r["sigma"]) for r in rows})
    decoders = [d for d in DECODERS if any(r["decoder"] == d for r in rows)]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(cells)), 3.2))
    width = 0.8 / len(decoders)
    x = np.arange(len(cells))
    for i, d in enumerate(decoders):
        vals = [next(r["mean_err_px"] for r in rows if r["decoder"] == d and (r["stride"], r["sigma"]) == c) for c in cells]
        ax.bar(x + (i - (len(decoders) - 1) / 2) * width, vals, width, label=d)
    ax.set_xticks(x, [f"s={s:g}\nσ={g:g}" for s, g in cells])
    ax.set_ylabel("mean radial error (px)")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def bias_svg(rows: list[dict], path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3.2))
    s = np.array([r["stride"] for r in rows], dtype=float)
    ax.bar(np.arange(len(s)), [r["mean_err_px"] for r in rows], 0.6, label="measured")
    ax.plot(np.arange(len(s)), QUANT_BIAS_UNIT * s, "k_", markersize=30, label="closed form")
    ax.set_xticks(np.arange(len(s)), [f"{v:g}" for v in s])
    ax.set_xlabel("heatmap stride (px)")
    ax.set_ylabel("mean nearest-grid error (px)")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def overlay_svg(image: np.ndarray, pred: LandmarkSet, path, gt: LandmarkSet | None = None) -> None:
    """Image with predicted points; ground truth (if given) joined to each prediction by a yellow segment."""
    plt = _pyplot()
    h, w = image.shape
    fig, ax = plt.subplots(figsize=(5, 5 * h / w))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1, extent=(-0.5, w - 0.5, h - 0.5, -0.5), interpolation="nearest")
    if gt is not None:
        for p, q, v in zip(pred.points, gt.points, gt.visible):
            if v:
                ax.plot([p[0], q[0]], [p[1], q[1]], color="yellow", lw=1.2)
        ax.scatter(*gt.points[gt.visible].T, s=14, c="lime", label="ground truth")
    ax.scatter(*pred.points.T, s=14, c="red", marker="x", label="prediction")
    for j, (x, y) in enumerate(pred.points):
        ax.annotate(str(j), (x, y), xytext=(3, 3), textcoords="offset points", color="red", fontsize=7)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.axis("off")
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    _save(fig, path)
