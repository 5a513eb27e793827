"""Multi-scale heatmap loss, Adam, the training loop and MRE/SDR evaluation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .codec import (
    AffineMap,
    GaussianSpec,
    HeatmapStack,
    LandmarkSet,
    affine_apply,
    decode,
    encode_gaussian,
    flip_average,
    make_flip_map,
    make_jitter_map,
    make_resize_map,
    unbiased_stride,
    warp_image,
)
from .layers import resize_bilinear
from .model import SRPoseModel
from .tensor import NonFiniteError, SeededRng, ShapeError

log = logging.getLogger(__name__)

SDR_THRESHOLDS_MM = (2.0, 2.5, 3.0, 4.0)


# --------------------------------------------------------------------------
# losses


@dataclass
class LossConfig:
    mode: str = "mse"  # "mse" or "l2norm"
    ohkm_topk: int | None = None

    def __post_init__(self):
        if self.mode not in ("mse", "l2norm"):
            raise ValueError(f"loss mode must be 'mse' or 'l2norm', got {self.mode!r}")


def _per_keypoint(diff: np.ndarray, mode: str):
    """Per (sample, keypoint) map loss and its gradient w.r.t. the prediction."""
    n, k, h, w = diff.shape
    if mode == "mse":
        return (diff**2).mean(axis=(2, 3)), 2.0 * diff / (h * w)
    norm = np.sqrt((diff**2).sum(axis=(2, 3)))
    safe = np.where(norm > 0, norm, 1.0)
    grad = np.where(norm[..., None, None] > 0, diff / safe[..., None, None], 0.0)
    return norm, grad


def loss_ohkm(per_keypoint: np.ndarray, topk: int):
    """Mean of the ``topk`` largest per-keypoint losses.

    Works on a 1-D vector or row-wise on (batch, N). Returns the scalar (or
    per-row values) and a 0/1 selection mask; ties keep the lowest index.
    """
    losses = np.atleast_2d(np.asarray(per_keypoint, dtype=float))
    n = losses.shape[1]
    if not 1 <= topk <= n:
        raise ValueError(f"ohkm topk={topk} must lie in 1..{n}")
    order = np.argsort(-losses, axis=1, kind="stable")[:, :topk]
    mask = np.zeros_like(losses)
    np.put_along_axis(mask, order, 1.0, axis=1)
    values = (losses * mask).sum(axis=1) / topk
    if np.ndim(per_keypoint) == 1:
        return float(values[0]), mask[0]
    return values, mask


def loss_multiscale(pred: dict, gt: dict, cfg: LossConfig):
    """Sum over scales and keypoints of the per-map loss, scaled by 1/(2N).

    Batched input is averaged over the batch. Returns (loss, grads) with
    ``grads[scale]`` shaped like ``pred[scale]``.
    """
    if not pred:
        raise ValueError("loss_multiscale: empty scale set")
    if set(pred) != set(gt):
        raise ShapeError(f"prediction scales {sorted(pred)} != target scales {sorted(gt)}")
    per_kp = 0.0
    grads = {}
    for s in sorted(pred):
        if pred[s].shape != gt[s].shape:
            raise ShapeError(f"scale {s}: prediction {pred[s].shape} vs target {gt[s].shape}")
        lk, g = _per_keypoint(pred[s] - gt[s], cfg.mode)
        per_kp = per_kp + 0.5 * lk  # (batch, N)
        grads[s] = 0.5 * g
    batch, n = per_kp.shape
    if cfg.ohkm_topk is not None:
        values, mask = loss_ohkm(per_kp, cfg.ohkm_topk)
        weight = mask / (cfg.ohkm_topk * batch)
    else:
        values = per_kp.mean(axis=1)
        weight = np.full_like(per_kp, 1.0 / (n * batch))
    for s in grads:
        grads[s] = grads[s] * weight[:, :, None, None]
    return float(values.mean()), grads


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """In-place bias-corrected Adam update of every array in ``params``.

    All gradients are checked before any parameter moves.
    """
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {path}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for path, p in params.items():
        g = grads[path]
        if path not in state.m:
            state.m[path] = np.zeros_like(p)
            state.v[path] = np.zeros_like(p)
        m, v = state.m[path], state.v[path]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


# --------------------------------------------------------------------------
# augmentation and batching


@dataclass
class AugmentConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    scale_range: tuple = (0.75, 1.25)
    rotation_deg: float = 15.0
    translate_frac: float = 0.05


def prepare(sample, input_hw, amap_extra: AffineMap | None = None):
    """Warp a sample into the network input frame.

    Returns (image (1, H, W), landmarks in input frame, map original->input).
    Landmarks pushed out of frame become invisible.
    """
    H, W = input_hw
    h, w = sample.image.shape
    amap = make_resize_map(w, h, W, H)
    if amap_extra is not None:
        amap = amap_extra.compose(amap)
    if amap_extra is None and (h, w) == (H, W):
        img = sample.image
    else:
        img = warp_image(sample.image, amap, H, W)
    lm = affine_apply(amap, sample.landmarks)
    lm.visible &= lm.in_frame(W, H)
    return img[None], lm, amap


def random_augment(rng: SeededRng, aug: AugmentConfig, input_hw) -> AffineMap | None:
    if not aug.enabled:
        return None
    H, W = input_hw
    lo, hi = aug.scale_range
    amap = make_jitter_map(
        W,
        H,
        rng.uniform(lo, hi),
        rng.uniform(-aug.rotation_deg, aug.rotation_deg),
        rng.uniform(-aug.translate_frac, aug.translate_frac) * W,
        rng.uniform(-aug.translate_frac, aug.translate_frac) * H,
    )
    if rng.random() < aug.flip_prob:
        amap = make_flip_map(W).compose(amap)
    return amap


def build_targets(model: SRPoseModel, landmarks: list[LandmarkSet], spec: GaussianSpec) -> dict:
    targets = {}
    for s in model.config.head.supervised_scales:
        h, w = model.config.heatmap_size(s)
        stride = model.heatmap_stride(s)
        targets[s] = np.concatenate([encode_gaussian(lm, spec, h, w, stride).maps for lm in landmarks])
    return targets


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mre_mm: float
    sdr: dict  # threshold mm -> percent
    per_landmark_mre_mm: list
    mre_px: float = 0.0
    n_points: int = 0
    meta: dict = field(default_factory=dict)

    def rows(self):
        yield ("metric", "value")
        yield ("mre_mm", f"{self.mre_mm:.6f}")
        yield ("mre_px", f"{self.mre_px:.6f}")
        for t, v in self.sdr.items():
            yield (f"sdr_{t:g}mm", f"{v:.6f}")
        for j, v in enumerate(self.per_landmark_mre_mm):
            yield (f"mre_mm_landmark_{j}", f"{v:.6f}")
        yield ("n_points", str(self.n_points))
        for k, v in self.meta.items():
            yield (f"meta_{k}", str(v))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.rows())


def radial_metrics(errors_mm, thresholds=SDR_THRESHOLDS_MM):
    """MRE and SDR (percent of errors strictly below each threshold)."""
    e = np.asarray(errors_mm, dtype=float)
    if e.size == 0:
        return float("nan"), {float(t): float("nan") for t in thresholds}
    return float(e.mean()), {float(t): 100.0 * float((e < t).mean()) for t in thresholds}


def ensemble_average(heatmap_sets):
    """Elementwise mean of K heatmap predictions (arrays or HeatmapStacks)."""
    sets = list(heatmap_sets)
    if not sets:
        raise ValueError("ensemble_average needs at least one heatmap set")
    if isinstance(sets[0], HeatmapStack):
        return HeatmapStack(np.mean([h.maps for h in sets], axis=0), sets[0].stride)
    return np.mean(sets, axis=0)


def predict_heatmaps(models, images: np.ndarray, scale: int, flip_test: bool) -> np.ndarray:
    """Heatmaps at ``scale`` averaged over models (and over the flip test)."""
    outs = []
    for model in models:
        model.eval()
        hm = model.forward(images)[scale]
        if flip_test:
            hm = flip_average(hm, model.forward(images[..., ::-1].copy())[scale])
        outs.append(hm)
    return ensemble_average(outs)


def predict_landmarks(
    models,
    sample,
    *,
    decoder: str = "dark",
    spec: GaussianSpec | None = None,
    flip_test: bool = True,
    modulation: bool = True,
    scale: int | None = None,
    downsample: int = 1,
) -> LandmarkSet:
    """Predict landmarks of one sample in its original image frame."""
    models = models if isinstance(models, (list, tuple)) else [models]
    return _predict_batch(models, [sample], decoder, spec, flip_test, modulation, scale, downsample)[0]


def _predict_batch(models, samples, decoder, spec, flip_test, modulation, scale, downsample):
    cfg = models[0].config
    input_hw = cfg.backbone.input_size
    scale = min(cfg.head.supervised_scales) if scale is None else scale
    prepared = [prepare(s, input_hw) for s in samples]
    images = np.stack([p[0] for p in prepared])
    maps = predict_heatmaps(models, images, scale, flip_test)
    if downsample > 1:
        maps = resize_bilinear(maps, input_hw[0] // downsample, input_hw[1] // downsample)
    stride = unbiased_stride(input_hw, maps.shape[2:])
    out = []
    for i, (_, _, amap) in enumerate(prepared):
        pred = decode(HeatmapStack(maps[i : i + 1], stride), decoder, spec, modulation)
        out.append(affine_apply(amap.inverse(), pred))
    return out


def evaluate(
    models,
    dataset,
    decoder: str = "dark",
    flip_test: bool = True,
    *,
    spec: GaussianSpec | None = None,
    modulation: bool = True,
    scale: int | None = None,
    downsample: int = 1,
    thresholds=SDR_THRESHOLDS_MM,
    batch_size: int = 8,
) -> EvalReport:
    """Radial errors in mm over every visible ground-truth landmark."""
    models = models if isinstance(models, (list, tuple)) else [models]
    n = dataset.num_landmarks
    per_lm = [[] for _ in range(n)]
    errors_px = []
    errors_mm = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start : start + batch_size]
        preds = _predict_batch(models, chunk, decoder, spec, flip_test, modulation, scale, downsample)
        for sample, pred in zip(chunk, preds):
            if not sample.pixel_spacing_mm or sample.pixel_spacing_mm <= 0:
                raise ValueError(f"sample {sample.name!r} has no pixel spacing; metrics are in mm")
            d = np.hypot(*(pred.points - sample.landmarks.points).T)
            for j in np.flatnonzero(sample.landmarks.visible):
                errors_px.append(d[j])
                errors_mm.append(d[j] * sample.pixel_spacing_mm)
                per_lm[j].append(d[j] * sample.pixel_spacing_mm)
    mre, sdr = radial_metrics(errors_mm, thresholds)
    return EvalReport(
        mre_mm=mre,
        sdr=sdr,
        per_landmark_mre_mm=[float(np.mean(v)) if v else float("nan") for v in per_lm],
        mre_px=float(np.mean(errors_px)) if errors_px else float("nan"),
        n_points=len(errors_mm),
        meta={"decoder": decoder, "flip_test": flip_test, "models": len(models), "downsample": downsample},
    )


# --------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    val_mre_mm: float
    val_sdr2: float
    wall_seconds: float


LOG_COLUMNS = ("epoch", "mean_loss", "val_mre_mm", "val_sdr2", "wall_seconds")


def write_log_csv(rows: list[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.val_mre_mm), repr(r.val_sdr2), f"{r.wall_seconds:.3f}"])


def train(
    model: SRPoseModel,
    dataset,
    epochs: int,
    batch_size: int,
    augment: AugmentConfig,
    loss_cfg: LossConfig,
    state: AdamState,
    rng: SeededRng,
    *,
    spec: GaussianSpec | None = None,
    val_dataset=None,
    eval_kwargs: dict | None = None,
    checkpoint=None,
    on_epoch=None,
) -> list[EpochLog]:
    """Run ``epochs`` passes of shuffled mini-batch Adam; returns the per-epoch log."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    n = model.config.head.num_keypoints
    for s in dataset.samples:
        if len(s.landmarks) != n:
            raise ValueError(f"sample {s.name!r} has {len(s.landmarks)} landmarks, model expects {n}")
    spec = spec or GaussianSpec()
    input_hw = model.config.backbone.input_size
    params = model.param_dict()
    grads = model.grad_dict()
    history = []
    t0 = time.perf_counter()
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [dataset[i] for i in order[start : start + batch_size]]
            imgs, lms = [], []
            for sample in batch:
                img, lm, _ = prepare(sample, input_hw, random_augment(rng, augment, input_hw))
                imgs.append(img)
                lms.append(lm)
            x = np.stack(imgs)
            targets = build_targets(model, lms, spec)
            model.zero_grad()
            pred = model.forward(x)
            loss, gpred = loss_multiscale(pred, targets, loss_cfg)
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            model.backward(gpred)
            adam_step(params, grads, state)
            losses.append(loss)
        if val_dataset is not None and len(val_dataset):
            rep = evaluate(model, val_dataset, spec=spec, **(eval_kwargs or {}))
            val_mre, val_sdr2 = rep.mre_mm, rep.sdr.get(2.0, float("nan"))
        else:
            val_mre = val_sdr2 = float("nan")
        row = EpochLog(epoch, float(np.mean(losses)), val_mre, val_sdr2, time.perf_counter() - t0)
        history.append(row)
        log.info("epoch %d loss %.6g val_mre %.4f mm", epoch, row.mean_loss, val_mre)
        if checkpoint is not None:
            model.save_params(checkpoint)
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return history
