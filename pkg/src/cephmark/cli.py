"""Command-line entry point.

    cephmark VERB [--config FILE] [--preset toy|full] [--<run-config-key> VALUE ...]

Verbs: gen-data, train, eval, infer, decode-bench, bias-report, ensemble-eval.
Flags override the config file, which overrides the preset. Set CEPHMARK_LOG
(DEBUG, INFO, WARNING, ...) to change log verbosity.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .codec import LandmarkSet
from .config import PRESETS, ConfigError, RunConfig
from .data import Dataset, Sample, generate_dataset, parse_annotations, read_pgm
from .model import SRPoseModel
from .report import (
    BENCH_COLUMNS,
    BIAS_COLUMNS,
    bench_svg,
    bias_report,
    bias_svg,
    decode_bench,
    overlay_svg,
    write_rows,
)
from .tensor import SeededRng
from .train import evaluate, predict_landmarks, train, write_log_csv

log = logging.getLogger("cephmark")

LIST_TYPES = {  # element type of list-valued keys
    "input_size": int,
    "stage_channels": int,
    "supervised_scales": int,
    "sdr_thresholds_mm": float,
    "bench_strides": int,
    "bench_sigmas": float,
    "bias_strides": int,
}
OPTIONAL_INTS = {"ohkm_topk", "eval_scale"}


def _optional_int(text: str):
    return None if text.lower() in ("none", "null", "") else int(text)


def _scale_ratio(text: str):
    scale, _, ratio = text.partition("=")
    if not ratio:
        raise argparse.ArgumentTypeError(f"expected SCALE=RATIO, got {text!r}")
    return int(scale), int(ratio)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named base configuration (default toy)")
    g = p.add_argument_group("run configuration")
    defaults = RunConfig()
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        value = getattr(defaults, f.name)
        kw = dict(dest=f.name, default=argparse.SUPPRESS)
        if f.name in OPTIONAL_INTS:
            g.add_argument(flag, type=_optional_int, metavar="INT|none", **kw)
        elif f.name == "upscale":
            g.add_argument(flag, type=_scale_ratio, nargs="+", metavar="SCALE=RATIO", **kw)
        elif f.name in LIST_TYPES:
            g.add_argument(flag, type=LIST_TYPES[f.name], nargs="+", **kw)
        elif isinstance(value, bool):
            g.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        else:
            g.add_argument(flag, type=type(value), **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cephmark", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    verbs = {
        "gen-data": "write a synthetic landmark dataset (PGM images + annotations.json)",
        "train": "train a model; writes params.srkp, train_log.csv, config.json",
        "eval": "evaluate one parameter file; writes eval.csv",
        "infer": "predict landmarks for one image; writes JSON and an SVG overlay",
        "decode-bench": "decoder x stride x sigma error table on clean Gaussians",
        "bias-report": "quantization bias of nearest-grid decoding per stride",
        "ensemble-eval": "evaluate K parameter files with heatmap averaging",
    }
    for name, helptext in verbs.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        _add_config_flags(p)
        if name in ("eval", "infer"):
            p.add_argument("--params", required=True, help="parameter file from train")
        if name == "ensemble-eval":
            p.add_argument("--params", required=True, nargs="+", help="K parameter files")
        if name == "infer":
            p.add_argument("--image", required=True, help="8-bit binary PGM image")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    doc = dict(PRESETS[args.preset or "toy"])
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            doc.update(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    for f in fields(RunConfig):
        if hasattr(args, f.name):
            value = getattr(args, f.name)
            doc[f.name] = dict(value) if f.name == "upscale" else value
    return RunConfig.from_dict(doc)


def _annotation_path(cfg: RunConfig) -> Path:
    p = Path(cfg.data)
    return p / "annotations.json" if p.is_dir() else p


def _load_split(cfg: RunConfig, split: str | None) -> Dataset:
    ds = Dataset.load(_annotation_path(cfg), None if split == "all" else split)
    if ds.num_landmarks != cfg.num_keypoints:
        raise ConfigError(
            f"{_annotation_path(cfg)} has {ds.num_landmarks} landmarks but num_keypoints={cfg.num_keypoints}"
        )
    return ds


def _load_model(cfg: RunConfig, params) -> SRPoseModel:
    path = Path(params)
    if not path.exists():
        raise FileNotFoundError(f"parameter file not found: {path}")
    model = SRPoseModel(cfg.model_config(), cfg.seed)
    model.load_params(path)
    model.eval()
    return model


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _summary(rep) -> str:
    sdr = " ".join(f"SDR{t:g}={v:.2f}%" for t, v in rep.sdr.items())
    return f"MRE={rep.mre_mm:.4f} mm ({rep.mre_px:.4f} px) {sdr} n={rep.n_points}"


# --------------------------------------------------------------------------
# verbs


def cmd_gen_data(cfg: RunConfig, args) -> None:
    ann = generate_dataset(cfg.out_dir, cfg.n_images, cfg.num_keypoints, cfg.image_size, cfg.seed, cfg.n_val)
    cfg.echo()
    print(ann)


def cmd_train(cfg: RunConfig, args) -> None:
    out = Path(cfg.out_dir)
    cfg.echo()
    ds = _load_split(cfg, "train")
    val = _load_split(cfg, "val")
    model = SRPoseModel(cfg.model_config(), cfg.seed)
    log.info("model: %d parameters, scales %s", model.num_parameters(), list(cfg.supervised_scales))
    history = []

    def on_epoch(row):
        history.append(row)
        write_log_csv(history, out / "train_log.csv")

    train(
        model, ds, cfg.epochs, cfg.batch_size, cfg.augmentation(), cfg.loss(), cfg.adam(), SeededRng(cfg.seed).spawn(1),
        spec=cfg.gaussian(), val_dataset=val if len(val) else None, eval_kwargs=cfg.eval_kwargs(),
        checkpoint=out / "params.srkp", on_epoch=on_epoch,
    )
    model.save_params(out / "params.srkp")
    last = history[-1]
    print(f"epochs={last.epoch} loss={last.mean_loss:.6g} val_mre_mm={last.val_mre_mm:.4f} val_sdr2={last.val_sdr2:.2f}")


def _eval_models(cfg: RunConfig, param_files, csv_name: str) -> None:
    models = [_load_model(cfg, p) for p in param_files]
    ds = _load_split(cfg, cfg.eval_split)
    rep = evaluate(models, ds, spec=cfg.gaussian(), **cfg.eval_kwargs())
    rep.meta.update(
        split=cfg.eval_split,
        modulation=cfg.dark_modulation,
        params=";".join(str(p) for p in param_files),
        sha256=";".join(_sha256(p) for p in param_files),
    )
    cfg.echo()
    rep.write_csv(Path(cfg.out_dir) / csv_name)
    print(_summary(rep))


def cmd_eval(cfg: RunConfig, args) -> None:
    _eval_models(cfg, [args.params], "eval.csv")


def cmd_ensemble_eval(cfg: RunConfig, args) -> None:
    _eval_models(cfg, args.params, "ensemble_eval.csv")


def _find_record(cfg: RunConfig, image: Path):
    ann = _annotation_path(cfg)
    if not ann.exists():
        return None
    records, _ = parse_annotations(ann.read_text(), ann)
    for r in records:
        if (ann.parent / r.image).resolve() == image.resolve():
            return r
    return None


def cmd_infer(cfg: RunConfig, args) -> None:
    image = Path(args.image)
    if not image.exists():
        raise FileNotFoundError(f"image not found: {image}")
    model = _load_model(cfg, args.params)
    pixels = read_pgm(image) / 255.0
    rec = _find_record(cfg, image)
    if rec is not None:
        gt = LandmarkSet(np.array(rec.landmarks).reshape(-1, 2), rec.visible)
        spacing = rec.pixel_spacing_mm
    else:
        gt, spacing = None, None
    sample = Sample(pixels, gt or LandmarkSet(np.zeros((cfg.num_keypoints, 2))), spacing or 1.0, image.name)
    pred = predict_landmarks(
        model, sample, decoder=cfg.decoder, spec=cfg.gaussian(), flip_test=cfg.flip_test,
        modulation=cfg.dark_modulation, scale=cfg.eval_scale,
    )
    doc = {
        "image": str(image),
        "decoder": cfg.decoder,
        "flip_test": cfg.flip_test,
        "params_sha256": _sha256(args.params),
        "pixel_spacing_mm": spacing,
        "landmarks": [],
    }
    for j, (x, y) in enumerate(pred.points):
        item = {"index": j, "x_px": float(x), "y_px": float(y), "fallback": bool(pred.flags[j])}
        if spacing:
            item.update(x_mm=float(x * spacing), y_mm=float(y * spacing))
        if gt is not None and gt.visible[j]:
            err = float(np.hypot(*(pred.points[j] - gt.points[j])))
            item.update(error_px=err, error_mm=err * spacing)
        doc["landmarks"].append(item)
    out = Path(cfg.out_dir)
    cfg.echo()
    (out / f"{image.stem}_pred.json").write_text(json.dumps(doc, indent=2) + "\n")
    overlay_svg(pixels, pred, out / f"{image.stem}_pred.svg", gt)
    print(out / f"{image.stem}_pred.json")


def cmd_decode_bench(cfg: RunConfig, args) -> None:
    rows = decode_bench(cfg.bench_strides, cfg.bench_sigmas, cfg.bench_samples, cfg.seed)
    out = Path(cfg.out_dir)
    cfg.echo()
    write_rows(out / "decode_bench.csv", rows, BENCH_COLUMNS)
    bench_svg(rows, out / "decode_bench.svg")
    for r in rows:
        print(f"{r['decoder']:>8} stride={r['stride']:<3g} sigma={r['sigma']:<4g} "
              f"mean={r['mean_err_px']:.4f}px max={r['max_err_px']:.4f}px")


def cmd_bias_report(cfg: RunConfig, args) -> None:
    rows = bias_report(cfg.bias_strides, cfg.bias_samples, cfg.seed)
    out = Path(cfg.out_dir)
    cfg.echo()
    write_rows(out / "bias_report.csv", rows, BIAS_COLUMNS)
    bias_svg(rows, out / "bias_report.svg")
    for r in rows:
        print(f"stride={r['stride']:<3g} measured={r['mean_err_px']:.5f}px closed_form={r['closed_form_px']:.5f}px "
              f"rel_diff={r['rel_diff']:+.4%}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "decode-bench": cmd_decode_bench,
    "bias-report": cmd_bias_report,
    "ensemble-eval": cmd_ensemble_eval,
}


def main(argv=None) -> int:
    level = os.environ.get("CEPHMARK_LOG", "INFO").upper()
    logging.basicConfig(
        level=level if isinstance(logging.getLevelName(level), int) else "INFO",
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.verb](cfg, args)
    except Exception as e:  # one machine-readable line; set CEPHMARK_LOG=DEBUG for the traceback
        log.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
