"""Run configuration: one flat JSON document holding every knob.

Every CLI flag maps to one field here (``--supervised-scales`` is
``supervised_scales``). Loading rejects unknown keys, and every command writes
the effective configuration to ``config.json`` in its output directory.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .codec import DECODERS, GaussianSpec
from .model import BackboneConfig, HeadConfig, ModelConfig
from .train import SDR_THRESHOLDS_MM, AdamState, AugmentConfig, LossConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    data: str = "data/annotations.json"
    out_dir: str = "runs/default"
    # synthetic data
    n_images: int = 250
    n_val: int = 50
    image_size: int = 128
    # model
    input_size: list = field(default_factory=lambda: [128, 128])
    in_channels: int = 1
    stem_channels: int = 16
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    neck_width: int = 32
    num_keypoints: int = 4
    supervised_scales: list = field(default_factory=lambda: [2, 3])
    upscale: dict = field(default_factory=dict)  # scale -> pixel-shuffle ratio; default 2**scale
    lkc_kernel: int = 9
    # targets and loss
    sigma: float = 6.0
    loss_mode: str = "mse"
    ohkm_topk: int | None = None
    # optimisation
    epochs: int = 30
    batch_size: int = 2
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    # augmentation
    augment: bool = True
    flip_prob: float = 0.5
    scale_min: float = 0.75
    scale_max: float = 1.25
    rotation_deg: float = 15.0
    translate_frac: float = 0.05
    # inference and evaluation
    decoder: str = "dark"
    dark_modulation: bool = True
    flip_test: bool = True
    eval_scale: int | None = None
    eval_split: str = "val"
    sdr_thresholds_mm: list = field(default_factory=lambda: list(SDR_THRESHOLDS_MM))
    # decode-bench and bias-report
    bench_strides: list = field(default_factory=lambda: [2, 4, 8])
    bench_sigmas: list = field(default_factory=lambda: [2.0, 4.0, 6.0])
    bench_samples: int = 1000
    bias_strides: list = field(default_factory=lambda: [1, 2, 4, 8])
    bias_samples: int = 1_000_000

    def __post_init__(self):
        self.upscale = {int(k): int(v) for k, v in self.upscale.items()}
        if self.loss_mode not in ("mse", "l2norm"):
            raise ConfigError(f"loss_mode must be mse or l2norm, got {self.loss_mode!r}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if len(self.input_size) != 2:
            raise ConfigError("input_size needs two values: height width")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["upscale"] = {str(k): v for k, v in sorted(self.upscale.items())}
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def echo(self, out_dir=None) -> Path:
        out = Path(out_dir or self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(self.dumps())
        return out / "config.json"

    # ---- views used by the library

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            BackboneConfig(self.in_channels, self.stem_channels, tuple(self.stage_channels), tuple(self.input_size)),
            HeadConfig(self.num_keypoints, tuple(self.supervised_scales), dict(self.upscale), self.lkc_kernel),
            self.neck_width,
        )

    def gaussian(self) -> GaussianSpec:
        return GaussianSpec(sigma=self.sigma)

    def loss(self) -> LossConfig:
        return LossConfig(self.loss_mode, self.ohkm_topk)

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.adam_epsilon)

    def augmentation(self) -> AugmentConfig:
        return AugmentConfig(
            self.augment, self.flip_prob, (self.scale_min, self.scale_max), self.rotation_deg, self.translate_frac
        )

    def eval_kwargs(self) -> dict:
        return dict(
            decoder=self.decoder,
            flip_test=self.flip_test,
            modulation=self.dark_modulation,
            scale=self.eval_scale,
            thresholds=tuple(self.sdr_thresholds_mm),
        )


# Named presets; "full" is the full-size setting (large input, 38 landmarks,
# 100 epochs). It runs, slowly, and is not an acceptance target.
PRESETS = {
    "toy": {},
    "full": {
        "input_size": [1024, 1024],
        "image_size": 1024,
        "num_keypoints": 38,
        "epochs": 100,
        "n_images": 600,
        "n_val": 100,
    },
}
