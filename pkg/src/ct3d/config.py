"""Run configuration read from ``key = value`` text files.

Blank lines and ``#`` comments are ignored.  Every key has a default (see
``RunConfig``); unknown keys and unparsable values raise ConfigError.
Tuple-valued keys take comma-separated lists.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .augment import AugmentPlan
from .errors import ConfigError
from .model import ModelConfig
from .train_eval import TrainHyper

MODES = {"severity": 4, "detection": 2}
INFLATION = ("none", "full", "1g", "2g")


@dataclass
class RunConfig:
    # task and data
    mode: str = "severity"
    seed: int = 0
    cases: str = ""
    folds: str = ""
    k: int = 5
    out_dir: str = "runs"
    dtype: str = "float32"
    # model
    heads: tuple = ("classification",)
    stage_depths: tuple = (3, 3, 9, 3)
    stage_channels: tuple = (96, 192, 384, 768)
    depthwise_kernel: int = 7
    stem_patch: int = 4
    seg_channels: int = 128
    input_mean: float = 0.5
    pretrained: str = ""
    inflation: str = "none"
    # optimisation
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 200
    batch: int = 4
    lam: float = 1.0
    ema_decay: float = 0.999
    schedule: str = "constant"
    # augmentation
    flip_prob: float = 0.5
    noise_sigma_range: tuple = (0.6, 0.8)
    blur_prob: float = 0.5
    blur_sigma_range: tuple = (0.5, 1.5)
    rotate_range: tuple = (-30.0, 30.0)
    elastic_prob: float = 0.5
    elastic_alpha_range: tuple = (1.0, 7.0)
    elastic_sigma: float = 35.0
    orientation_prob: float = 0.25
    crop_prob: float = 0.5
    pre_size: int = 256
    crop_size: int = 224
    augment: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.inflation not in INFLATION:
            raise ConfigError(f"inflation must be one of {INFLATION}, got {self.inflation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be constant or cosine, got {self.schedule!r}")
        if self.inflation != "none" and not self.pretrained:
            raise ConfigError("inflation needs a 'pretrained' 2D checkpoint path")

    @property
    def num_classes(self):
        return MODES[self.mode]

    def model_config(self) -> ModelConfig:
        return ModelConfig(stage_depths=self.stage_depths, stage_channels=self.stage_channels,
                           depthwise_kernel=self.depthwise_kernel, stem_patch=self.stem_patch,
                           num_classes=self.num_classes, seg_channels=self.seg_channels,
                           heads=self.heads, input_mean=self.input_mean)

    def augment_plan(self) -> AugmentPlan:
        plan = AugmentPlan(flip_prob=self.flip_prob, noise_sigma_range=self.noise_sigma_range,
                           blur_prob=self.blur_prob, blur_sigma_range=self.blur_sigma_range,
                           rotate_range=self.rotate_range, elastic_prob=self.elastic_prob,
                           elastic_alpha_range=self.elastic_alpha_range, elastic_sigma=self.elastic_sigma,
                           orientation_prob=self.orientation_prob, crop_prob=self.crop_prob,
                           pre_size=self.pre_size, crop_size=self.crop_size, seed=self.seed)
        if not self.augment:
            plan = AugmentPlan.identity(pre_size=self.pre_size, crop_size=self.crop_size, seed=self.seed)
        return plan

    def hyper(self, fold=0) -> TrainHyper:
        return TrainHyper(lr=self.lr, momentum=self.momentum, steps=self.steps, batch=self.batch,
                          lam=self.lam, ema_decay=self.ema_decay, seed=self.seed * 1000 + fold,
                          schedule=self.schedule)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(a) for a in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_value(key, raw, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [a.strip() for a in raw.split(",") if a.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(a) for a in items)
            if default and isinstance(default[0], int):
                return tuple(int(a) for a in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text, source="<config>", overrides: Optional[dict] = None) -> RunConfig:
    defaults = {f.name: f.default for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, defaults[key])
    for key, raw in (overrides or {}).items():
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _parse_value(key, str(raw), defaults[key])
    return RunConfig(**values)


def load_config(path, overrides=None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), overrides)
