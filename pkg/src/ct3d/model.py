"""3D ConvNeXt backbone with classification and segmentation heads.

Parameters live in a flat ``{name: array}`` store.  Graph methods take a
matching ``{name: Node}`` dict so the same code serves inference, training
and gradient checks.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from .core import autograd as ag
from .core.ops import DEFAULT_DTYPE
from .errors import CheckpointError, ConfigError, MigrationError, ShapeError
from .inflate import InflationMode, inflate_1g, inflate_2g, inflate_full

LN_EPS = 1e-6
HEADS = ("classification", "segmentation")
SEG_CLASSES = 2


@dataclass
class ModelConfig:
    in_channels: int = 1
    stage_depths: tuple = (3, 3, 9, 3)
    stage_channels: tuple = (96, 192, 384, 768)
    depthwise_kernel: int = 7
    stem_patch: int = 4
    num_classes: int = 4
    seg_channels: int = 128
    heads: tuple = ("classification",)
    input_mean: float = 0.5

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.heads = tuple(self.heads)
        if len(self.stage_depths) != len(self.stage_channels) or not self.stage_depths:
            raise ConfigError("stage_depths and stage_channels need the same non-zero length")
        ints = [self.in_channels, self.depthwise_kernel, self.stem_patch, self.num_classes, self.seg_channels]
        if min(ints + list(self.stage_depths) + list(self.stage_channels)) < 1:
            raise ConfigError("all extents must be positive")
        if self.depthwise_kernel % 2 != 1:
            raise ConfigError("depthwise kernel must be odd to keep spatial extents")
        unknown = set(self.heads) - set(HEADS)
        if unknown or not self.heads:
            raise ConfigError(f"heads must be a non-empty subset of {HEADS}, got {self.heads}")

    @classmethod
    def toy(cls, **kw):
        base = dict(stage_depths=(1, 1, 1, 1), stage_channels=(4, 8, 16, 32), seg_channels=8)
        base.update(kw)
        return cls(**base)

    @property
    def downsampling(self):
        return self.stem_patch * 2 ** (len(self.stage_depths) - 1)

    def stage_sides(self, side):
        if side % self.downsampling:
            raise ConfigError(f"input side {side} is not divisible by {self.downsampling}")
        return [side // (self.stem_patch * 2 ** s) for s in range(len(self.stage_depths))]

    def to_dict(self):
        return asdict(self)


@dataclass
class StageFeatures:
    stages: List

    def __iter__(self):
        return iter(self.stages)

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, i):
        return self.stages[i]


def parameter_shapes(config: ModelConfig):
    """Ordered ``{name: shape}`` for every parameter of ``config``."""
    shapes = OrderedDict()
    C = config.stage_channels
    p, k = config.stem_patch, config.depthwise_kernel
    shapes["stem.conv.weight"] = (config.in_channels, C[0], p, p, p)
    shapes["stem.conv.bias"] = (C[0],)
    shapes["stem.norm.weight"] = (C[0],)
    shapes["stem.norm.bias"] = (C[0],)
    for s, (depth, c) in enumerate(zip(config.stage_depths, C)):
        if s > 0:
            pre = f"downsample.{s}"
            shapes[f"{pre}.norm.weight"] = (C[s - 1],)
            shapes[f"{pre}.norm.bias"] = (C[s - 1],)
            shapes[f"{pre}.conv.weight"] = (C[s - 1], c, 2, 2, 2)
            shapes[f"{pre}.conv.bias"] = (c,)
        for b in range(depth):
            pre = f"stages.{s}.blocks.{b}"
            shapes[f"{pre}.dwconv.weight"] = (c, 1, k, k, k)
            shapes[f"{pre}.dwconv.bias"] = (c,)
            shapes[f"{pre}.norm.weight"] = (c,)
            shapes[f"{pre}.norm.bias"] = (c,)
            shapes[f"{pre}.pwconv1.weight"] = (c, 4 * c)
            shapes[f"{pre}.pwconv1.bias"] = (4 * c,)
            shapes[f"{pre}.pwconv2.weight"] = (4 * c, c)
            shapes[f"{pre}.pwconv2.bias"] = (c,)
    if "classification" in config.heads:
        shapes["head.norm.weight"] = (C[-1],)
        shapes["head.norm.bias"] = (C[-1],)
        shapes["head.fc.weight"] = (C[-1], config.num_classes)
        shapes["head.fc.bias"] = (config.num_classes,)
    if "segmentation" in config.heads:
        sc = config.seg_channels
        for s, c in enumerate(C):
            shapes[f"seg.lateral.{s}.weight"] = (c, sc)
            shapes[f"seg.lateral.{s}.bias"] = (sc,)
            shapes[f"seg.lateral.{s}.norm.weight"] = (sc,)
            shapes[f"seg.lateral.{s}.norm.bias"] = (sc,)
        shapes["seg.fuse.weight"] = (len(C) * sc, sc, 3, 3, 3)
        shapes["seg.fuse.bias"] = (sc,)
        shapes["seg.fuse.norm.weight"] = (sc,)
        shapes["seg.fuse.norm.bias"] = (sc,)
        shapes["seg.out.weight"] = (sc, SEG_CLASSES)
        shapes["seg.out.bias"] = (SEG_CLASSES,)
    return shapes


def _trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class ConvNeXt3D:
    def __init__(self, config: ModelConfig, params, dtype=DEFAULT_DTYPE):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = OrderedDict((k, np.ascontiguousarray(v, dtype=self.dtype)) for k, v in params.items())

    @property
    def num_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def astype(self, dtype):
        return ConvNeXt3D(self.config, self.params, dtype)

    def copy(self):
        return ConvNeXt3D(self.config, {k: v.copy() for k, v in self.params.items()}, self.dtype)

    def leaves(self, trainable=True):
        return OrderedDict((k, ag.leaf(v, name=k, trainable=trainable)) for k, v in self.params.items())

    def _input(self, x):
        if isinstance(x, ag.Node):
            return x
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 4:
            x = x[None]
        return ag.constant(x)

    def check_input(self, shape):
        if len(shape) != 5 or shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (N,{self.config.in_channels},S,S,S) input, got {shape}")
        for side in shape[2:]:
            self.config.stage_sides(side)

    # graph methods: x is a Node (N, C, X, Y, Z), p maps names to Nodes

    def features(self, x, p):
        cfg = self.config
        x = self._input(x)
        self.check_input(x.shape)
        if cfg.input_mean:
            x = ag.add(x, ag.constant(np.asarray(-cfg.input_mean, dtype=x.value.dtype)))
        h = ag.conv3d(x, p["stem.conv.weight"], p["stem.conv.bias"], stride=cfg.stem_patch)
        h = ag.layer_norm(h, p["stem.norm.weight"], p["stem.norm.bias"], LN_EPS)
        out = []
        pad = cfg.depthwise_kernel // 2
        for s, depth in enumerate(cfg.stage_depths):
            if s > 0:
                pre = f"downsample.{s}"
                h = ag.layer_norm(h, p[f"{pre}.norm.weight"], p[f"{pre}.norm.bias"], LN_EPS)
                h = ag.conv3d(h, p[f"{pre}.conv.weight"], p[f"{pre}.conv.bias"], stride=2)
            for b in range(depth):
                pre = f"stages.{s}.blocks.{b}"
                r = ag.depthwise_conv3d(h, p[f"{pre}.dwconv.weight"], p[f"{pre}.dwconv.bias"], padding=pad)
                r = ag.layer_norm(r, p[f"{pre}.norm.weight"], p[f"{pre}.norm.bias"], LN_EPS)
                r = ag.gelu(ag.pointwise(r, p[f"{pre}.pwconv1.weight"], p[f"{pre}.pwconv1.bias"]))
                r = ag.pointwise(r, p[f"{pre}.pwconv2.weight"], p[f"{pre}.pwconv2.bias"])
                h = ag.add(h, r)
            out.append(h)
        return StageFeatures(out)

    def class_logits(self, feats, p):
        if "classification" not in self.config.heads:
            raise ConfigError("model has no classification head")
        pooled = ag.spatial_mean(feats[-1])
        pooled = ag.layer_norm(pooled, p["head.norm.weight"], p["head.norm.bias"], LN_EPS)
        return ag.pointwise(pooled, p["head.fc.weight"], p["head.fc.bias"])

    def mask_logits(self, feats, p, out_size):
        if "segmentation" not in self.config.heads:
            raise ConfigError("model has no segmentation head")
        grid = feats[0].shape[2:]
        lateral = []
        for s, f in enumerate(feats):
            pre = f"seg.lateral.{s}"
            h = ag.pointwise(f, p[f"{pre}.weight"], p[f"{pre}.bias"])
            h = ag.gelu(ag.layer_norm(h, p[f"{pre}.norm.weight"], p[f"{pre}.norm.bias"], LN_EPS))
            lateral.append(ag.trilinear_resize(h, grid))
        h = ag.conv3d(ag.concat(lateral, axis=1), p["seg.fuse.weight"], p["seg.fuse.bias"], padding=1)
        h = ag.gelu(ag.layer_norm(h, p["seg.fuse.norm.weight"], p["seg.fuse.norm.bias"], LN_EPS))
        h = ag.pointwise(h, p["seg.out.weight"], p["seg.out.bias"])
        return ag.trilinear_resize(h, out_size)


def build_model(config: ModelConfig, rng=None, dtype=DEFAULT_DTYPE):
    """Fresh model: truncated-normal (std 0.02) weights, zero biases, unit LayerNorm scales."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    params = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith("norm.weight"):
            params[name] = np.ones(shape)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            params[name] = _trunc_normal(rng, shape)
    return ConvNeXt3D(config, params, dtype)


def _unwrap(stage_nodes, squeeze):
    arrays = [n.value for n in stage_nodes]
    return [a[0] if squeeze else a for a in arrays]


def forward_features(model: ConvNeXt3D, x):
    """Stage outputs for a ``(C,S,S,S)`` volume or ``(N,C,S,S,S)`` batch."""
    squeeze = np.ndim(x) == 4
    feats = model.features(x, model.leaves(trainable=False))
    return StageFeatures(_unwrap(feats, squeeze))


def _feature_nodes(model, features):
    squeeze = np.ndim(features[0]) == 4
    nodes = [ag.constant(np.asarray(f, dtype=model.dtype)[None] if squeeze else np.asarray(f, dtype=model.dtype))
             for f in features]
    return StageFeatures(nodes), squeeze


def classify(model: ConvNeXt3D, features):
    nodes, squeeze = _feature_nodes(model, features)
    logits = model.class_logits(nodes, model.leaves(trainable=False)).value
    return logits[0] if squeeze else logits


def segment(model: ConvNeXt3D, features, out_size):
    nodes, squeeze = _feature_nodes(model, features)
    logits = model.mask_logits(nodes, model.leaves(trainable=False), out_size).value
    return logits[0] if squeeze else logits


# checkpoints

@dataclass
class Checkpoint:
    entries: "OrderedDict[str, np.ndarray]"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = OrderedDict(self.entries)

    def names(self):
        return list(self.entries)


def save_checkpoint(model: ConvNeXt3D):
    meta = {"config": model.config.to_dict(), "format": 1}
    return Checkpoint(OrderedDict((k, v.copy()) for k, v in model.params.items()), meta)


def load_checkpoint(model: ConvNeXt3D, ckpt: Checkpoint, strict=True):
    """Copy checkpoint entries into ``model`` after validating names and shapes.

    With ``strict=False`` parameters missing from the checkpoint keep their
    current values; unexpected or mis-shaped entries are always errors.
    """
    expected = model.params
    extra = [k for k in ckpt.entries if k not in expected]
    if extra:
        raise CheckpointError(f"unexpected checkpoint entries: {', '.join(extra)}")
    missing = [k for k in expected if k not in ckpt.entries]
    if missing and strict:
        raise CheckpointError(f"checkpoint is missing entries: {', '.join(missing)}")
    for name, value in ckpt.entries.items():
        if tuple(value.shape) != tuple(expected[name].shape):
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {tuple(value.shape)} vs model {tuple(expected[name].shape)}")
    for name, value in ckpt.entries.items():
        model.params[name] = np.array(value, dtype=model.dtype)
    return model


_INFLATE = {InflationMode.FULL: inflate_full, InflationMode.ONE_G: inflate_1g, InflationMode.TWO_G: inflate_2g}


def import_2d_checkpoint(ckpt2d: Checkpoint, spec, config: ModelConfig, base: Checkpoint = None):
    """Map a 2D ConvNeXt checkpoint onto the 3D parameter layout.

    Spatial kernels (rank 5 in the 3D model) are inflated with the mode of
    ``spec`` to their 3D depth extent; every other entry is copied
    verbatim.  Parameters the 2D checkpoint lacks are taken from ``base`` if
    given, otherwise left out (load with ``strict=False``).
    """
    mode = InflationMode(getattr(spec, "mode", spec))
    shapes = parameter_shapes(config)
    out = OrderedDict()
    unmapped = [k for k in ckpt2d.entries if k not in shapes]
    if unmapped:
        raise MigrationError(f"no 3D counterpart for: {', '.join(unmapped)}")
    for name, shape3d in shapes.items():
        if name not in ckpt2d.entries:
            if base is not None and name in base.entries:
                out[name] = base.entries[name].copy()
            continue
        src = np.asarray(ckpt2d.entries[name])
        if len(shape3d) == 5:
            if tuple(src.shape) != tuple(shape3d[:4]):
                raise MigrationError(f"{name}: 2D kernel {tuple(src.shape)} does not match {shape3d[:4]}")
            out[name] = _INFLATE[mode](src, shape3d[4]).astype(np.float32)
        else:
            if tuple(src.shape) != tuple(shape3d):
                raise MigrationError(f"{name}: shape {tuple(src.shape)} does not match {tuple(shape3d)}")
            out[name] = src.copy()
    meta = dict(ckpt2d.metadata)
    meta.update(config=config.to_dict(), inflation=mode.value)
    return Checkpoint(out, meta)


def inflation_report(ckpt2d: Checkpoint, ckpt3d: Checkpoint):
    """``(name, ||2D||, ||3D||)`` for every entry that changed rank."""
    rows = []
    for name, src in ckpt2d.entries.items():
        dst = ckpt3d.entries.get(name)
        if dst is not None and dst.ndim == src.ndim + 1:
            rows.append((name, float(np.linalg.norm(np.ravel(src).astype(np.float64))),
                         float(np.linalg.norm(np.ravel(dst).astype(np.float64)))))
    return rows


def checkpoint_2d_template(config: ModelConfig, rng=None):
    """A 2D ConvNeXt checkpoint whose names and shapes map onto ``config``.

    Spatial kernels drop their depth axis; everything else matches.  Mostly
    useful for tests and for preparing converted 2D weights.
    """
    rng = np.random.default_rng(rng)
    entries = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.startswith("seg."):
            continue
        if len(shape) == 5:
            shape = shape[:4]
        entries[name] = (rng.standard_normal(shape) * 0.05).astype(np.float32)
    return Checkpoint(entries, {"dims": 2})


def write_checkpoint(ckpt: Checkpoint, path):
    from .formats import save_ntc

    save_ntc(path, ckpt.entries)


def read_checkpoint(path) -> Checkpoint:
    from .formats import load_ntc

    return Checkpoint(load_ntc(path), {"path": str(path)})


def infer_config(ckpt: Checkpoint, input_mean=0.5) -> ModelConfig:
    """Recover the architecture from entry names and shapes."""
    e = ckpt.entries
    try:
        stem = e["stem.conv.weight"]
    except KeyError:
        raise CheckpointError("checkpoint has no stem.conv.weight entry") from None
    depths, channels = [], []
    s = 0
    while f"stages.{s}.blocks.0.dwconv.weight" in e:
        b = 0
        while f"stages.{s}.blocks.{b}.dwconv.weight" in e:
            b += 1
        depths.append(b)
        channels.append(e[f"stages.{s}.blocks.0.dwconv.weight"].shape[0])
        s += 1
    if not depths:
        raise CheckpointError("checkpoint has no stage blocks")
    heads = []
    kw = {}
    if "head.fc.weight" in e:
        heads.append("classification")
        kw["num_classes"] = e["head.fc.weight"].shape[1]
    if "seg.out.weight" in e:
        heads.append("segmentation")
        kw["seg_channels"] = e["seg.out.weight"].shape[0]
    return ModelConfig(in_channels=stem.shape[0], stage_depths=depths, stage_channels=channels,
                       depthwise_kernel=e["stages.0.blocks.0.dwconv.weight"].shape[2],
                       stem_patch=stem.shape[2], heads=tuple(heads), input_mean=input_mean, **kw)


def model_from_checkpoint(ckpt: Checkpoint, config: ModelConfig = None, dtype=DEFAULT_DTYPE):
    config = config or infer_config(ckpt)
    model = build_model(config, 0, dtype)
    return load_checkpoint(model, ckpt)
