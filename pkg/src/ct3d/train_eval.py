"""Losses, EMA, fold splitting, ensembling, metrics and a small training loop."""
from __future__ import annotations

import csv
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import augment
from .core import autograd as ag
from .core.ops import softmax
from .errors import ContractError, ParameterError, ShapeError, TrainingDiverged
from .model import ConvNeXt3D

log = logging.getLogger(__name__)


@dataclass
class LabeledCase:
    case_id: str
    volume_ref: Optional[str] = None
    label: int = 0
    mask_ref: Optional[str] = None


def _case_label(case):
    return int(case.label if hasattr(case, "label") else case[1])


def _case_id(case):
    return str(case.case_id if hasattr(case, "case_id") else case[0])


# losses

@dataclass
class ClassWeights:
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or np.any(self.weights <= 0):
            raise ParameterError("class weights must be a vector of positive reals")

    def __len__(self):
        return len(self.weights)


def class_weights(labels, num_classes) -> ClassWeights:
    """Inverse class frequency ``N / (K n_c)`` rescaled to mean 1."""
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"label out of range [0, {num_classes})")
    counts = np.bincount(labels, minlength=num_classes)
    absent = np.flatnonzero(counts == 0)
    if absent.size:
        raise ParameterError(f"classes without samples: {absent.tolist()}")
    w = labels.size / (num_classes * counts.astype(np.float64))
    return ClassWeights(w / w.mean())


def _node(x):
    return x if isinstance(x, ag.Node) else ag.constant(np.asarray(x, dtype=np.float64))


def cross_entropy(logits, labels):
    """Plain mean cross-entropy; ``logits`` is ``(N, K)`` (Node or array)."""
    return ag.cross_entropy(_node(logits), np.asarray(labels, dtype=int))


def balanced_ce(logits, labels, weights) -> ag.Node:
    """Mean over samples of ``w[y] * -log softmax(logits)[y]``."""
    logits = _node(logits)
    w = weights.weights if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
    if logits.value.ndim != 2 or len(w) != logits.value.shape[1]:
        raise ShapeError(f"logits {logits.value.shape} do not match {len(w)} class weights")
    return ag.cross_entropy(logits, np.asarray(labels, dtype=int), w)


def seg_loss(mask_logits, mask) -> ag.Node:
    """Voxel-mean two-class cross-entropy.  Unbatched ``(2,S,S,S)`` inputs are accepted."""
    mask_logits = _node(mask_logits)
    mask = np.asarray(mask)
    if mask.size and not np.isin(mask, (0, 1)).all():
        raise ContractError("segmentation mask must contain only 0 and 1")
    mask = mask.astype(int)
    if mask_logits.value.ndim == 4:
        mask_logits = ag.Node(mask_logits.value[None], (mask_logits,), lambda g: (g[0],))
        mask = mask[None]
    if mask_logits.value.shape[1] != 2:
        raise ShapeError(f"expected 2 mask channels, got {mask_logits.value.shape[1]}")
    return ag.cross_entropy(mask_logits, mask)


def multitask_loss(cls_loss, seg, lam=1.0):
    if lam < 0:
        raise ParameterError(f"lambda must be non-negative, got {lam}")
    if isinstance(cls_loss, ag.Node) or isinstance(seg, ag.Node):
        return ag.add(_node(cls_loss), ag.scale(_node(seg), lam))
    return float(cls_loss) + lam * float(seg)


# EMA

@dataclass
class EmaState:
    decay: float = 0.999
    shadow: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ParameterError(f"EMA decay must lie in [0, 1), got {self.decay}")


def ema_init(model: ConvNeXt3D, decay=0.999) -> EmaState:
    """Shadow starts as a float64 copy of the current parameters."""
    return EmaState(decay, OrderedDict((k, v.astype(np.float64)) for k, v in model.params.items()))


def ema_update(state: EmaState, model) -> EmaState:
    params = model.params if isinstance(model, ConvNeXt3D) else model
    if list(params) != list(state.shadow):
        raise ContractError("EMA shadow names differ from the model parameters")
    b = state.decay
    for name, value in params.items():
        s = state.shadow[name]
        if s.shape != value.shape:
            raise ContractError(f"EMA shadow shape {s.shape} != parameter {value.shape} for {name}")
        s *= b
        s += (1.0 - b) * value
    return state


def ema_model(state: EmaState, model: ConvNeXt3D) -> ConvNeXt3D:
    """Copy of ``model`` carrying the shadow weights."""
    return ConvNeXt3D(model.config, state.shadow, model.dtype)


# folds

@dataclass
class FoldAssignment:
    k: int
    folds: "OrderedDict[str, int]"

    def members(self, fold):
        return [c for c, f in self.folds.items() if f == fold]

    def sizes(self):
        return [len(self.members(i)) for i in range(self.k)]


def stratified_kfold(cases, k=5, seed=0) -> FoldAssignment:
    """Per class, shuffle and deal members round-robin.

    Each class starts dealing where the previous class stopped, so both the
    per-class and the overall fold sizes differ by at most one.
    """
    if k < 2:
        raise ParameterError(f"k must be at least 2, got {k}")
    ids = [_case_id(c) for c in cases]
    if len(set(ids)) != len(ids):
        raise ContractError("case ids must be unique")
    rng = np.random.default_rng(seed)
    by_class: Dict[int, List[str]] = {}
    for c in cases:
        by_class.setdefault(_case_label(c), []).append(_case_id(c))
    assign = {}
    start = 0
    for label in sorted(by_class):
        members = by_class[label]
        for j, idx in enumerate(rng.permutation(len(members))):
            assign[members[idx]] = (start + j) % k
        start = (start + len(members)) % k
    return FoldAssignment(k, OrderedDict((i, assign[i]) for i in ids))


# ensembling and metrics

@dataclass
class EnsembleOutput:
    probabilities: np.ndarray
    label: int


def ensemble_probabilities(logit_list):
    """Mean of per-member softmax, accumulated in member order."""
    if not logit_list:
        raise ParameterError("ensemble needs at least one member")
    sizes = {np.shape(l)[-1] for l in logit_list}
    if len(sizes) != 1:
        raise ContractError(f"ensemble members disagree on class count: {sorted(sizes)}")
    acc = np.zeros(np.shape(logit_list[0]), dtype=np.float64)
    for logits in logit_list:
        acc += softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    return acc / len(logit_list)


def model_logits(model: ConvNeXt3D, volume):
    x = np.asarray(volume, dtype=model.dtype)
    while x.ndim < 5:
        x = x[None]
    p = model.leaves(trainable=False)
    return model.class_logits(model.features(x, p), p).value


def ensemble_predict(models, volume) -> EnsembleOutput:
    """Softmax each member's logits, average, take the lowest-index argmax."""
    if not models:
        raise ParameterError("ensemble needs at least one member")
    classes = {m.config.num_classes for m in models}
    if len(classes) != 1:
        raise ContractError(f"ensemble members disagree on class count: {sorted(classes)}")
    probs = ensemble_probabilities([model_logits(m, volume)[0] for m in models])
    return EnsembleOutput(probs, int(np.argmax(probs)))


def macro_f1(predictions, labels, num_classes):
    """``(macro, per_class)``; a class never predicted nor present scores 0."""
    pred = np.asarray(predictions, dtype=int)
    true = np.asarray(labels, dtype=int)
    if pred.shape != true.shape:
        raise ShapeError(f"{pred.shape} predictions vs {true.shape} labels")
    per = np.zeros(num_classes)
    for c in range(num_classes):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        per[c] = 2.0 * tp / denom if denom else 0.0
    return float(per.mean()), per


def generate_pseudo_labels(seg_model: ConvNeXt3D, volumes, out_dir=None, names=None):
    """Binary masks from the per-voxel argmax of the segmentation head (ties go to background)."""
    if "segmentation" not in seg_model.config.heads:
        raise ContractError("pseudo-labelling needs a model with a segmentation head")
    p = seg_model.leaves(trainable=False)
    masks = []
    for i, vol in enumerate(volumes):
        x = np.asarray(vol, dtype=seg_model.dtype)
        while x.ndim < 5:
            x = x[None]
        logits = seg_model.mask_logits(seg_model.features(x, p), p, x.shape[2:]).value[0]
        masks.append((logits[1] > logits[0]).astype(np.uint8))
    if out_dir is not None:
        from .formats import save_vox

        os.makedirs(out_dir, exist_ok=True)
        for i, m in enumerate(masks):
            name = names[i] if names else f"case{i:04d}"
            save_vox(os.path.join(out_dir, f"{name}.mask.vox"), m)
    return masks


# training

@dataclass
class TrainSample:
    """One case at both precomputed resolutions (``pre`` may be None when cropping is off)."""
    small: np.ndarray
    label: int
    pre: Optional[np.ndarray] = None
    mask_small: Optional[np.ndarray] = None
    mask_pre: Optional[np.ndarray] = None


@dataclass
class TrainHyper:
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 200
    batch: int = 4
    lam: float = 1.0
    ema_decay: float = 0.999
    seed: int = 0
    schedule: str = "constant"

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ParameterError(f"unknown learning-rate schedule {self.schedule!r}")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.steps < 0 or self.batch < 1 or self.lam < 0:
            raise ParameterError(f"invalid training hyperparameters: {self}")


def learning_rate(hyper: TrainHyper, step: int) -> float:
    """Step size at ``step``; cosine decays from ``lr`` towards zero over the run."""
    if hyper.schedule == "constant" or hyper.steps <= 1:
        return hyper.lr
    return 0.5 * hyper.lr * (1.0 + math.cos(math.pi * step / hyper.steps))


@dataclass
class TrainResult:
    model: ConvNeXt3D
    ema: EmaState
    losses: List[float]

    def ema_model(self):
        return ema_model(self.ema, self.model)


def _augmented(sample: TrainSample, plan, volume_id):
    draw = augment.draw_params(plan, volume_id)
    vol = augment.apply_draw(sample.pre, sample.small, plan, draw, volume_id)
    mask = None
    if sample.mask_small is not None:
        m = augment.apply_draw(sample.mask_pre, sample.mask_small, plan, draw, volume_id, intensity=False)
        mask = (m >= 0.5).astype(np.uint8)
    return vol, mask


def train_toy(model: ConvNeXt3D, samples, plan, hyper: TrainHyper = None, weights=None, log_every=0):
    """SGD with momentum on balanced CE (plus ``lam`` times the mask loss when masks exist).

    Batches are drawn with replacement from a seeded stream and each drawn
    slot gets its own augmentation id, so the run is a deterministic
    function of the inputs.  The EMA shadow is updated after every step.
    """
    hyper = hyper or TrainHyper()
    model = model.copy()
    labels = [s.label for s in samples]
    if weights is None:
        weights = class_weights(labels, model.config.num_classes)
    use_seg = "segmentation" in model.config.heads and all(s.mask_small is not None for s in samples)
    ema = ema_init(model, hyper.ema_decay)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    rng = np.random.Generator(np.random.Philox(hyper.seed))
    losses = []
    for step in range(hyper.steps):
        lr = learning_rate(hyper, step)
        idx = rng.integers(len(samples), size=hyper.batch)
        vols, masks = [], []
        for slot, i in enumerate(idx):
            v, m = _augmented(samples[i], plan, step * hyper.batch + slot)
            vols.append(v)
            masks.append(m)
        x = np.stack(vols)[:, None].astype(model.dtype)
        p = model.leaves()
        with np.errstate(over="ignore", invalid="ignore"):
            feats = model.features(x, p)
            loss = balanced_ce(model.class_logits(feats, p), [samples[i].label for i in idx], weights)
            if use_seg:
                sl = seg_loss(model.mask_logits(feats, p, x.shape[2:]), np.stack(masks))
                loss = multitask_loss(loss, sl, hyper.lam)
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step}")
        grads = ag.backward(loss, p)
        for name, g in grads.items():
            vel = velocity[name]
            vel *= hyper.momentum
            vel += g
            model.params[name] -= (lr * vel).astype(model.dtype, copy=False)
        ema_update(ema, model)
        losses.append(value)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, value)
    return TrainResult(model, ema, losses)


# TSV I/O

def write_folds(path, assignment: FoldAssignment):
    with open(path, "w", newline="") as fh:
        for case_id, fold in assignment.folds.items():
            fh.write(f"{case_id}\t{fold}\n")


def read_folds(path) -> FoldAssignment:
    folds = OrderedDict()
    with open(path, newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row:
                continue
            if len(row) != 2:
                raise ContractError(f"{path}: expected 'case_id<TAB>fold', got {row}")
            folds[row[0]] = int(row[1])
    k = max(folds.values()) + 1 if folds else 0
    return FoldAssignment(k, folds)


def write_metrics(path, metrics):
    with open(path, "w", newline="") as fh:
        for key, value in metrics.items():
            fh.write(f"{key}\t{value:.6f}\n")


def read_metrics(path):
    out = OrderedDict()
    with open(path, newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if row:
                out[row[0]] = float(row[1])
    return out


def write_cases(path, cases):
    with open(path, "w", newline="") as fh:
        for c in cases:
            row = [c.case_id, str(c.label) if c.label is not None else "-", c.volume_ref or "", c.mask_ref or ""]
            while row and not row[-1]:
                row.pop()
            fh.write("\t".join(row) + "\n")


def read_cases(path) -> List[LabeledCase]:
    """``case_id<TAB>label[<TAB>volume[<TAB>mask]]``; ``-`` marks an unknown label.

    Relative paths are resolved against the directory of ``path``.
    """
    base = os.path.dirname(os.path.abspath(path))
    cases = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < 2:
                raise ContractError(f"{path}:{lineno}: expected at least case_id<TAB>label")
            try:
                label = None if row[1] == "-" else int(row[1])
            except ValueError:
                raise ContractError(f"{path}:{lineno}: label {row[1]!r} is not an integer") from None
            refs = [os.path.join(base, r) if r else None for r in row[2:4]]
            refs += [None] * (2 - len(refs))
            cases.append(LabeledCase(row[0], refs[0], label, refs[1]))
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ContractError(f"{path}: duplicate case ids")
    return cases


def cross_validate(make_model, samples, assignment: FoldAssignment, plan, hyper: TrainHyper, folds=None):
    """Train one model per fold on the other folds' samples.

    ``samples`` maps case ids to TrainSample; ``make_model(fold)`` builds the
    starting model.  Fold ``f`` uses seed ``hyper.seed + f``.
    """
    results = []
    for f in (range(assignment.k) if folds is None else folds):
        train = [samples[c] for c, k in assignment.folds.items() if k != f]
        h = TrainHyper(**{**hyper.__dict__, "seed": hyper.seed + f})
        results.append(train_toy(make_model(f), train, plan, h))
    return results
