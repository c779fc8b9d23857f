"""``ct3d`` command line.

Every failure ends with one JSON line on stderr,
``{"error": <kind>, "message": <text>}``, and a nonzero exit status.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import train_eval as te
from .config import RunConfig, load_config
from .errors import ContractError, Ct3dError
from .formats import load_vox, save_vox
from .ingest import ingest_case, load_resampled, precompute
from .model import (Checkpoint, build_model, import_2d_checkpoint, inflation_report, load_checkpoint,
                    model_from_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint)
from .resample import spline_resample_volume

log = logging.getLogger("ct3d")

EXIT_CONTRACT = 2
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ContractError(f"usage: {message}")


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


# data plumbing

def _sizes(cfg: RunConfig):
    return (cfg.pre_size, cfg.crop_size) if cfg.augment and cfg.crop_prob > 0 else (cfg.crop_size,)


def _mask_at(mask, size):
    return (spline_resample_volume(np.asarray(mask, np.float64), (size,) * 3) >= 0.5).astype(np.uint8)


def load_sample(case: te.LabeledCase, cfg: RunConfig) -> te.TrainSample:
    if case.volume_ref is None:
        raise ContractError(f"case {case.case_id} has no volume path")
    vols = load_resampled(ingest_case(case.volume_ref), _sizes(cfg))
    sample = te.TrainSample(small=vols[cfg.crop_size], label=case.label, pre=vols.get(cfg.pre_size))
    if case.mask_ref:
        mask = load_vox(case.mask_ref)
        sample.mask_small = _mask_at(mask, cfg.crop_size)
        if sample.pre is not None:
            sample.mask_pre = _mask_at(mask, cfg.pre_size)
    return sample


def _model_input(case, size):
    vol = ingest_case(case.volume_ref)
    return load_resampled(vol, (size,))[size]


def _fold_assignment(cfg: RunConfig, cases):
    if cfg.folds:
        return te.read_folds(cfg.folds)
    return te.stratified_kfold(cases, cfg.k, cfg.seed)


def _initial_model(cfg: RunConfig, fold):
    model = build_model(cfg.model_config(), cfg.seed * 1000 + fold, cfg.np_dtype)
    if cfg.inflation != "none":
        ck2 = read_checkpoint(cfg.pretrained)
        ck3 = import_2d_checkpoint(ck2, cfg.inflation, model.config, base=save_checkpoint(model))
        load_checkpoint(model, ck3)
    return model


def _load_models(paths, cfg=None, dtype=np.float32):
    models = []
    config = cfg.model_config() if cfg is not None else None
    for p in paths:
        models.append(model_from_checkpoint(read_checkpoint(p), config, dtype))
    return models


# subcommands

def cmd_ingest(args):
    vol = ingest_case(args.input)
    save_vox(args.output, vol)
    paths, hits = precompute(vol, tuple(args.sizes), args.cache_dir)
    print(f"volume\t{args.output}\t{'x'.join(map(str, vol.shape))}")
    for size, path in paths.items():
        print(f"{size}\t{path}\t{'hit' if hits[size] else 'computed'}")
    return 0


def cmd_inflate(args):
    ck2 = read_checkpoint(args.ckpt2d)
    config = load_config(args.config).model_config() if args.config else _config_from_2d(ck2)
    ck3 = import_2d_checkpoint(ck2, args.mode, config)
    write_checkpoint(ck3, args.output)
    for name, n2, n3 in inflation_report(ck2, ck3):
        print(f"{name}\t{n2:.6g}\t{n3:.6g}")
    return 0


def _config_from_2d(ck2):
    from .model import infer_config

    entries = dict(ck2.entries)
    for name, value in ck2.entries.items():
        if value.ndim == 4:
            entries[name] = np.zeros(value.shape + (value.shape[-1],), np.float32)
    return infer_config(Checkpoint(entries))


def cmd_folds(args):
    cases = te.read_cases(args.labels)
    unlabeled = [c.case_id for c in cases if c.label is None]
    if unlabeled:
        raise ContractError(f"cases without a label: {', '.join(unlabeled[:5])}")
    fa = te.stratified_kfold(cases, args.k, args.seed)
    te.write_folds(args.output, fa)
    labels = {c.case_id: c.label for c in cases}
    for label in sorted(set(labels.values())):
        counts = [sum(1 for c in fa.members(f) if labels[c] == label) for f in range(fa.k)]
        print(f"class{label}\t{','.join(map(str, counts))}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config, _overrides(args.set))
    if not cfg.cases:
        raise ContractError("config needs 'cases' (a case TSV) for training")
    cases = te.read_cases(cfg.cases)
    fa = _fold_assignment(cfg, cases)
    if not 0 <= args.fold < fa.k:
        raise ContractError(f"fold {args.fold} outside [0, {fa.k})")
    train_cases = [c for c in cases if fa.folds.get(c.case_id, -1) != args.fold]
    samples = [load_sample(c, cfg) for c in train_cases]
    result = te.train_toy(_initial_model(cfg, args.fold), samples, cfg.augment_plan(), cfg.hyper(args.fold))
    out = os.path.join(cfg.out_dir, f"fold{args.fold}")
    os.makedirs(out, exist_ok=True)
    write_checkpoint(save_checkpoint(result.model), os.path.join(out, "model.ntc"))
    write_checkpoint(save_checkpoint(result.ema_model()), os.path.join(out, "ema.ntc"))
    with open(os.path.join(out, "loss.tsv"), "w") as fh:
        for step, loss in enumerate(result.losses):
            fh.write(f"{step}\t{loss:.6f}\n")
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    print(f"fold\t{args.fold}\ntrain_cases\t{len(samples)}\nfinal_loss\t{result.losses[-1]:.6f}\nout\t{out}")
    return 0


def cmd_predict(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    models = _load_models([p for p in args.ckpts.split(",") if p], cfg if args.config else None)
    size = args.size or cfg.crop_size
    lines = []
    for case in te.read_cases(args.cases):
        out = te.ensemble_predict(models, _model_input(case, size))
        probs = ",".join(f"{p:.6f}" for p in out.probabilities)
        lines.append(f"{case.case_id}\t{out.label}\t{probs}")
    _emit(lines, args.output)
    return 0


def cmd_eval(args):
    preds = {}
    with open(args.predictions) as fh:
        for row in fh:
            parts = row.rstrip("\n").split("\t")
            if len(parts) >= 2 and parts[0]:
                preds[parts[0]] = int(parts[1])
    cases = [c for c in te.read_cases(args.labels) if c.label is not None]
    missing = [c.case_id for c in cases if c.case_id not in preds]
    if missing:
        raise ContractError(f"no prediction for: {', '.join(missing[:5])}")
    y = [c.label for c in cases]
    p = [preds[c.case_id] for c in cases]
    k = args.num_classes or max(max(y), max(p)) + 1
    macro, per = te.macro_f1(p, y, k)
    metrics = {"macro_f1": macro}
    metrics.update({f"f1_class{c}": v for c, v in enumerate(per)})
    metrics["accuracy"] = float(np.mean(np.array(p) == np.array(y)))
    lines = [f"{key}\t{value:.6f}" for key, value in metrics.items()]
    _emit(lines, args.output)
    return 0


def cmd_pseudolabel(args):
    model = _load_models([args.ckpt])[0]
    cases = te.read_cases(args.cases)
    size = args.size
    os.makedirs(args.output, exist_ok=True)
    out_cases = []
    for case in cases:
        vol = ingest_case(case.volume_ref)
        small = load_resampled(vol, (size,))[size]
        p = model.leaves(trainable=False)
        x = small[None, None].astype(model.dtype)
        logits = model.mask_logits(model.features(x, p), p, x.shape[2:]).value[0]
        diff = (logits[1] - logits[0]).astype(np.float64)
        if diff.shape != vol.shape:
            diff = spline_resample_volume(diff, vol.shape)
        mask = (diff > 0).astype(np.uint8)
        path = os.path.join(args.output, f"{case.case_id}.mask.vox")
        save_vox(path, mask)
        out_cases.append(te.LabeledCase(case.case_id, case.volume_ref, case.label, path))
        print(f"{case.case_id}\t{path}\t{int(mask.sum())}")
    te.write_cases(os.path.join(args.output, "cases.tsv"), out_cases)
    return 0


def cmd_selftest(args):
    from .selftest import run

    return 0 if run(verbose=not args.quiet) else 1


def _emit(lines, path):
    text = "\n".join(lines) + ("\n" if lines else "")
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ContractError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser():
    ap = _Parser(prog="ct3d", description="3D ConvNeXt tooling for CT volumes")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="ingest a slice directory or VOX1 file and fill the cache")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--sizes", type=int, nargs="+", default=[256, 224])
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("inflate", help="inflate a 2D checkpoint to 3D")
    p.add_argument("ckpt2d")
    p.add_argument("mode", choices=["full", "1g", "2g"])
    p.add_argument("output")
    p.add_argument("--config")
    p.set_defaults(func=cmd_inflate)

    p = sub.add_parser("folds", help="stratified k-fold assignment")
    p.add_argument("labels")
    p.add_argument("output")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("train", help="train one fold")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="ensemble prediction")
    p.add_argument("cases")
    p.add_argument("--ckpts", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--config")
    p.add_argument("--size", type=int)
    p.add_argument("--output")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="macro F1 of predictions against labels")
    p.add_argument("predictions")
    p.add_argument("labels")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pseudolabel", help="masks from a segmentation checkpoint")
    p.add_argument("cases")
    p.add_argument("output")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--size", type=int, default=224)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("selftest", help="run the built-in invariant and oracle checks")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except Ct3dError as exc:
        return _fail(exc.kind, str(exc), EXIT_CONTRACT)
    except OSError as exc:
        return _fail("io", f"{exc.filename or ''}: {exc.strerror or exc}".strip(": "), EXIT_CONTRACT)
    except ValueError as exc:
        return _fail("value", str(exc), EXIT_CONTRACT)
    except Exception as exc:  # noqa: BLE001
        return _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
