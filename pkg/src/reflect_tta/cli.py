"""Command-line driver: gen-data, train-seg, train-synth, adapt, eval, gradcheck.

Exit codes: 0 success, 1 gradcheck failure, 2 configuration error,
3 I/O error or missing/corrupt/mismatched file or dataset, 4 training divergence, 5 aborted episode under --strict.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import config as run_config
from . import gradcheck, metrics
from .autodiff import checkpoint
from .data import build_manifest, load_split, save_label
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError, StateError
from .reflect import adapt_dataset, write_curves_csv, write_summary_json
from .segmentor import load_segmentor, predict, train_segmentor
from .synthesizer import load_synthesizer, train_synthesizer

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_ABORTED = 0, 1, 2, 3, 4, 5

log = logging.getLogger("reflect_tta")


def _prepare_run(args):
    cfg = run_config.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "run_config.json"), "w") as fh:
        fh.write(run_config.dumps(cfg) + "\n")
    return cfg


def _workers(args, cfg):
    if getattr(args, "workers", None):
        return args.workers
    if "REFLECT_TTA_THREADS" in os.environ:
        try:
            return max(1, int(os.environ["REFLECT_TTA_THREADS"]))
        except ValueError:
            raise ConfigError("REFLECT_TTA_THREADS must be an integer") from None
    return cfg.workers


def _load_split(root, split, required=True):
    samples = load_split(root, split)
    if required and not samples:
        raise DataError(f"split {split!r} in {root} is empty or missing")
    return samples


def _read_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_gen_data(args):
    cfg = _prepare_run(args)
    manifest = build_manifest(args.out, cfg.counts, cfg.seed, cfg.scene, cfg.shift, cfg.shifted_splits)
    for entry in manifest:
        print(f"{entry['split']:>5s}: {len(entry['items'])} scenes")
    return EXIT_OK


def cmd_train_seg(args):
    cfg = _prepare_run(args)
    train, val = _load_split(args.data, "train"), _load_split(args.data, "val", required=False)
    epochs = cfg.train.seg_epochs if args.epochs is None else args.epochs
    model, start, best = None, 0, None
    if args.resume:
        model = load_segmentor(os.path.join(args.out, "seg_last.ckpt"), cfg.segmentor)
        rows = _read_log(os.path.join(args.out, "seg_train.csv"))
        start = int(rows[-1]["epoch"]) if rows else 0
        scores = [float(r["val_dice_mean"]) for r in rows]
        if scores and not np.isnan(max(scores)):
            best = (max(scores), checkpoint.load(os.path.join(args.out, "seg.ckpt")))
    model, history = train_segmentor(cfg.segmentor, train, val, epochs, cfg.train.seg_lr, cfg.train.seg_batch_size,
                                     cfg.seed, args.out, model, start, best)
    for row in history:
        print(f"epoch {row['epoch']:4d}  loss {row['train_loss']:.4f}  val dice {row['val_dice_mean']:.4f}")
    return EXIT_OK


def cmd_train_synth(args):
    cfg = _prepare_run(args)
    train, val = _load_split(args.data, "train"), _load_split(args.data, "val", required=False)
    epochs = cfg.train.synth_epochs if args.epochs is None else args.epochs
    synth, start, best = None, 0, None
    if args.resume:
        synth = load_synthesizer(os.path.join(args.out, "synth_last.ckpt"), cfg.synth)
        rows = _read_log(os.path.join(args.out, "synth_train.csv"))
        start = int(rows[-1]["epoch"]) if rows else 0
        scores = [float(r["val_mae"]) for r in rows]
        if scores and not np.isnan(min(scores)):
            best = (min(scores), checkpoint.load(os.path.join(args.out, "synth.ckpt")))
    synth, history = train_synthesizer(cfg.synth, train, val, cfg.scene.k_classes, epochs, cfg.seed, args.out,
                                       synth, start, best)
    for row in history:
        print(f"epoch {row['epoch']:4d}  g {row['g_loss']:.4f}  d {row['d_loss']:.4f}  val mae {row['val_mae']:.4f}")
    return EXIT_OK


def _write_masks_and_metrics(out, items, k):
    """``items`` is a list of (image_id, mask or None, label); returns the per-image summary rows."""
    os.makedirs(os.path.join(out, "masks"), exist_ok=True)
    table, rows = metrics.EvalTable(), []
    for image_id, mask, label in items:
        if mask is None:
            continue
        save_label(os.path.join(out, "masks", f"{image_id}.pgm"), mask)
        d, h = table.add(image_id, mask, label, k)
        rows.append({"dice": d.mean, "hd": h.mean})
    table.write_csv(os.path.join(out, "metrics.csv"))
    summary = metrics.aggregate(rows)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump({key: dataclasses.asdict(s) for key, s in summary.items()}, fh, indent=1)
    return summary


def cmd_eval(args):
    cfg = _prepare_run(args)
    model = load_segmentor(args.seg_ckpt, cfg.segmentor)
    split = args.split or cfg.eval_split
    samples = _load_split(args.data, split)
    items = [(s.id, predict(model, s.image), s.label) for s in samples]
    summary = _write_masks_and_metrics(args.out, items, cfg.scene.k_classes)
    print(f"eval on {split} ({len(samples)} images)")
    print(metrics.format_table(summary))
    return EXIT_OK


def cmd_adapt(args):
    cfg = _prepare_run(args)
    adapt_cfg = cfg.adapt if args.steps is None else dataclasses.replace(cfg.adapt, steps=args.steps)
    seg = load_segmentor(args.seg_ckpt, cfg.segmentor)
    synth = load_synthesizer(args.synth_ckpt, cfg.synth)
    split = args.split or cfg.eval_split
    samples = _load_split(args.data, split, required=False)
    reports = adapt_dataset(seg, synth, samples, adapt_cfg, cfg.similarity, _workers(args, cfg))
    k = cfg.scene.k_classes
    write_curves_csv(os.path.join(args.out, "curves.csv"), reports, k)
    write_summary_json(os.path.join(args.out, "curves.json"), reports)
    summary = _write_masks_and_metrics(args.out, [(r.image_id, r.final_mask, s.label) for r, s in zip(reports, samples)], k)
    aborted = [r.image_id for r in reports if r.aborted_step is not None]
    print(f"adapted {len(reports)} images on {split} for {adapt_cfg.steps} steps")
    done = [r for r in reports if r.aborted_step is None]
    if done and adapt_cfg.record_dice:
        first = np.mean([r.records[0].dice_mean for r in done])
        last = np.mean([r.records[-1].dice_mean for r in done])
        print(f"mean dice step 0 {first:.4f} -> step {adapt_cfg.steps} {last:.4f}")
    print(metrics.format_table(summary))
    if aborted:
        print(f"{len(aborted)} episode(s) aborted: {', '.join(aborted)}")
        if args.strict:
            return EXIT_ABORTED
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck.run(args.module, args.seed)
    failed = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.module:>12s}  {r.name:<24s} {r.error:.3e}  (tol {r.tol:.0e})  {status}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}")
        return EXIT_GRADCHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="reflect-tta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, data=True, out=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON run config (defaults if omitted)")
        if data:
            p.add_argument("--data", required=True, help="dataset root containing manifest.json")
        if out:
            p.add_argument("--out", required=True, help="run directory")
        return p

    p = add("gen-data", cmd_gen_data, "generate the synthetic dataset", data=False)
    p.add_argument("--seed", type=int)
    for name, fn in (("train-seg", cmd_train_seg), ("train-synth", cmd_train_synth)):
        p = add(name, fn, f"offline {name[6:]} training")
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--resume", action="store_true", help="continue from the *_last.ckpt in --out")
    p = add("adapt", cmd_adapt, "reflective test-time adaptation")
    p.add_argument("--seg-ckpt", required=True)
    p.add_argument("--synth-ckpt", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--split")
    p.add_argument("--workers", type=int)
    p.add_argument("--strict", action="store_true", help="exit 5 if any episode aborts")
    p = add("eval", cmd_eval, "baseline metrics without adaptation")
    p.add_argument("--seg-ckpt", required=True)
    p.add_argument("--split")
    p = sub.add_parser("gradcheck", help="finite-difference gradient checks in float64")
    p.set_defaults(fn=cmd_gradcheck)
    p.add_argument("--module", choices=gradcheck.MODULES)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, DataError, ShapeError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
