"""Online per-image adaptation: segment, synthesize, compare, update, repeat."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .autodiff import AdamState, Tensor, adam_step
from .errors import AdaptError, NumericError
from .segmentor import argmax_mask, heatmap_from_probs, label_intensities, seg_forward
from .similarity import SimilarityConfig, reflective_terms
from .synthesizer import extract_sketch, synth_forward

log = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    steps: int = 10
    lr_seg: float = 1e-4
    lr_synth: float = 1e-4
    reset_per_image: bool = True
    record_dice: bool = True
    loss_kind: str = "full"
    sketch_thresholds: tuple = (0.1, 0.2)

    def __post_init__(self):
        if self.steps < 0 or self.lr_seg < 0 or self.lr_synth < 0:
            raise ValueError("steps and learning rates must be non-negative")


@dataclass
class StepRecord:
    step: int
    loss: float
    ncc: float
    mi: float
    ms: float
    dice: list = None  # per class, background first
    dice_mean: float = math.nan
    hd_mean: float = math.nan


@dataclass
class AdaptReport:
    image_id: str = ""
    records: list = field(default_factory=list)
    final_mask: np.ndarray = None
    aborted_step: int = None
    error: str = ""

    @property
    def losses(self):
        return [r.loss for r in self.records]

    @property
    def dice_curve(self):
        return [r.dice_mean for r in self.records]

    def __len__(self):
        return len(self.records)


def _evaluate(record, mask, label, k):
    d = metrics.dice(mask, label, k)
    record.dice = d.per_class
    record.dice_mean = d.mean
    record.hd_mean = metrics.hausdorff_all(mask, label, k).mean


def adapt_image(seg_model, synth, image, cfg=None, label=None, sim_cfg=None, image_id=""):
    """Run ``cfg.steps`` reflective updates on one image.

    Returns ``(mask, report)``; ``report.records[t]`` describes the state after
    ``t`` updates, so it holds ``steps + 1`` entries.  With ``reset_per_image``
    the caller's models are left untouched.  A non-finite loss raises
    AdaptError whose ``mask`` is the last finite-step prediction.
    """
    cfg = cfg or AdaptConfig()
    sim_cfg = sim_cfg or SimilarityConfig()
    gen = synth.gen if hasattr(synth, "gen") else synth
    if cfg.reset_per_image:
        seg_model, gen = seg_model.clone(), gen.clone()
    k = seg_model.config.k_classes
    g = label_intensities(k)
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    image = image.reshape(image.shape[-2:])
    x = Tensor(image[None, None])
    sketch = Tensor(extract_sketch(image, *cfg.sketch_thresholds)[None, None])
    seg_params, gen_params = seg_model.parameters(), gen.parameters()
    opt_seg, opt_gen = AdamState(lr=cfg.lr_seg), AdamState(lr=cfg.lr_synth)
    report = AdaptReport(image_id)
    record_metrics = cfg.record_dice and label is not None
    mask = None

    for t in range(cfg.steps + 1):
        start = time.perf_counter()
        try:
            probs = seg_forward(seg_model, x)
            heat = heatmap_from_probs(probs, g)
            proxy = synth_forward(gen, heat, sketch)
            terms = reflective_terms(x, proxy, heat, sim_cfg, cfg.loss_kind)
            loss = terms.total.item()
            if not math.isfinite(loss):
                raise NumericError("loss is not finite")
        except NumericError as exc:
            report.aborted_step, report.error = t, str(exc)
            report.final_mask = mask
            err = AdaptError(f"{image_id or 'image'}: non-finite values at step {t}: {exc}", t)
            err.mask, err.report = mask, report
            raise err from None
        mask = argmax_mask(probs)
        if t < cfg.steps:
            seg_model.zero_grads()
            gen.zero_grads()
            terms.total.backward()
            adam_step(seg_params, opt_seg)
            adam_step(gen_params, opt_gen)
        record = StepRecord(t, loss, terms.ncc.item(), terms.mi.item(), (time.perf_counter() - start) * 1e3)
        if record_metrics:
            _evaluate(record, mask, label, k)
        report.records.append(record)
    report.final_mask = mask
    return mask, report


def _episode(args):
    seg_model, synth, sample, cfg, sim_cfg = args
    image_id = getattr(sample, "id", "")
    label = sample[1] if cfg.record_dice else None
    try:
        _, report = adapt_image(seg_model, synth, sample[0], cfg, label, sim_cfg, image_id)
    except AdaptError as exc:
        log.warning("%s", exc)
        report = exc.report
    return report


def adapt_dataset(seg_model, synth, samples, cfg=None, sim_cfg=None, workers=1):
    """Independent episodes over ``samples`` (objects indexable as (image, label) with an ``id``).

    Failed episodes are kept with ``aborted_step`` set.  Returns the reports in input order.
    """
    cfg = cfg or AdaptConfig()
    if not cfg.reset_per_image and workers > 1:
        raise ValueError("continual adaptation is sequential; use workers=1")
    jobs = [(seg_model, synth, s, cfg, sim_cfg) for s in samples]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_episode, jobs))
    return [_episode(job) for job in jobs]


def aggregate_curves(reports):
    """Per-step mean(std) of loss, Dice and Hausdorff across images."""
    if not reports:
        return {"images": 0, "aborted": 0, "steps": []}
    n_steps = max(len(r) for r in reports)
    steps = []
    for t in range(n_steps):
        recs = [r.records[t] for r in reports if len(r) > t]
        row = {"step": t}
        for key in ("loss", "ncc", "mi", "dice_mean", "hd_mean", "ms"):
            s = metrics.mean_std([getattr(rec, key) for rec in recs])
            row[key] = {"mean": s.mean, "std": s.std, "n": s.count}
        steps.append(row)
    aborted = sum(r.aborted_step is not None for r in reports)
    return {"images": len(reports), "aborted": aborted, "steps": steps}


def write_curves_csv(path, reports, k):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "step", "loss", "ncc", "mi", "dice_mean"] + [f"dice_c{c}" for c in range(1, k)] + ["ms_per_step"])
        for r in reports:
            for rec in r.records:
                dice = rec.dice[1:] if rec.dice else [math.nan] * (k - 1)
                w.writerow([r.image_id, rec.step, f"{rec.loss:.8f}", f"{rec.ncc:.8f}", f"{rec.mi:.8f}", f"{rec.dice_mean:.6f}"]
                           + [f"{d:.6f}" for d in dice] + [f"{rec.ms:.3f}"])


def write_summary_json(path, reports):
    def clean(obj):
        if isinstance(obj, float) and not math.isfinite(obj):
            return None
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [clean(v) for v in obj]
        return obj

    with open(path, "w") as fh:
        json.dump(clean(aggregate_curves(reports)), fh, indent=1)


def default_workers():
    return int(os.environ.get("REFLECT_TTA_THREADS", "1"))
