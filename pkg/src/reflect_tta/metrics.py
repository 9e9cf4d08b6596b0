"""Dice and Hausdorff distance per class, plus mean(std) aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError


@dataclass
class DiceResult:
    per_class: list  # index 0 is background
    mean: float  # over foreground classes


@dataclass
class HausdorffResult:
    per_class: list  # math.inf when exactly one of the masks is empty
    mean: float  # over finite foreground values; nan if none
    n_infinite: int = 0


def _check(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    return pred, truth


def dice_class(pred, truth, c):
    p, t = pred == c, truth == c
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(p, t).sum() / denom


def dice(pred, truth, k):
    pred, truth = _check(pred, truth)
    scores = [float(dice_class(pred, truth, c)) for c in range(k)]
    fg = scores[1:] if k > 1 else scores
    return DiceResult(scores, float(np.mean(fg)))


def _directed(a, b, sampling=None):
    # distance from every pixel to the nearest pixel of b, looked up on a
    dist = ndimage.distance_transform_edt(~b, sampling=sampling)
    return dist[a]


def hausdorff(pred, truth, class_id, percentile=100):
    """Symmetric Hausdorff distance in pixels between the ``class_id`` regions.

    Both empty gives 0; exactly one empty gives ``math.inf``.
    ``percentile=95`` yields the HD95 variant.
    """
    pred, truth = _check(pred, truth)
    a, b = pred == class_id, truth == class_id
    na, nb = a.any(), b.any()
    if not na and not nb:
        return 0.0
    if not na or not nb:
        return math.inf
    d_ab, d_ba = _directed(a, b), _directed(b, a)
    if percentile == 100:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


def hausdorff_all(pred, truth, k, percentile=100):
    values = [hausdorff(pred, truth, c, percentile) for c in range(k)]
    fg = values[1:] if k > 1 else values
    finite = [v for v in fg if math.isfinite(v)]
    mean = float(np.mean(finite)) if finite else math.nan
    return HausdorffResult(values, mean, len(fg) - len(finite))


@dataclass
class Summary:
    mean: float
    std: float
    count: int

    def __str__(self):
        return f"{self.mean:.4f}({self.std:.4f})"


def mean_std(values):
    """Population mean and std over finite values."""
    vals = np.asarray([v for v in values if v is not None and math.isfinite(v)], dtype=float)
    if vals.size == 0:
        return Summary(math.nan, math.nan, 0)
    return Summary(float(vals.mean()), float(vals.std()), int(vals.size))


@dataclass
class EvalTable:
    rows: list = field(default_factory=list)  # (image_id, class, dice, hd)

    def add(self, image_id, pred, truth, k):
        d = dice(pred, truth, k)
        h = hausdorff_all(pred, truth, k)
        for c in range(1, k):
            self.rows.append((image_id, c, d.per_class[c], h.per_class[c]))
        return d, h

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "class", "dice", "hd"])
            for image_id, c, dv, hv in self.rows:
                w.writerow([image_id, c, f"{dv:.6f}", "inf" if math.isinf(hv) else f"{hv:.6f}"])


def aggregate(reports):
    """Reduce ``[{metric: value}, ...]`` to ``{metric: Summary}``; empty in, empty out."""
    if not reports:
        return {}
    keys = []
    for r in reports:
        keys.extend(k for k in r if k not in keys)
    return {k: mean_std([r[k] for r in reports if k in r]) for k in keys}


def format_table(summaries):
    return "\n".join(f"{k:>16s}  {v}" for k, v in summaries.items())
