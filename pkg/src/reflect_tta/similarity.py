"""Structural similarity losses between an input image and its proxy.

* ``ncc_loss``: one minus the mean Pearson correlation over non-overlapping
  n x n tiles (edge-replicated up to a multiple of n).
* ``mi_parzen``: mutual information of a Gaussian soft-binned joint histogram.
* ``reflective_loss``: both of the above on heatmap-attended images.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, functional as F
from .errors import ShapeError


@dataclass
class SimilarityConfig:
    n: int = 9
    mi_bins: int = 32
    parzen_sigma: float = 1.0 / 32
    eps: float = 1e-5

    def __post_init__(self):
        if self.n < 2 or self.mi_bins < 2 or self.parzen_sigma <= 0 or self.eps <= 0:
            raise ValueError(f"invalid similarity config {self}")

    def window_count(self, h, w):
        return -(-h // self.n) * -(-w // self.n)


class WindowStats(NamedTuple):
    mu_a: Tensor
    mu_b: Tensor
    sigma_a: Tensor
    sigma_b: Tensor
    cc: Tensor  # per-window correlation


class ParzenDensity(NamedTuple):
    joint: Tensor
    marginal_a: Tensor
    marginal_b: Tensor


class LossTerms(NamedTuple):
    total: Tensor
    ncc: Tensor
    mi: Tensor


def _image(x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, 1, *x.shape)
    return x


def _same_shape(a, b):
    a, b = _image(a), _image(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _tiles(x, n):
    *lead, h, w = x.shape
    x = F.pad_edge(x, -h % n, -w % n)
    th, tw = x.shape[-2] // n, x.shape[-1] // n
    lead = int(np.prod(lead)) if lead else 1
    x = x.reshape(lead, th, n, tw, n).transpose(0, 1, 3, 2, 4)
    return x.reshape(lead, th * tw, n * n)


def window_stats(a, b, cfg=None):
    cfg = cfg or SimilarityConfig()
    a, b = _same_shape(a, b)
    if min(a.shape[-2:]) < cfg.n:
        raise ShapeError(f"image extents {a.shape[-2:]} smaller than window size {cfg.n}")
    ta, tb = _tiles(a, cfg.n), _tiles(b, cfg.n)
    mu_a, mu_b = F.mean(ta, -1, keepdims=True), F.mean(tb, -1, keepdims=True)
    da, db = ta - mu_a, tb - mu_b
    sigma_a = F.sqrt(F.mean(da * da, -1))
    sigma_b = F.sqrt(F.mean(db * db, -1))
    cc = F.mean(da * db, -1) / (sigma_a * sigma_b + cfg.eps)
    return WindowStats(mu_a, mu_b, sigma_a, sigma_b, cc)


def ncc_loss(a, b, cfg=None):
    """1 - mean over tiles of cov(A,B) / (sigma_A sigma_B + eps), population moments."""
    return 1.0 - F.mean(window_stats(a, b, cfg).cc)


def _soft_bins(x, cfg, lo, hi):
    centers = Tensor(np.linspace(0.0, 1.0, cfg.mi_bins).reshape(1, -1))
    x = (x.reshape(-1, 1) - lo) * (1.0 / (hi - lo))
    d = x - centers
    logits = d * d * (-0.5 / cfg.parzen_sigma ** 2)
    # normalising per pixel; the shift only guards exp() against underflow
    logits = logits - Tensor(logits.data.max(axis=1, keepdims=True))
    w = F.exp(logits)
    return w / F.sum(w, axis=1, keepdims=True)


def parzen_density(a, b, cfg=None, value_range=(0.0, 1.0)):
    cfg = cfg or SimilarityConfig()
    a, b = _same_shape(a, b)
    lo, hi = value_range
    wa, wb = _soft_bins(a, cfg, lo, hi), _soft_bins(b, cfg, lo, hi)
    joint = F.matmul(F.transpose(wa, (1, 0)), wb) * (1.0 / wa.shape[0])
    return ParzenDensity(joint, F.sum(joint, axis=1), F.sum(joint, axis=0))


def mi_parzen(a, b, cfg=None, value_range=(0.0, 1.0), clamp=1e-10):
    """Soft-histogram mutual information in nats; intensities mapped from ``value_range`` to [0,1]."""
    joint, pa, pb = parzen_density(a, b, cfg, value_range)
    outer = pa.reshape(-1, 1) * pb.reshape(1, -1)
    ratio = F.log(F.clip(joint, clamp, None)) - F.log(F.clip(outer, clamp, None))
    return F.sum(joint * ratio)


def mi_loss(a, b, cfg=None, value_range=(0.0, 1.0)):
    return -mi_parzen(a, b, cfg, value_range)


def apply_attention(img, heatmap):
    """(1 + heatmap/255) * img, differentiable in both arguments."""
    img, heatmap = _same_shape(img, heatmap)
    return img * (heatmap * (1.0 / 255.0) + 1.0)


def l1_loss(a, b):
    a, b = _same_shape(a, b)
    return F.mean(F.absolute(a - b))


def reflective_terms(image, proxy, heatmap, cfg=None, kind="full"):
    """Similarity between attended input and attended proxy.

    ``kind="full"`` is NCC + MI; ``kind="l1"`` replaces both with mean absolute error
    (kept for the ablation comparison only).
    """
    cfg = cfg or SimilarityConfig()
    a_hat = apply_attention(image, heatmap)
    b_hat = apply_attention(proxy, heatmap)
    if kind == "l1":
        total = l1_loss(a_hat, b_hat)
        zero = Tensor(0.0)
        return LossTerms(total, zero, zero)
    if kind != "full":
        raise ValueError(f"unknown loss kind {kind!r}")
    ncc = ncc_loss(a_hat, b_hat, cfg)
    # attended intensities live on [0, 2]
    mi = mi_loss(a_hat, b_hat, cfg, value_range=(0.0, 2.0))
    return LossTerms(ncc + mi, ncc, mi)


def reflective_loss(image, proxy, heatmap, cfg=None, kind="full"):
    return reflective_terms(image, proxy, heatmap, cfg, kind).total
