"""U-Net style segmentor, intensity heatmap and offline training."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import metrics
from .autodiff import Adam, Conv2d, Module, Tensor, functional as F
from .autodiff import checkpoint
from .errors import DataError, NumericError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class SegmentorConfig:
    k_classes: int = 3
    base_channels: int = 16
    depth: int = 3
    input_channels: int = 1

    def __post_init__(self):
        if self.k_classes < 2:
            raise ValueError("k_classes must be >= 2 (background included)")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


def label_intensities(k):
    """Evenly spaced class intensities on [0, 255]; background is 0."""
    return np.linspace(0.0, 255.0, k)


class ConvBlock(Module):
    def __init__(self, cin, cout, rng):
        self.c1 = Conv2d(cin, cout, 3, rng=rng)
        self.c2 = Conv2d(cout, cout, 3, rng=rng)

    def forward(self, x):
        return F.relu(self.c2(F.relu(self.c1(x))))


class UNet(Module):
    """Encoder-decoder with skip connections, max-pool down, nearest-neighbour up."""

    def __init__(self, cin, cout, base, depth, rng):
        widths = [base * 2 ** i for i in range(depth + 1)]
        self.depth = depth
        self.down = [ConvBlock(cin if i == 0 else widths[i - 1], widths[i], rng) for i in range(depth)]
        self.bottom = ConvBlock(widths[depth - 1], widths[depth], rng)
        self.up = [ConvBlock(widths[i + 1] + widths[i], widths[i], rng) for i in range(depth)]
        self.head = Conv2d(widths[0], cout, 1, rng=rng, gain=1.0)

    def check_input(self, x):
        h, w = x.shape[-2:]
        step = 2 ** self.depth
        if x.ndim != 4 or h % step or w % step:
            raise ShapeError(f"input {x.shape} must be [B,C,H,W] with H, W divisible by {step}")

    def forward(self, x):
        self.check_input(x)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2x(x)
        x = self.bottom(x)
        for i in reversed(range(self.depth)):
            x = self.up[i](F.concat([F.upsample_nearest2x(x), skips[i]], axis=1))
        return self.head(x)


class Segmentor(Module):
    def __init__(self, config=None, seed=0):
        self.config = config or SegmentorConfig()
        c = self.config
        rng = np.random.default_rng(seed)
        self.net = UNet(c.input_channels, c.k_classes, c.base_channels, c.depth, rng)
        self.assign_names("seg")

    def forward(self, image):
        return seg_forward(self, image)


def _as_batch(image):
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim == 2:
        image = image.reshape(1, 1, *image.shape)
    return image


def seg_forward(model, image):
    """Image [1,Cin,H,W] in [0,1] -> probability map [1,k,H,W]."""
    return F.softmax_channels(model.net(_as_batch(image)))


def heatmap_from_probs(p, g):
    """Per-pixel sum over classes of probability times class intensity."""
    g = np.asarray(g, dtype=float)
    if p.ndim != 4 or p.shape[1] != g.size:
        raise ShapeError(f"{g.size} intensities for probability map of shape {p.shape}")
    weights = Tensor(g.reshape(1, -1, 1, 1))
    return F.sum(p * weights, axis=1, keepdims=True)


def argmax_mask(p):
    """Hard labels; ties go to the lowest class index."""
    data = p.data if isinstance(p, Tensor) else np.asarray(p)
    mask = data.argmax(axis=1)
    return mask[0] if mask.shape[0] == 1 else mask


def one_hot(mask, k):
    mask = np.asarray(mask)
    return (mask[..., None, :, :] == np.arange(k).reshape(-1, 1, 1)).astype(float)


def cross_entropy_loss(p, target, eps=1e-7):
    """Mean over pixels of -log(max(p_target, eps))."""
    target = np.asarray(target)
    if target.ndim == 2:
        target = target[None]
    k = p.shape[1]
    if target.shape != (p.shape[0],) + p.shape[2:]:
        raise ShapeError(f"target {target.shape} does not match probability map {p.shape}")
    if target.min() < 0 or target.max() >= k:
        raise DataError(f"labels must lie in 0..{k - 1}")
    picked = F.sum(p * Tensor(one_hot(target, k)), axis=1)
    return -F.mean(F.log(F.clip(picked, eps, None)))


def predict(model, image):
    return argmax_mask(seg_forward(model, image))


def evaluate(model, samples, k):
    """Mean foreground Dice and per-class Dice over (image, label) pairs."""
    per_class = []
    for image, label in samples:
        per_class.append(metrics.dice(predict(model, image), label, k).per_class)
    per_class = np.mean(per_class, axis=0) if per_class else np.full(k, np.nan)
    return float(np.mean(per_class[1:])), [float(v) for v in per_class]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_segmentor(config, train, val, epochs=30, lr=1e-3, batch_size=8, seed=0, out_dir=None,
                    model=None, start_epoch=0, initial_best=None):
    """Supervised cross-entropy training; keeps the best-validation-Dice weights.

    ``train`` and ``val`` are sequences of ``(image [H,W] in [0,1], label [H,W])``.
    Writes ``seg.ckpt`` (best), ``seg_last.ckpt`` and ``seg_train.csv`` to ``out_dir``.
    Returns ``(model, history)`` where history rows are dicts mirroring the CSV.
    ``initial_best`` is an optional ``(val_dice, state_dict)`` carried over from
    an interrupted run so that resuming never discards a better earlier epoch.
    """
    if not train:
        raise DataError("training set is empty")
    model = model or Segmentor(config, seed=seed)
    k = model.config.k_classes
    opt = Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    images = np.stack([np.asarray(s[0], dtype=float) for s in train])[:, None]
    labels = np.stack([np.asarray(s[1]) for s in train])

    history = []
    best = initial_best or (-1.0, model.state_dict())
    val_dice, val_pc = evaluate(model, val, k) if val else (float("nan"), [])
    if epochs == 0:
        history.append(dict(epoch=start_epoch, train_loss=float("nan"), val_dice_mean=val_dice, val_dice_per_class=val_pc))
    for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
        losses = []
        for idx in _batches(len(train), batch_size, rng):
            opt.zero_grad()
            loss = cross_entropy_loss(seg_forward(model, Tensor(images[idx])), labels[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"segmentor training diverged at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_dice, val_pc = evaluate(model, val, k) if val else (float("nan"), [])
        history.append(dict(epoch=epoch, train_loss=float(np.mean(losses)), val_dice_mean=val_dice, val_dice_per_class=val_pc))
        log.info("seg epoch %d loss %.4f val dice %.4f", epoch, np.mean(losses), val_dice)
        if val_dice > best[0]:
            best = (val_dice, model.state_dict())
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint.save(os.path.join(out_dir, "seg_last.ckpt"), model.state_dict())
    if val and history and not np.isnan(best[0]) and best[0] >= 0:
        model.load_state_dict(best[1])
    if out_dir is not None:
        checkpoint.save(os.path.join(out_dir, "seg.ckpt"), model.state_dict())
        write_training_log(os.path.join(out_dir, "seg_train.csv"), history, k, append=start_epoch > 0)
    return model, history


def write_training_log(path, history, k, append=False):
    new = not (append and os.path.exists(path))
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "train_loss", "val_dice_mean"] + [f"val_dice_c{c}" for c in range(1, k)])
        for row in history:
            pcs = row["val_dice_per_class"][1:] if row["val_dice_per_class"] else [float("nan")] * (k - 1)
            w.writerow([row["epoch"], f"{row['train_loss']:.6f}", f"{row['val_dice_mean']:.6f}"] + [f"{v:.6f}" for v in pcs])


def load_segmentor(path, config=None):
    model = Segmentor(config)
    model.load_state_dict(checkpoint.load(path))
    return model
